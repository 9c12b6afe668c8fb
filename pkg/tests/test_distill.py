import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvrflab.analytics import finite_diff_grad
from dvrflab.condfield import VAR_MIN, CondGMMField, Mixture, eps_view, product
from dvrflab.distill import (DistillContext, dvrf_terms, energy_dvrf, energy_dvrf_grad, grad_dds,
                             grad_dvrf, grad_rfds, grad_sds, irfds_invert)
from dvrflab.errors import ConfigError, ShapeError
from dvrflab.schedules import Schedule, ShiftRule, eval_schedule

from conftest import three_component


def dirac_field(x0s):
    return CondGMMField([Mixture.gaussian(x0s, VAR_MIN)])


def test_context_validation(mix_field):
    with pytest.raises(ConfigError):
        DistillContext(mix_field, w_src=-1.0)
    with pytest.raises(ConfigError):
        DistillContext(mix_field, weight_mode="other")


def test_rfds_zero_on_dirac_datum():
    x0s = np.array([0.4, -0.7])
    ctx = DistillContext(dirac_field(x0s), w_tgt=1.0)
    rng = np.random.default_rng(0)
    for _ in range(10):
        t, eps = rng.uniform(0.05, 0.95), rng.standard_normal(2)
        # the narrowest legal component leaves a residual of order VAR_MIN / b^2
        tol = 10 * VAR_MIN / t ** 2 * (1 + np.abs(eps).max())
        assert np.max(np.abs(grad_rfds(ctx, x0s, 0, t, eps))) < tol
        assert np.max(np.abs(grad_sds(ctx, x0s, 0, t, eps))) < tol


def test_rfds_symmetric_zero():
    ctx = DistillContext(CondGMMField([Mixture.gaussian([0.0], 1.0)]), w_tgt=1.0)
    assert np.array_equal(grad_rfds(ctx, [0.0], 0, 0.5, [0.0]), [0.0])


def test_rfds_shape_mismatch(mix_field):
    with pytest.raises(ShapeError):
        grad_rfds(DistillContext(mix_field), np.zeros(4), 0, 0.5, np.zeros(3))


def test_rfds_is_not_the_energy_gradient():
    """The Jacobian-free residual differs from the true gradient of 1/2 ||residual||^2."""
    f = CondGMMField([Mixture.gaussian([1.0, 0.0], [0.5, 2.0])])
    ctx = DistillContext(f, w_tgt=1.0)
    x0, eps, t = np.array([0.3, -0.2]), np.array([0.5, 1.0]), 0.4
    a, b, a_dot, b_dot = eval_schedule(f.schedule, t)

    def energy(x):
        r = f.velocity(a * x + b * eps, t, 0) - (a_dot * x + b_dot * eps)
        return 0.5 * r @ r

    fd = finite_diff_grad(energy, x0, 1e-5)
    r = grad_rfds(ctx, x0, 0, t, eps)
    full = (a * f.velocity_jacobian(a * x0 + b * eps, t, 0) - a_dot * np.eye(2)).T @ r
    assert np.allclose(fd, full, rtol=1e-6)
    gap = np.linalg.norm(r - fd) / np.linalg.norm(fd)
    assert np.isfinite(gap) and gap > 1e-3


def test_sds_rfds_relation(mix_field):
    ctx = DistillContext(mix_field)
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = rng.uniform(0.01, 0.99)
        x0, eps = rng.normal(0, 1.5, (2, 4))
        a, b, a_dot, b_dot = eval_schedule(mix_field.schedule, t)
        lhs = grad_sds(ctx, x0, 1, t, eps)
        rhs = a / (b_dot * a - a_dot * b) * grad_rfds(ctx, x0, 1, t, eps)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1, np.max(np.abs(rhs)))


def test_sds_via_score(mix_field):
    ctx = DistillContext(mix_field, w_tgt=1.0)
    rng = np.random.default_rng(2)
    for _ in range(10):
        t = rng.uniform(0.05, 0.95)
        x0, eps = rng.normal(0, 1, (2, 4))
        a, b, _, _ = eval_schedule(mix_field.schedule, t)
        xt = a * x0 + b * eps
        ref = -b * mix_field.score(xt, t, 0) - eps
        assert np.max(np.abs(grad_sds(ctx, x0, 0, t, eps) - ref)) < 1e-10


def test_dds_identical_branches(mix_field):
    ctx = DistillContext(mix_field, w_src=6.0, w_tgt=6.0)
    x, eps = np.ones(4), np.full(4, 0.3)
    assert np.array_equal(grad_dds(ctx, x, x, 1, 1, 0.4, eps), np.zeros(4))


def test_dds_velocity_relation(mix_field):
    ctx = DistillContext(mix_field)
    rng = np.random.default_rng(3)
    f = mix_field
    for _ in range(20):
        t = rng.uniform(0.01, 0.99)
        xt_, xs_, eps = rng.normal(0, 1.5, (3, 4))
        a, b, a_dot, b_dot = eval_schedule(f.schedule, t)
        xtt, xts = a * xt_ + b * eps, a * xs_ + b * eps
        ref = a / (b_dot * a - a_dot * b) * (f.cfg_velocity(xtt, t, 1, ctx.w_tgt)
                                             - f.cfg_velocity(xts, t, 0, ctx.w_src)
                                             - a_dot / a * (xtt - xts))
        got = grad_dds(ctx, xt_, xs_, 1, 0, t, eps)
        assert np.max(np.abs(got - ref)) <= 1e-10 * max(1, np.max(np.abs(ref)))


def test_dds_direction_shifted_gaussians():
    mu = np.array([4.0, -3.0])
    f = CondGMMField([Mixture.gaussian(np.zeros(2)), Mixture.gaussian(mu)])
    ctx = DistillContext(f, w_src=1.0, w_tgt=1.0)
    rng = np.random.default_rng(4)
    for _ in range(10):
        x, eps = rng.standard_normal((2, 2))
        g = grad_dds(ctx, x, x, 1, 0, 0.5, eps)
        cos = -g @ mu / (np.linalg.norm(g) * np.linalg.norm(mu))
        assert cos > 0.99


def test_dvrf_initialisation_reduces(mix_field):
    ctx = DistillContext(mix_field, ShiftRule.linear(0.7), 2.0, 5.0)
    x, eps, t = np.full(4, 0.2), np.full(4, -0.4), 0.35
    a, b, _, _ = eval_schedule(mix_field.schedule, t)
    xt = a * x + b * eps
    expected = mix_field.cfg_velocity(xt, t, 1, 5.0) - mix_field.cfg_velocity(xt, t, 0, 2.0)
    assert np.array_equal(grad_dvrf(ctx, x, x, 1, 0, t, eps), expected)
    same = DistillContext(mix_field, ShiftRule.linear(0.7), 5.0, 5.0)
    assert np.array_equal(grad_dvrf(same, x, x, 1, 1, t, eps), np.zeros(4))
    assert energy_dvrf(same, x, x, 1, 1, t, eps) == 0.0


def test_dvrf_dds_reduction(mix_field):
    ctx = DistillContext(mix_field, ShiftRule.zero(), 1.0, 1.0)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        t = rng.uniform(0.01, 0.99)
        xt_, xs_, eps = rng.normal(0, 1.5, (3, 4))
        a, b, a_dot, b_dot = eval_schedule(mix_field.schedule, t)
        lhs = grad_dvrf(ctx, xt_, xs_, 1, 0, t, eps)
        rhs = (b_dot * a - a_dot * b) / a * grad_dds(ctx, xt_, xs_, 1, 0, t, eps)
        worst = max(worst, np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
    assert worst < 1e-10


def test_dvrf_terms_construction(mix_field):
    ctx = DistillContext(mix_field, ShiftRule.progressive(), weight_mode="formula")
    xt_, xs_, eps = np.ones(4), np.zeros(4), np.full(4, 0.5)
    terms = dvrf_terms(ctx, xt_, xs_, 1, 0, 0.6, eps, k=10, n_total=20)
    assert terms.c == pytest.approx(0.3) and terms.c_dot == pytest.approx(0.5)
    assert np.allclose(terms.x_hat, 0.4 * xt_ + 0.6 * eps + 0.3 * (xt_ - xs_))
    assert terms.weight == pytest.approx(2 * (0.4 + 0.3 + 1 - 0.5))


def test_batched_noise(mix_field):
    ctx = DistillContext(mix_field, ShiftRule.linear(1.0))
    eps = np.random.default_rng(6).standard_normal((3, 4))
    batch = grad_dvrf(ctx, np.ones(4), np.zeros(4), 1, 0, 0.5, eps)
    for i in range(3):
        assert np.allclose(batch[i], grad_dvrf(ctx, np.ones(4), np.zeros(4), 1, 0, 0.5, eps[i]),
                           atol=1e-14)


def test_energy_gradient_finite_difference():
    rng = np.random.default_rng(7)
    for i in range(20):
        d = 3
        f = CondGMMField([Mixture.gaussian(rng.normal(0, 1, d), rng.uniform(0.3, 2, d)),
                          Mixture.gaussian(rng.normal(0, 1, d), rng.uniform(0.3, 2, d))])
        ctx = DistillContext(f, ShiftRule.linear(rng.uniform(0, 1)), 1.0 + i % 3, 2.0)
        xs, xt_, eps = rng.normal(0, 1, (3, d))
        t = rng.uniform(0.1, 0.9)
        full = energy_dvrf_grad(ctx, xt_, xs, 1, 0, t, eps)
        fd = finite_diff_grad(lambda x: energy_dvrf(ctx, x, xs, 1, 0, t, eps), xt_, 1e-5)
        assert np.linalg.norm(fd - full) / np.linalg.norm(full) < 1e-6
        approx = grad_dvrf(ctx, xt_, xs, 1, 0, t, eps)
        assert np.isfinite(np.linalg.norm(approx - full) / np.linalg.norm(full))


def test_energy_translation_invariance():
    rng = np.random.default_rng(8)
    mu1, mu2, shift = rng.normal(0, 1, (3, 2))
    make = lambda s: CondGMMField([Mixture.gaussian(mu1 + s, 0.8), Mixture.gaussian(mu2 + s, 0.8)])  # noqa: E731
    xs, xt_, eps = rng.normal(0, 1, (3, 2))
    ctx0 = DistillContext(make(0), ShiftRule.zero(), 1.0, 1.0)
    ctx1 = DistillContext(make(shift), ShiftRule.zero(), 1.0, 1.0)
    # a joint translation by s moves the clean means by s and noisy latents by a s
    e0 = energy_dvrf(ctx0, xt_, xs, 1, 0, 0.5, eps)
    e1 = energy_dvrf(ctx1, xt_ + shift, xs + shift, 1, 0, 0.5, eps)
    assert e1 == pytest.approx(e0, rel=1e-10)


def test_gradient_cancellation_product_field():
    rng = np.random.default_rng(9)
    block2 = Mixture([0.3, 0.7], rng.normal(0, 1, (2, 3)), rng.uniform(0.3, 1, (2, 3)))
    f = CondGMMField([product(Mixture.gaussian([0.0, 0.0], 1.0), block2),
                      product(Mixture.gaussian([3.0, -2.0], 0.5), block2)])
    ctx = DistillContext(f, ShiftRule.progressive(), 6.0, 6.0)
    for _ in range(10):
        x, eps = rng.normal(0, 1, (2, 5))
        g = grad_dvrf(ctx, x, x, 1, 0, rng.uniform(0.01, 0.99), eps, k=3, n_total=10)
        assert np.max(np.abs(g[2:])) < 1e-10
        assert np.max(np.abs(g[:2])) > 1e-3


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(3)), st.integers(0, 1000))
def test_gradient_permutation_equivariance(perm, seed):
    perm = np.array(perm)
    m1, m2 = three_component(3, 11), three_component(3, 12)
    pm = lambda m: Mixture(m.weights, m.means[:, perm], m.variances[:, perm])  # noqa: E731
    f1, f2 = CondGMMField([m1, m2]), CondGMMField([pm(m1), pm(m2)])
    rng = np.random.default_rng(seed)
    xt_, xs, eps = rng.normal(0, 1, (3, 3))
    for rule in (ShiftRule.zero(), ShiftRule.linear(1.0)):
        g1 = grad_dvrf(DistillContext(f1, rule), xt_, xs, 1, 0, 0.5, eps)
        g2 = grad_dvrf(DistillContext(f2, rule), xt_[perm], xs[perm], 1, 0, 0.5, eps[perm])
        assert np.allclose(g1[perm], g2, atol=1e-10)


def test_irfds_fixed_point_on_dirac():
    x0s = np.array([0.5, 1.0])
    ctx = DistillContext(dirac_field(x0s), w_tgt=1.0)
    eps0 = np.array([0.3, -0.6])
    out = irfds_invert(ctx, x0s, 0, 20, 0.01, eps_init=eps0)
    assert np.allclose(out, eps0, atol=1e-4)


def test_irfds_descends_and_is_deterministic():
    f = CondGMMField([Mixture.gaussian([1.0, -1.0], [0.5, 1.5])])
    ctx = DistillContext(f, w_tgt=1.0)
    x0, t = np.array([0.8, 0.2]), 0.5
    eps = np.array([2.0, -2.0])
    norms = []
    for _ in range(30):
        norms.append(np.linalg.norm(grad_rfds(ctx, x0, 0, t, eps)))
        eps = irfds_invert(ctx, x0, 0, 1, 0.01, t=t, eps_init=eps)
    assert all(n1 <= n0 + 1e-15 for n0, n1 in zip(norms, norms[1:]))
    a = irfds_invert(ctx, x0, 0, 10, 0.01, seed=4)
    b = irfds_invert(ctx, x0, 0, 10, 0.01, seed=4)
    assert np.array_equal(a, b)
    with pytest.raises(ConfigError):
        irfds_invert(ctx, x0, 0, 0, 0.01)
