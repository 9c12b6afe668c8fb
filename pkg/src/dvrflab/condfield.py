"""Closed-form velocity fields of prompt-conditioned Gaussian mixtures.

Each prompt owns a diagonal Gaussian mixture over clean latents ``x0``.  Under
the path ``x_t = a x0 + b eps`` with ``eps ~ N(0, I)`` the posterior of ``x0``
given ``x_t`` is again a mixture, so the flow-matching optimal velocity

    v(x, t, p) = a_dot E[x0 | x_t = x] + b_dot E[eps | x_t = x]

is available exactly.  The null prompt ``NULL`` is the equal-weight union of
all conditional mixtures, which makes classifier-free guidance well defined.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError, ShapeError, UnreliableEstimateError
from .schedules import T_MAX, T_MIN, Schedule, eval_schedule

NULL = -1
VAR_MIN = 1e-6
_T_TOL = 1e-12


@dataclass(frozen=True)
class Mixture:
    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, d)
    variances: np.ndarray  # (K, d)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if var.shape[0] == 1 and mu.shape[0] > 1:
            var = np.repeat(var, mu.shape[0], axis=0)
        if w.shape[0] != mu.shape[0] or mu.shape != var.shape:
            raise ShapeError(f"inconsistent mixture shapes {w.shape}, {mu.shape}, {var.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if np.any(var < VAR_MIN):
            raise ConfigError(f"component variances must be >= {VAR_MIN}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ConfigError("mixture parameters must be finite")
        w = w / w.sum()
        for arr in (w, mu, var):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @classmethod
    def gaussian(cls, mean, variance=1.0) -> "Mixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.broadcast_to(np.asarray(variance, dtype=float), mean.shape)
        return cls(np.ones(1), mean[None], var[None])

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * z

    def to_dict(self) -> dict:
        return {"components": [[float(w), m.tolist(), v.tolist()]
                               for w, m, v in zip(self.weights, self.means, self.variances)]}


def union(mixtures: Sequence[Mixture]) -> Mixture:
    """Equal-weight union of mixtures."""
    n = len(mixtures)
    return Mixture(np.concatenate([m.weights / n for m in mixtures]),
                   np.concatenate([m.means for m in mixtures]),
                   np.concatenate([m.variances for m in mixtures]))


def product(first: Mixture, second: Mixture) -> Mixture:
    """Mixture over concatenated coordinates with independent blocks."""
    w = np.outer(first.weights, second.weights).ravel()
    k1, k2 = first.n_components, second.n_components
    mu = np.concatenate([np.repeat(first.means, k2, axis=0), np.tile(second.means, (k1, 1))], axis=1)
    var = np.concatenate([np.repeat(first.variances, k2, axis=0),
                          np.tile(second.variances, (k1, 1))], axis=1)
    return Mixture(w, mu, var)


class Posterior(NamedTuple):
    x0: np.ndarray
    resp: np.ndarray
    logp: np.ndarray


class CondGMMField:
    """Prompt-conditioned mixture prior with exact marginal velocities.

    Prompts are integer ids ``0 .. n_prompts - 1``; ``NULL`` selects the union.
    Inputs ``x`` may be a single latent ``(d,)`` or a batch ``(n, d)``.
    """

    def __init__(self, mixtures: Sequence[Mixture], schedule: Schedule | None = None):
        if not mixtures:
            raise ConfigError("at least one prompt mixture is required")
        dims = {m.dim for m in mixtures}
        if len(dims) != 1:
            raise ShapeError(f"prompt mixtures disagree on dimension: {sorted(dims)}")
        self.mixtures = tuple(mixtures)
        self.null_mixture = union(self.mixtures)
        self.schedule = schedule if schedule is not None else Schedule.rectified_flow()
        self.dim = dims.pop()

    @classmethod
    def from_config(cls, spec: dict) -> "CondGMMField":
        try:
            prompts = spec["prompts"]
            mixtures = []
            for i, prompt in enumerate(prompts):
                comps = prompt["components"]
                w = [c[0] for c in comps]
                mixtures.append(Mixture(w, [c[1] for c in comps], [c[2] for c in comps]))
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"malformed field spec: {exc!r}") from exc
        kind = spec.get("schedule", "rectified_flow")
        try:
            schedule = Schedule(kind)
        except ValueError as exc:
            raise ConfigError(f"field.schedule: unknown schedule {kind!r}") from exc
        return cls(mixtures, schedule)

    def to_dict(self) -> dict:
        return {"schedule": self.schedule.kind.value,
                "prompts": [m.to_dict() for m in self.mixtures]}

    def with_schedule(self, schedule: Schedule) -> "CondGMMField":
        return CondGMMField(self.mixtures, schedule)

    @property
    def n_prompts(self) -> int:
        return len(self.mixtures)

    def mixture(self, p: int) -> Mixture:
        if p == NULL:
            return self.null_mixture
        if not (0 <= p < self.n_prompts):
            raise ConfigError(f"prompt {p} not registered (have {self.n_prompts})")
        return self.mixtures[p]

    def coefficients(self, t: float) -> tuple[float, float, float, float]:
        if not (T_MIN - _T_TOL <= t <= T_MAX + _T_TOL):
            raise DomainError(f"t={t!r} outside [{T_MIN}, {T_MAX}]")
        return eval_schedule(self.schedule, t)

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.dim:
            raise ShapeError(f"expected latent(s) of dimension {self.dim}, got shape {x.shape}")
        return xb, single

    def posterior(self, x, t: float, p: int) -> Posterior:
        a, b, _, _ = self.coefficients(t)
        m = self.mixture(p)
        xb, single = self._batch(x)
        mean, resp, logp = kernels.gmm_posterior(xb, a, b, m.log_weights, m.means, m.variances)
        if single:
            return Posterior(mean[0], resp[0], logp[0])
        return Posterior(mean, resp, logp)

    def posterior_x0(self, x, t: float, p: int) -> np.ndarray:
        return self.posterior(x, t, p).x0

    def posterior_eps(self, x, t: float, p: int) -> np.ndarray:
        a, b, _, _ = self.coefficients(t)
        if b == 0:
            raise DomainError("b(t) = 0: noise posterior undefined")
        return (np.asarray(x, dtype=float) - a * self.posterior_x0(x, t, p)) / b

    def velocity(self, x, t: float, p: int) -> np.ndarray:
        a, b, a_dot, b_dot = self.coefficients(t)
        x = np.asarray(x, dtype=float)
        x0 = self.posterior_x0(x, t, p)
        return a_dot * x0 + b_dot * (x - a * x0) / b

    def cfg_velocity(self, x, t: float, p: int, w: float = 1.0) -> np.ndarray:
        """Guided velocity ``v_null + w (v_p - v_null)``."""
        if w < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {w}")
        if w == 1.0:
            return self.velocity(x, t, p)
        if p == NULL:
            warnings.warn("guidance scale has no effect on the null prompt", stacklevel=2)
            return self.velocity(x, t, NULL)
        v_null = self.velocity(x, t, NULL)
        if w == 0.0:
            return v_null
        return v_null + w * (self.velocity(x, t, p) - v_null)

    def cfg_eps(self, x, t: float, p: int, w: float = 1.0) -> np.ndarray:
        return eps_view(self.cfg_velocity(x, t, p, w), x, t, self.schedule)

    def log_density(self, x, t: float, p: int):
        """Log density of the marginal ``p_t`` under prompt ``p``."""
        return self.posterior(x, t, p).logp

    def score(self, x, t: float, p: int) -> np.ndarray:
        """Analytic ``grad log p_t(x)`` as the responsibility-weighted component scores."""
        a, b, _, _ = self.coefficients(t)
        m = self.mixture(p)
        xb, single = self._batch(x)
        post = self.posterior(xb, t, p)
        s = a * a * m.variances + b * b
        g = -(xb[:, None, :] - a * m.means[None]) / s[None]
        out = np.einsum("nk,nkd->nd", post.resp, g)
        return out[0] if single else out

    def velocity_jacobian(self, x, t: float, p: int) -> np.ndarray:
        """Exact ``d v / d x`` at a single latent, shape ``(d, d)``."""
        a, b, a_dot, b_dot = self.coefficients(t)
        m = self.mixture(p)
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ShapeError(f"expected a single latent of dimension {self.dim}")
        post = self.posterior(x, t, p)
        s = a * a * m.variances + b * b
        g = -(x[None] - a * m.means) / s                        # (K, d)
        gain = a * m.variances / s
        comp_mean = m.means + gain * (x[None] - a * m.means)    # (K, d)
        g_bar = post.resp @ g
        jac_x0 = np.diag(post.resp @ gain) + (comp_mean * post.resp[:, None]).T @ (g - g_bar)
        return (a_dot - b_dot * a / b) * jac_x0 + (b_dot / b) * np.eye(self.dim)

    def cfg_velocity_jacobian(self, x, t: float, p: int, w: float = 1.0) -> np.ndarray:
        if w == 1.0 or p == NULL:
            return self.velocity_jacobian(x, t, p)
        j_null = self.velocity_jacobian(x, t, NULL)
        return j_null + w * (self.velocity_jacobian(x, t, p) - j_null)


def eps_view(v, x, t: float, s: Schedule) -> np.ndarray:
    """Noise prediction equivalent to velocity ``v`` at ``(x, t)``.

    ``eps = a / (b_dot a - a_dot b) * (v - (a_dot / a) x)``
    """
    a, b, a_dot, b_dot = eval_schedule(s, t)
    det = b_dot * a - a_dot * b
    if a == 0 or det == 0 or not np.isfinite(det):
        raise DomainError(f"noise/velocity conversion singular at t={t}")
    return a / det * (np.asarray(v, dtype=float) - (a_dot / a) * np.asarray(x, dtype=float))


def velocity_view(eps, x, t: float, s: Schedule) -> np.ndarray:
    """Inverse of :func:`eps_view`."""
    a, b, a_dot, b_dot = eval_schedule(s, t)
    det = b_dot * a - a_dot * b
    if a == 0 or det == 0 or not np.isfinite(det):
        raise DomainError(f"noise/velocity conversion singular at t={t}")
    return det / a * np.asarray(eps, dtype=float) + (a_dot / a) * np.asarray(x, dtype=float)


# --------------------------------------------------------------------------
# Monte-Carlo oracles

class MCEstimate(NamedTuple):
    x0: np.ndarray
    eps: np.ndarray
    velocity: np.ndarray
    ess: float


_CHUNK = 1 << 16
PROPOSALS = ("defensive", "prior")


def _mixture_logpdf(m: Mixture, x0: np.ndarray) -> np.ndarray:
    z = (x0[:, None, :] - m.means[None]) ** 2 / m.variances[None]
    lc = -0.5 * z.sum(-1) - 0.5 * np.log(2 * np.pi * m.variances).sum(-1) + m.log_weights
    top = lc.max(axis=1, keepdims=True)
    return top[:, 0] + np.log(np.exp(lc - top).sum(axis=1))


def _log_weights(m, x0, x, a, b, proposal):
    # log of (prior x likelihood / proposal); the likelihood of x_t = x given x0 is N(a x0, b^2 I)
    r = x[None] - a * x0
    loglik = -0.5 * np.sum(r * r, axis=1) / (b * b)
    if proposal == "prior":
        return loglik
    d = x.shape[0]
    log_prior = _mixture_logpdf(m, x0)
    log_lik_pdf = loglik + d * np.log(a / b) - 0.5 * d * np.log(2 * np.pi)
    log_q = np.logaddexp(log_prior, log_lik_pdf) + np.log(0.5)
    return log_prior + loglik - log_q


def _chunk_stats(f, x, t, p, seed, c, size, proposal):
    a, b, _, _ = f.coefficients(t)
    m = f.mixture(p)
    rng = np.random.default_rng([seed, c])
    x0 = m.sample(rng, size)
    if proposal == "defensive":
        # half the draws come from the likelihood viewed as a density in x0
        from_lik = rng.random(size) >= 0.5
        x0[from_lik] = x / a + (b / a) * rng.standard_normal((int(from_lik.sum()), x.shape[0]))
    return _weighted_sums(_log_weights(m, x0, x, a, b, proposal), x0)


def _weighted_sums(logw, x0):
    top = logw.max()
    w = np.exp(logw - top)
    return top, w.sum(), (w * w).sum(), w @ x0


def mc_posterior(f: CondGMMField, x, t: float, p: int, n_samples: int, seed: int = 0,
                 x0_samples=None, min_ess: float = 10.0, workers: int = 1,
                 proposal: str = "defensive") -> MCEstimate:
    """Self-normalised importance estimate of the posterior at ``x_t = x``.

    Clean samples ``x0`` are weighted by prior times the exact Gaussian
    likelihood of ``x`` given ``x0``; the implied noise is ``(x - a x0) / b``.
    With ``proposal="prior"`` the draws come from the prompt's mixture alone.
    The default ``"defensive"`` proposal is the equal mixture of the prior and
    the likelihood read as a density in ``x0``, which keeps the effective
    sample size up when ``b`` is small.  Samples are drawn in fixed-size
    chunks keyed by ``(seed, chunk index)``, so the result does not depend on
    ``workers``.  Explicit ``x0_samples`` are treated as prior draws.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if proposal not in PROPOSALS:
        raise ConfigError(f"unknown proposal {proposal!r}")
    a, b, a_dot, b_dot = f.coefficients(t)
    x = np.asarray(x, dtype=float)
    if x0_samples is not None:
        x0_samples = np.atleast_2d(np.asarray(x0_samples, dtype=float))
        stats = [_weighted_sums(_log_weights(None, x0_samples, x, a, b, "prior"), x0_samples)]
        n_samples = x0_samples.shape[0]
    else:
        sizes = [min(_CHUNK, n_samples - start) for start in range(0, n_samples, _CHUNK)]
        jobs = [(f, x, t, p, seed, c, size, proposal) for c, size in enumerate(sizes)]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                stats = list(pool.map(lambda j: _chunk_stats(*j), jobs))
        else:
            stats = [_chunk_stats(*j) for j in jobs]

    top = max(s[0] for s in stats)
    tot = sum(np.exp(s[0] - top) * s[1] for s in stats)
    tot_sq = sum(np.exp(2 * (s[0] - top)) * s[2] for s in stats)
    acc = sum(np.exp(s[0] - top) * s[3] for s in stats)
    ess = tot * tot / tot_sq
    if ess < min(min_ess, n_samples):
        raise UnreliableEstimateError(f"effective sample size {ess:.2f} below {min_ess}")
    x0_hat = acc / tot
    eps_hat = (x - a * x0_hat) / b
    return MCEstimate(x0_hat, eps_hat, a_dot * x0_hat + b_dot * eps_hat, float(ess))


def mc_velocity_oracle(f: CondGMMField, x, t: float, p: int, n_samples: int, seed: int = 0,
                       **kwargs) -> np.ndarray:
    """Brute-force estimate of ``v(x, t, p)``; see :func:`mc_posterior`."""
    return mc_posterior(f, x, t, p, n_samples, seed, **kwargs).velocity


def cfm_gap(f: CondGMMField, p: int, n_samples: int,
            perturbation: np.ndarray | Callable | None = None, seed: int = 0,
            return_stderr: bool = False, n_times: int = 32):
    """Flow-matching loss of a perturbed field minus that of the exact field.

    Both losses are evaluated on the same draws ``(t, x0, eps)``.  Times are
    stratified into ``n_times`` equal bins on ``[T_MIN, T_MAX]``.
    ``perturbation`` is a constant offset vector or a callable ``(x, t) -> offset``.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    rng = np.random.default_rng(seed)
    edges = np.linspace(T_MIN, T_MAX, n_times + 1)
    times = edges[:-1] + rng.random(n_times) * np.diff(edges)
    counts = np.full(n_times, n_samples // n_times)
    counts[: n_samples % n_times] += 1
    diffs = []
    for t, n in zip(times, counts):
        if n == 0:
            continue
        a, b, a_dot, b_dot = f.coefficients(t)
        x0 = f.mixture(p).sample(rng, n)
        eps = rng.standard_normal(x0.shape)
        xt = a * x0 + b * eps
        resid = f.velocity(xt, t, p) - (a_dot * x0 + b_dot * eps)
        if perturbation is None:
            delta = np.zeros_like(xt)
        elif callable(perturbation):
            delta = np.asarray(perturbation(xt, t), dtype=float)
        else:
            delta = np.broadcast_to(np.asarray(perturbation, dtype=float), xt.shape)
        pert = resid + delta
        diffs.append(np.sum(pert * pert, axis=1) - np.sum(resid * resid, axis=1))
    diffs = np.concatenate(diffs)
    gap = float(diffs.mean())
    if return_stderr:
        return gap, float(diffs.std(ddof=1) / np.sqrt(diffs.size))
    return gap
