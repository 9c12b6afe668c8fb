"""Pure numpy implementation of the mixture posterior kernel.

Used when the compiled extension is unavailable or ``DVRFLAB_PURE=1``.
"""
import numpy as np

_LOG_2PI = np.log(2.0 * np.pi)


def gmm_posterior(x, a, b, log_w, mu, var):
    """Posterior of a diagonal Gaussian mixture seen through ``x_t = a x0 + b eps``.

    Parameters
    ----------
    x : (n, d) array
        Noisy points.
    a, b : float
        Schedule coefficients at the evaluation time.
    log_w : (K,) array
        Log mixture weights.
    mu, var : (K, d) arrays
        Component means and diagonal variances of ``x0``.

    Returns
    -------
    mean : (n, d) array
        ``E[x0 | x_t = x]``.
    resp : (n, K) array
        Component responsibilities.
    logp : (n,) array
        Log marginal density of ``x_t`` at ``x``.
    """
    s = a * a * var + b * b                       # (K, d)
    diff = x[:, None, :] - a * mu[None, :, :]     # (n, K, d)
    quad = np.sum(diff * diff / s[None], axis=2)  # (n, K)
    logdet = np.sum(np.log(s), axis=1)            # (K,)
    d = x.shape[1]
    logits = log_w[None, :] - 0.5 * (quad + logdet[None, :] + d * _LOG_2PI)
    top = np.max(logits, axis=1, keepdims=True)
    z = np.exp(logits - top)
    tot = np.sum(z, axis=1, keepdims=True)
    resp = z / tot
    logp = (top + np.log(tot))[:, 0]
    gain = a * var / s                            # (K, d)
    comp_mean = mu[None] + gain[None] * diff      # (n, K, d)
    mean = np.einsum("nk,nkd->nd", resp, comp_mean)
    return mean, resp, logp
