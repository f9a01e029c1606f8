"""Analytic epsilon predictors and the linear latent codec.

For an isotropic Gaussian mixture ``p_0 = sum_k w_k N(mu_k, v_k I)`` the
forward process ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) e`` keeps the
marginal a mixture with means ``sqrt(abar_t) mu_k`` and variances
``abar_t v_k + (1 - abar_t)``, so the score, the epsilon predictor

    eps(x, t) = -sqrt(1 - abar_t) * grad log p_t(x)

and its input-Jacobian are all available in closed form. Responsibilities
are computed in the log domain to stay stable on well-separated mixtures at
small t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from guidelab.schedule import NoiseSchedule


@dataclass(frozen=True)
class GmmModel:
    """Isotropic Gaussian mixture with K components in dimension d."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    d: int = field(init=False)
    K: int = field(init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        if m.ndim != 2:
            raise ValueError("means must be a (K, d) array")
        K, d = m.shape
        if w.shape != (K,) or v.shape != (K,):
            raise ValueError("weights and variances must have one entry per component")
        if not np.all(w > 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if not np.all(v > 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "K", K)


def _diffused_moments(model: GmmModel, schedule: NoiseSchedule, t: int):
    """Component means and scalar variances of the step-t marginal (t=0 allowed)."""
    ab = schedule.abar(t)
    return np.sqrt(ab) * model.means, ab * model.variances + (1.0 - ab)


def _log_responsibilities(model: GmmModel, m: np.ndarray, s2: np.ndarray, x: np.ndarray):
    """Log posterior component weights at points x (N, d) under N(m_k, s2_k I)."""
    diff = x[:, None, :] - m[None, :, :]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logp = np.log(model.weights)[None, :] - 0.5 * (
        model.d * np.log(2.0 * np.pi * s2)[None, :] + sq / s2[None, :]
    )
    return logp - logsumexp(logp, axis=1, keepdims=True)


def gmm_responsibilities(model: GmmModel, schedule: NoiseSchedule, x: np.ndarray, t: int) -> np.ndarray:
    """Posterior component probabilities at step t (t = 0 gives clean-data ones)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    m, s2 = _diffused_moments(model, schedule, t)
    r = np.exp(_log_responsibilities(model, m, s2, pts))
    return r[0] if single else r


def gmm_eps(model: GmmModel, schedule: NoiseSchedule, x: np.ndarray, t: int) -> np.ndarray:
    """Exact epsilon prediction for the diffused mixture at step t.

    Accepts a single point of shape (d,) or a batch of shape (N, d).
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step index {t} outside [1, {schedule.T}]")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if pts.shape[-1] != model.d:
        raise ValueError(f"expected dimension {model.d}, got {pts.shape[-1]}")
    m, s2 = _diffused_moments(model, schedule, t)
    r = np.exp(_log_responsibilities(model, m, s2, pts))
    score = np.einsum("nk,nkd->nd", r / s2[None, :], m[None, :, :] - pts[:, None, :])
    eps = -np.sqrt(1.0 - schedule.abar(t)) * score
    return eps[0] if single else eps


def gmm_eps_vjp(
    model: GmmModel, schedule: NoiseSchedule, x: np.ndarray, t: int, v: np.ndarray
) -> np.ndarray:
    """Product ``v^T (d eps / d x)`` from the closed-form Hessian of log p_t.

    With per-component log-density gradients ``g_k = (m_k - x) / s2_k`` and
    responsibilities ``r_k``, the Hessian of log p_t is

        H = sum_k r_k (g_k g_k^T - I / s2_k) - gbar gbar^T,

    and ``d eps / d x = -sqrt(1 - abar_t) H`` is symmetric, so the
    vector-Jacobian product is just ``-sqrt(1 - abar_t) H v``.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step index {t} outside [1, {schedule.T}]")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise ValueError("non-finite input")
    if x.shape != (model.d,) or v.shape != (model.d,):
        raise ValueError(f"expected shape ({model.d},)")
    m, s2 = _diffused_moments(model, schedule, t)
    r = np.exp(_log_responsibilities(model, m, s2, x[None, :]))[0]
    g = (m - x[None, :]) / s2[:, None]
    gbar = r @ g
    hv = (r * (g @ v)) @ g - (r / s2).sum() * v - (gbar @ v) * gbar
    return -np.sqrt(1.0 - schedule.abar(t)) * hv


def tweedie_from_eps(schedule: NoiseSchedule, x_t: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
    """Denoised estimate ``(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)``."""
    ab = schedule.abar(t)
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def tweedie_denoise(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
) -> np.ndarray:
    """Posterior-mean estimate of the clean sample from a noisy one at step t."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step index {t} outside [1, {schedule.T}]")
    return tweedie_from_eps(schedule, x_t, eps_fn(x_t, t), t)


class GmmScore:
    """A mixture epsilon predictor bound to its schedule.

    Provides the two-method model surface (``eps`` and ``eps_vjp``) the
    sampler and guidance code expect.
    """

    def __init__(self, model: GmmModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule
        self.d = model.d

    def eps(self, x: np.ndarray, t: int) -> np.ndarray:
        return gmm_eps(self.model, self.schedule, x, t)

    def eps_vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        return gmm_eps_vjp(self.model, self.schedule, x, t, v)


class ZeroScore:
    """The trivial epsilon predictor ``eps == 0`` (useful for exactness tests)."""

    def __init__(self, d: int):
        self.d = d

    def eps(self, x: np.ndarray, t: int) -> np.ndarray:
        return np.zeros_like(np.asarray(x, dtype=float))

    def eps_vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(v, dtype=float))


def sample_gmm(model: GmmModel, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw n labeled samples from the mixture (deterministic in seed)."""
    rng = np.random.default_rng(seed)
    labels = rng.choice(model.K, size=n, p=model.weights)
    noise = rng.standard_normal((n, model.d))
    pts = model.means[labels] + np.sqrt(model.variances[labels])[:, None] * noise
    return pts, labels


@dataclass(frozen=True)
class LatentCodec:
    """Linear codec with orthonormal encode rows: decode is the transpose.

    ``decode(encode(x))`` is the orthogonal projection of x onto the row
    space of the encode map; ``encode(decode(z)) == z`` exactly.
    """

    encode_matrix: np.ndarray  # (m, d), orthonormal rows

    def __post_init__(self):
        E = np.asarray(self.encode_matrix, dtype=float)
        if E.ndim != 2 or E.shape[0] > E.shape[1]:
            raise ValueError("encode matrix must be (m, d) with m <= d")
        gram = E @ E.T
        if not np.allclose(gram, np.eye(E.shape[0]), atol=1e-10):
            raise ValueError("encode matrix rows must be orthonormal")
        object.__setattr__(self, "encode_matrix", E)

    @property
    def m(self) -> int:
        return self.encode_matrix.shape[0]

    @property
    def d(self) -> int:
        return self.encode_matrix.shape[1]

    @property
    def decode_matrix(self) -> np.ndarray:
        return self.encode_matrix.T


def random_codec(d: int, m: int, seed: int) -> LatentCodec:
    """Seeded orthonormal codec from the QR factor of a Gaussian matrix."""
    if not 1 <= m <= d:
        raise ValueError(f"need 1 <= m <= d, got m={m}, d={d}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, m)))
    return LatentCodec(encode_matrix=q.T)


def identity_codec(d: int) -> LatentCodec:
    return LatentCodec(encode_matrix=np.eye(d))


def encode(codec: LatentCodec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != codec.d:
        raise ValueError(f"expected dimension {codec.d}, got {x.shape[-1]}")
    return x @ codec.encode_matrix.T


def decode(codec: LatentCodec, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != codec.m:
        raise ValueError(f"expected dimension {codec.m}, got {z.shape[-1]}")
    return z @ codec.encode_matrix
