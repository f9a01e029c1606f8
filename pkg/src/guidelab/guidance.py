"""Loss functions, the inner Adam optimizer, and the guided-update strategies.

A "loss function" throughout this module is a callable ``x -> (value, grad)``
evaluated at a denoised point. Gradients are closed-form (no autodiff), which
keeps the chain through the epsilon model's vector-Jacobian product exact and
finite-difference checkable.

Guided updates at a reverse step t share one structure: compute the model
epsilon and the loss gradient with respect to the noisy sample, perturb the
epsilon (or the denoised estimate directly), optionally refine the denoised
estimate by a few Adam steps, and hand the result back to the sampler. The
returned record carries both the raw epsilon and the epsilon intended for the
noise-direction term of the next reverse step: for every asymmetric strategy
those are the same array, and only the ``symmetric_ablation`` strategy
substitutes the perturbed epsilon there.

Sign convention: the perturbed epsilon is ``eps + s_t * grad`` so that the
denoised estimate moves in the loss-descent direction,

    x0_hat(eps + s g) = x0_hat(eps) - s * sqrt((1 - abar)/abar) * g.

``GuidanceConfig.flip_sign`` flips it for study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from guidelab.schedule import NoiseSchedule

STRATEGIES = ("none", "mcg", "eps_perturb", "dds_only", "agg", "symmetric_ablation")
S_RULES = ("sqrt_one_minus_alpha_bar", "constant")

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class GuidanceConfig:
    """Strategy selector plus every knob of the guided reverse pass."""

    strategy: str = "agg"
    lambda_sty: float = 200.0
    lambda_reg: float = 200.0
    s_rule: str = "sqrt_one_minus_alpha_bar"
    s_const: float = 1.0
    t_edit: int = 20
    dds_steps: int = 2
    dds_lr: float = 0.02
    resample_period: int | None = None
    lambda_i: float = 0.3
    lambda_s: float = 0.3
    lambda_mse: float = 0.1
    mcg_scale: float = 1.0
    flip_sign: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.s_rule not in S_RULES:
            raise ValueError(f"unknown s_rule {self.s_rule!r}; expected one of {S_RULES}")
        if self.t_edit < 0:
            raise ValueError("t_edit must be >= 0")
        if self.dds_steps < 0:
            raise ValueError("dds_steps must be >= 0")
        for name in ("lambda_sty", "lambda_reg", "lambda_i", "lambda_s", "lambda_mse"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.resample_period is not None and self.resample_period < 1:
            raise ValueError("resample_period must be >= 1 when set")


def step_scale(cfg: GuidanceConfig, schedule: NoiseSchedule, t: int) -> float:
    """Epsilon-perturbation scale s_t for the configured rule."""
    if cfg.s_rule == "constant":
        return cfg.s_const
    return math.sqrt(1.0 - schedule.abar(t))


# ---------------------------------------------------------------------------
# Stand-in embedder and losses
# ---------------------------------------------------------------------------


class StandInEmbedder:
    """Fixed random linear featurizer with normalized output.

    ``embed(x) = F x / ||F x||`` where F has unit-norm rows drawn once from
    the seed. The embedding is undefined where the feature response is zero;
    that is reported as an error, never clamped.
    """

    def __init__(self, d: int, feature_dim: int, seed: int):
        rng = np.random.default_rng(seed)
        F = rng.standard_normal((feature_dim, d))
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        self.F = F
        self.d = d
        self.feature_dim = feature_dim
        self.seed = seed

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        f = x @ self.F.T
        norm = np.linalg.norm(f, axis=-1, keepdims=x.ndim > 1)
        if np.any(norm == 0.0):
            raise ValueError("zero feature response: embedding undefined")
        return f / norm

    def embed_vjp(self, x: np.ndarray, de: np.ndarray) -> np.ndarray:
        """Gradient of ``de . embed(x)`` with respect to x (single point)."""
        f = self.F @ np.asarray(x, dtype=float)
        n = np.linalg.norm(f)
        if n == 0.0:
            raise ValueError("zero feature response: embedding undefined")
        return self.F.T @ (de / n - f * (f @ de) / n**3)


class DirectionalStyleLoss:
    """Negative cosine similarity against a composed target feature vector.

    The target vector is ``c_trg + lambda_i * embed(x_src) - lambda_s * c_src``
    (fixed at construction); the candidate vector is the embedding of the
    candidate point averaged over ``n_aug`` seeded Gaussian jitters of scale
    ``jitter_scale * ||x||`` (``n_aug = 0`` disables augmentation). The jitter
    directions are fixed, so the loss is a deterministic smooth function of x
    and its gradient below accounts for the ||x||-dependent jitter magnitude.
    """

    def __init__(
        self,
        emb: StandInEmbedder,
        x_src: np.ndarray,
        c_src: np.ndarray,
        c_trg: np.ndarray,
        lambda_i: float,
        lambda_s: float,
        n_aug: int = 8,
        jitter_scale: float = 0.01,
        aug_seed: int = 0,
    ):
        self.emb = emb
        v_trg = np.asarray(c_trg, dtype=float) + lambda_i * emb.embed(x_src) - lambda_s * np.asarray(c_src, dtype=float)
        n = np.linalg.norm(v_trg)
        if n == 0.0:
            raise ValueError("composed target vector has zero norm: loss undefined")
        self.target_dir = v_trg / n
        self.n_aug = n_aug
        self.jitter_scale = jitter_scale
        self.jitters = (
            np.random.default_rng(aug_seed).standard_normal((n_aug, emb.d)) if n_aug > 0 else None
        )

    def _candidate_points(self, x: np.ndarray) -> np.ndarray:
        if self.n_aug == 0:
            return x[None, :]
        return x[None, :] + self.jitter_scale * np.linalg.norm(x) * self.jitters

    def value(self, x: np.ndarray) -> float:
        return self.value_and_grad(x)[0]

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        pts = self._candidate_points(x)
        embs = np.stack([self.emb.embed(p) for p in pts])
        v = embs.mean(axis=0)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            raise ValueError("averaged candidate embedding has zero norm: loss undefined")
        value = -float(self.target_dir @ v) / nv
        # d(-cos)/dv, then chain through each jittered embedding and the
        # jitter magnitude's dependence on ||x||.
        dv = -(self.target_dir / nv - v * (self.target_dir @ v) / nv**3)
        grad = np.zeros_like(x)
        xn = np.linalg.norm(x)
        for i, p in enumerate(pts):
            w = self.emb.embed_vjp(p, dv / len(pts))
            grad += w
            if self.n_aug > 0 and xn > 0.0:
                grad += self.jitter_scale * (self.jitters[i] @ w) * (x / xn)
        return value, grad

    __call__ = value_and_grad


class FeatureMatchStyleLoss:
    """Squared embedding mismatch plus an optional squared data-space anchor.

    ``loss(x) = ||embed(x_trg) - embed(x)||^2 + lambda_mse * ||x_trg - x||^2``
    """

    def __init__(self, emb: StandInEmbedder, x_trg: np.ndarray, lambda_mse: float):
        self.emb = emb
        self.x_trg = np.asarray(x_trg, dtype=float)
        self.e_trg = emb.embed(self.x_trg)
        self.lambda_mse = lambda_mse

    def value(self, x: np.ndarray) -> float:
        return self.value_and_grad(x)[0]

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        e = self.emb.embed(x)
        diff = self.e_trg - e
        resid = self.x_trg - x
        value = float(diff @ diff) + self.lambda_mse * float(resid @ resid)
        grad = -2.0 * self.emb.embed_vjp(x, diff) - 2.0 * self.lambda_mse * resid
        return value, grad

    __call__ = value_and_grad


def style_loss_directional(
    emb: StandInEmbedder,
    x: np.ndarray,
    x_src: np.ndarray,
    c_src: np.ndarray,
    c_trg: np.ndarray,
    lambda_i: float,
    lambda_s: float,
    n_aug: int = 8,
    jitter_scale: float = 0.01,
    aug_seed: int = 0,
) -> float:
    loss = DirectionalStyleLoss(emb, x_src, c_src, c_trg, lambda_i, lambda_s, n_aug, jitter_scale, aug_seed)
    return loss.value(x)


def style_loss_feature_match(emb: StandInEmbedder, x: np.ndarray, x_trg: np.ndarray, lambda_mse: float) -> float:
    return FeatureMatchStyleLoss(emb, x_trg, lambda_mse).value(x)


def reg_loss(x_hat: np.ndarray, x_hat_star: np.ndarray) -> float:
    """Mean absolute difference between current and cached denoised estimates."""
    x_hat = np.asarray(x_hat, dtype=float)
    x_hat_star = np.asarray(x_hat_star, dtype=float)
    if x_hat.shape != x_hat_star.shape:
        raise ValueError("shape mismatch between denoised estimate and cached target")
    return float(np.mean(np.abs(x_hat - x_hat_star)))


def reg_loss_grad(x_hat: np.ndarray, x_hat_star: np.ndarray) -> np.ndarray:
    return np.sign(x_hat - x_hat_star) / x_hat.size


def total_loss(cfg: GuidanceConfig, style_term: float, reg_term: float) -> float:
    """Weighted sum ``lambda_sty * style + lambda_reg * reg``."""
    return cfg.lambda_sty * style_term + cfg.lambda_reg * reg_term


class TotalLoss:
    """Weighted style-plus-regularization loss bound to one reverse step.

    ``style`` is any object with ``value_and_grad`` (or None for a pure
    regularization run); ``reg_target`` is the cached forward denoised
    estimate for the same step (or None).
    """

    def __init__(self, style, reg_target: np.ndarray | None, lambda_sty: float, lambda_reg: float):
        self.style = style
        self.reg_target = None if reg_target is None else np.asarray(reg_target, dtype=float)
        self.lambda_sty = lambda_sty
        self.lambda_reg = lambda_reg

    def parts(self, x: np.ndarray) -> tuple[float, float]:
        sty = self.style.value(x) if self.style is not None else 0.0
        reg = reg_loss(x, self.reg_target) if self.reg_target is not None else 0.0
        return sty, reg

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        value = 0.0
        grad = np.zeros_like(x)
        if self.style is not None and self.lambda_sty != 0.0:
            sv, sg = self.style.value_and_grad(x)
            value += self.lambda_sty * sv
            grad += self.lambda_sty * sg
        if self.reg_target is not None and self.lambda_reg != 0.0:
            value += self.lambda_reg * reg_loss(x, self.reg_target)
            grad += self.lambda_reg * reg_loss_grad(x, self.reg_target)
        return value, grad

    __call__ = value_and_grad


# ---------------------------------------------------------------------------
# Gradient chain and epsilon perturbation
# ---------------------------------------------------------------------------


def loss_grad_wrt_xt(eps_model, schedule: NoiseSchedule, loss_fn: LossFn, x_t: np.ndarray, t: int) -> np.ndarray:
    """Gradient of ``loss(x0_hat(x_t))`` with respect to the noisy sample.

    Chain rule through the denoiser: with g0 the loss gradient at the
    denoised point, the Jacobian of Tweedie's formula gives

        grad = (g0 - sqrt(1 - abar_t) * vjp(x_t, t, g0)) / sqrt(abar_t).
    """
    grad, _, _, _ = _loss_grad_chain(eps_model, schedule, loss_fn, x_t, t)
    return grad


def _loss_grad_chain(eps_model, schedule, loss_fn, x_t, t):
    from guidelab.score_models import tweedie_from_eps

    eps = eps_model.eps(x_t, t)
    x0 = tweedie_from_eps(schedule, x_t, eps, t)
    value, g0 = loss_fn(x0)
    ab = schedule.abar(t)
    grad = (g0 - math.sqrt(1.0 - ab) * eps_model.eps_vjp(x_t, t, g0)) / math.sqrt(ab)
    return grad, x0, eps, value


def perturb_eps(eps: np.ndarray, grad: np.ndarray, s_t: float) -> np.ndarray:
    """Shift the epsilon by ``s_t * grad``; moves the denoised estimate by
    ``-s_t * sqrt((1 - abar)/abar) * grad``."""
    if s_t < 0:
        raise ValueError("s_t must be >= 0")
    return eps + s_t * grad


# ---------------------------------------------------------------------------
# Adam and the inner refinement
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction over a single ndarray of parameters."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_minimize(loss_fn: LossFn, x0: np.ndarray, steps: int, lr: float) -> tuple[np.ndarray, float]:
    """Run Adam for the given step count and return the best-seen iterate.

    The start point counts as an iterate, so ``steps = 0`` returns
    ``(x0, loss(x0))``. A non-finite loss aborts with the step index.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x = np.asarray(x0, dtype=float)
    value, grad = loss_fn(x)
    if not np.isfinite(value):
        raise RuntimeError("non-finite loss at step 0")
    best_x, best_value = x, value
    opt = Adam(lr=lr)
    for k in range(1, steps + 1):
        x = opt.step(x, grad)
        value, grad = loss_fn(x)
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite loss at step {k}")
        if value < best_value:
            best_x, best_value = x, value
    return best_x, best_value


def dds_refine(
    loss_fn: LossFn,
    x_bar: np.ndarray,
    cfg: GuidanceConfig,
    resample_hooks: tuple[Callable, Callable] | None = None,
) -> np.ndarray:
    """Inner optimization ``x_bar + argmin_D loss(x_bar + D)`` from D = 0.

    When ``cfg.resample_period`` is set and hooks are supplied, the current
    candidate is passed through one reverse-then-forward round trip (the two
    hooks, in order) after every ``resample_period`` inner steps and the
    optimization restarts around the re-projected point. The best-seen
    candidate across all segments is returned.
    """
    return _dds_refine(loss_fn, x_bar, cfg, resample_hooks)[0]


def _dds_refine(loss_fn, x_bar, cfg, resample_hooks=None):
    x_bar = np.asarray(x_bar, dtype=float)
    if cfg.dds_steps == 0:
        return x_bar, None
    period = cfg.resample_period if resample_hooks is not None else None

    base = x_bar
    remaining = cfg.dds_steps
    best_x, best_value = None, np.inf
    while True:
        segment = remaining if period is None else min(period, remaining)
        delta, value = adam_minimize(lambda dlt: loss_fn(base + dlt), np.zeros_like(base), segment, cfg.dds_lr)
        candidate = base + delta
        if value < best_value:
            best_x, best_value = candidate, value
        remaining -= segment
        if remaining == 0:
            return best_x, best_value
        down, up = resample_hooks
        base = up(down(candidate))


# ---------------------------------------------------------------------------
# Guided update strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GuidedUpdate:
    """Result of one guided update at a reverse step.

    ``eps_noise`` is what the sampler must feed the noise-direction term;
    asymmetric strategies keep it equal to the raw ``eps``.
    """

    x_hat_prime: np.ndarray
    x0: np.ndarray
    eps: np.ndarray
    eps_noise: np.ndarray
    loss_at_x0: float | None = None
    loss_at_result: float | None = None


def agg_update(
    eps_model,
    schedule: NoiseSchedule,
    loss_fn: LossFn,
    x_t: np.ndarray,
    t: int,
    cfg: GuidanceConfig,
    resample_hooks: tuple[Callable, Callable] | None = None,
) -> GuidedUpdate:
    """Compute the guided denoised point for the configured strategy.

    * ``none``         -- the plain denoised estimate, untouched.
    * ``mcg``          -- subtract the backpropagated loss gradient from the
                          denoised estimate.
    * ``eps_perturb``  -- shift the epsilon by ``s_t * grad`` and re-denoise.
    * ``dds_only``     -- refine the plain denoised estimate by inner Adam.
    * ``agg``          -- epsilon shift, re-denoise, then inner Adam from the
                          shifted estimate; with at least one inner step the
                          returned point never has a larger loss than the
                          plain denoised estimate (best-seen guard).
    * ``symmetric_ablation`` -- like ``agg`` but the perturbed epsilon is
                          also handed to the noise-direction term.
    """
    from guidelab.score_models import tweedie_from_eps

    x_t = np.asarray(x_t, dtype=float)
    if cfg.strategy == "none":
        eps = eps_model.eps(x_t, t)
        x0 = tweedie_from_eps(schedule, x_t, eps, t)
        return GuidedUpdate(x_hat_prime=x0, x0=x0, eps=eps, eps_noise=eps)

    grad, x0, eps, value0 = _loss_grad_chain(eps_model, schedule, loss_fn, x_t, t)
    if cfg.flip_sign:
        grad = -grad

    if cfg.strategy == "mcg":
        x_hat = x0 - cfg.mcg_scale * grad
        return GuidedUpdate(
            x_hat_prime=x_hat, x0=x0, eps=eps, eps_noise=eps,
            loss_at_x0=value0, loss_at_result=loss_fn(x_hat)[0],
        )

    if cfg.strategy == "dds_only":
        refined, value = _dds_refine(loss_fn, x0, cfg, resample_hooks)
        return GuidedUpdate(
            x_hat_prime=refined, x0=x0, eps=eps, eps_noise=eps,
            loss_at_x0=value0, loss_at_result=value0 if value is None else value,
        )

    s = step_scale(cfg, schedule, t)
    eps_tilde = perturb_eps(eps, grad, s)
    x_bar = tweedie_from_eps(schedule, x_t, eps_tilde, t)

    if cfg.strategy == "eps_perturb":
        return GuidedUpdate(
            x_hat_prime=x_bar, x0=x0, eps=eps, eps_noise=eps,
            loss_at_x0=value0, loss_at_result=loss_fn(x_bar)[0],
        )

    # agg and symmetric_ablation: inner refinement from the shifted estimate.
    refined, value = _dds_refine(loss_fn, x_bar, cfg, resample_hooks)
    if cfg.dds_steps >= 1:
        # Accept only improving updates: fall back to the plain denoised
        # estimate when neither the shift nor the refinement helped.
        if value0 <= value:
            refined, value = x0, value0
    else:
        value = loss_fn(x_bar)[0]
    eps_noise = eps_tilde if cfg.strategy == "symmetric_ablation" else eps
    return GuidedUpdate(
        x_hat_prime=refined, x0=x0, eps=eps, eps_noise=eps_noise,
        loss_at_x0=value0, loss_at_result=value,
    )
