"""Forward DDIM inversion with caching and the guided reverse loop.

Indexing conventions (see :mod:`guidelab.schedule`): steps are 1-indexed,
``abar(0) = 1`` so the step-1 reverse update emits the clean sample. The
forward inversion runs the deterministic recursion

    x*_{t+1} = sqrt(abar_{t+1}) x0*_{t} + sqrt(1 - abar_{t+1}) eps*_t

from the source sample upward, where ``(x0*_t, eps*_t)`` are the Tweedie
estimate and model epsilon evaluated at ``x*_t``; the step-0 epsilon is the
zero vector (the epsilon/score relation carries a ``sqrt(1 - abar_0) = 0``
factor at clean data). Pairs inside the window ``(T - t_edit, T]`` are cached
for the regularization loss of the guided reverse pass.

Reverse steps follow the Denoise + Noise decomposition

    x_{t-1} = sqrt(abar_{t-1}) x_hat' + sqrt(1 - abar_{t-1} - sigma_t^2) eps
              + sigma_t z_t,

where ``x_hat'`` is the (possibly guided) denoised point and ``eps`` is the
unperturbed model output unless a caller explicitly overrides it (the
symmetric-update ablation, or cached-epsilon reconstruction).

RNG: reverse-step draws come from counter-style streams keyed by
``(seed, trajectory, t)``, so guided and unguided runs with the same seed are
noise-aligned step by step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from guidelab.guidance import GuidanceConfig, TotalLoss, agg_update
from guidelab.schedule import NoiseSchedule, sigma_t
from guidelab.score_models import LatentCodec, decode, encode, tweedie_from_eps


class CacheMissError(KeyError):
    """A guided step asked for a cache entry outside the saved window."""


@dataclass(frozen=True)
class CacheEntry:
    x0_hat: np.ndarray
    eps: np.ndarray


class TrajectoryCache:
    """Denoised estimates and epsilons saved for steps in ``(T - t_edit, T]``.

    Entries are immutable once written; reading outside the window (or
    before the entry was written) raises :class:`CacheMissError`, signalling
    a forward/reverse window mismatch.
    """

    def __init__(self, T: int, t_edit: int):
        if not 0 <= t_edit <= T:
            raise ValueError(f"t_edit must lie in [0, {T}], got {t_edit}")
        self.T = T
        self.t_edit = t_edit
        self._entries: dict[int, CacheEntry] = {}

    @property
    def window(self) -> range:
        return range(self.T - self.t_edit + 1, self.T + 1)

    def put(self, t: int, x0_hat: np.ndarray, eps: np.ndarray) -> None:
        if t not in self.window:
            raise ValueError(f"step {t} outside the cache window {self.window}")
        if t in self._entries:
            raise ValueError(f"cache entry for step {t} already written")
        x0_hat = np.array(x0_hat)
        eps = np.array(eps)
        x0_hat.setflags(write=False)
        eps.setflags(write=False)
        self._entries[t] = CacheEntry(x0_hat=x0_hat, eps=eps)

    def get(self, t: int) -> CacheEntry:
        if t not in self._entries:
            raise CacheMissError(
                f"no cached forward estimate for step {t} (window {self.window}); "
                "forward and reverse edit windows disagree"
            )
        return self._entries[t]

    def __contains__(self, t: int) -> bool:
        return t in self._entries

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(frozen=True)
class EditSchedule:
    """Two-phase guided window with an optional per-coordinate mask.

    Guidance is computed for all ``t > T - t_edit2``; in the tail phase
    ``T - t_edit1 >= t > T - t_edit2`` the guided denoised point is blended
    with the plain one as ``(1 - mask) * guided + mask * plain``. Without a
    mask the blend is a no-op, and ``t_edit1 == t_edit2`` gives the single
    threshold behaviour.
    """

    t_edit1: int
    t_edit2: int
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= self.t_edit1 <= self.t_edit2:
            raise ValueError("need 0 <= t_edit1 <= t_edit2")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=float)
            if np.any(m < 0.0) or np.any(m > 1.0):
                raise ValueError("mask weights must lie in [0, 1]")
            object.__setattr__(self, "mask", m)

    @classmethod
    def uniform(cls, t_edit: int) -> "EditSchedule":
        return cls(t_edit1=t_edit, t_edit2=t_edit, mask=None)


@dataclass(frozen=True)
class InversionRecord:
    """Full forward-inversion trajectory: states, denoised estimates, epsilons.

    Row ``t`` of each array corresponds to step t, t = 0..T.
    """

    x: np.ndarray
    x0_hat: np.ndarray
    eps: np.ndarray


def step_noise(seed: int, trajectory: int, t: int, d: int, tag: int = 0) -> np.ndarray:
    """Deterministic per-step Gaussian draw from a (seed, trajectory, t) key."""
    ss = np.random.SeedSequence([int(seed), int(trajectory), int(t), int(tag)])
    return np.random.default_rng(ss).standard_normal(d)


def invert_record(
    eps_model,
    schedule: NoiseSchedule,
    x_src: np.ndarray,
    eta: float = 0.0,
    seed: int = 0,
    trajectory: int = 0,
) -> InversionRecord:
    """Run the forward DDIM recursion from clean data to step T.

    ``eta = 0`` (the default) is the deterministic recursion; a positive eta
    adds the stochastic term ``sigma_t z_t`` of the noisy variant and shrinks
    the direction coefficient accordingly.
    """
    x_src = np.asarray(x_src, dtype=float)
    if not np.all(np.isfinite(x_src)):
        raise ValueError("non-finite source point")
    T, d = schedule.T, x_src.shape[-1]
    x = np.empty((T + 1, d))
    x0_hat = np.empty((T + 1, d))
    eps = np.empty((T + 1, d))
    x[0] = x_src
    x0_hat[0] = x_src
    eps[0] = 0.0
    for t in range(0, T):
        if t > 0:
            eps[t] = eps_model.eps(x[t], t)
            x0_hat[t] = tweedie_from_eps(schedule, x[t], eps[t], t)
        if t == 0 or eta == 0.0:
            sig = 0.0
        else:
            ab_prev, ab_here = schedule.abar(t - 1), schedule.abar(t)
            sig = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_here)) * math.sqrt(1.0 - ab_here / ab_prev)
        ab_next = schedule.abar(t + 1)
        coef2 = 1.0 - ab_next - sig**2
        if coef2 < 0.0:
            raise RuntimeError(f"negative direction coefficient at forward step {t}")
        x[t + 1] = math.sqrt(ab_next) * x0_hat[t] + math.sqrt(coef2) * eps[t]
        if sig > 0.0:
            x[t + 1] = x[t + 1] + sig * step_noise(seed, trajectory, t, d, tag=1)
        if not np.all(np.isfinite(x[t + 1])):
            raise RuntimeError(f"non-finite state at forward step {t + 1}")
    eps[T] = eps_model.eps(x[T], T)
    x0_hat[T] = tweedie_from_eps(schedule, x[T], eps[T], T)
    return InversionRecord(x=x, x0_hat=x0_hat, eps=eps)


def ddim_forward_invert(
    eps_model,
    schedule: NoiseSchedule,
    x_src: np.ndarray,
    t_edit: int,
    eta: float = 0.0,
    seed: int = 0,
    trajectory: int = 0,
) -> tuple[np.ndarray, TrajectoryCache]:
    """Invert a source sample to step T, caching the window ``(T - t_edit, T]``."""
    record = invert_record(eps_model, schedule, x_src, eta=eta, seed=seed, trajectory=trajectory)
    cache = TrajectoryCache(schedule.T, t_edit)
    for t in cache.window:
        cache.put(t, record.x0_hat[t], record.eps[t])
    return record.x[schedule.T], cache


def reverse_step(
    eps_model,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    x_hat_prime: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    eps: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse update from step t to t-1.

    ``x_hat_prime`` replaces the plain denoised estimate in the Denoise term;
    ``eps`` overrides the model epsilon (used by the symmetric ablation and
    by cached-epsilon reconstruction). ``noise`` must be supplied whenever
    the schedule's sigma_t is positive.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step index {t} outside [1, {schedule.T}]")
    x_t = np.asarray(x_t, dtype=float)
    eps_used = eps_model.eps(x_t, t) if eps is None else np.asarray(eps, dtype=float)
    x_hat = (
        tweedie_from_eps(schedule, x_t, eps_used, t)
        if x_hat_prime is None
        else np.asarray(x_hat_prime, dtype=float)
    )
    sig = sigma_t(schedule, t)
    ab_prev = schedule.abar(t - 1)
    coef2 = 1.0 - ab_prev - sig**2
    if coef2 < 0.0:
        if coef2 < -1e-12:
            raise RuntimeError(
                f"sigma_t^2 exceeds 1 - abar_(t-1) at step {t}: schedule is inconsistent"
            )
        coef2 = 0.0
    out = math.sqrt(ab_prev) * x_hat + math.sqrt(coef2) * eps_used
    if sig > 0.0:
        if noise is None:
            raise ValueError(f"sigma_t > 0 at step {t} but no noise draw was supplied")
        out = out + sig * np.asarray(noise, dtype=float)
    return out


def make_resample_hooks(eps_model, schedule: NoiseSchedule, t: int, x_t: np.ndarray):
    """Reverse/forward DDIM round trip for periodic re-projection during long
    inner optimizations.

    The downward hook performs one deterministic reverse step consuming the
    candidate as the denoised point and the unperturbed epsilon at the current
    noisy sample; the upward hook re-denoises at step t-1 (identity at t = 1).
    """
    eps_anchor = eps_model.eps(np.asarray(x_t, dtype=float), t)
    ab_prev = schedule.abar(t - 1)

    def down(candidate: np.ndarray) -> np.ndarray:
        return math.sqrt(ab_prev) * candidate + math.sqrt(1.0 - ab_prev) * eps_anchor

    def up(y: np.ndarray) -> np.ndarray:
        if t == 1:
            return y
        return tweedie_from_eps(schedule, y, eps_model.eps(y, t - 1), t - 1)

    return down, up


def _sha1(a: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(a).tobytes()).hexdigest()


def translate(
    eps_model,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    edit: EditSchedule | None,
    style_loss,
    x_src: np.ndarray,
    seed: int,
    reverse_eps_model=None,
    trajectory: int = 0,
    use_cached_eps: bool = False,
    stochastic_forward: bool = False,
    trace: list | None = None,
) -> np.ndarray:
    """Invert the source, then run the guided reverse loop back to clean data.

    Guidance (per ``cfg.strategy``) applies while ``t > T - t_edit2`` with the
    total loss ``lambda_sty * style + lambda_reg * l1(x0_hat, cache[t])``;
    later steps are plain reverse updates. ``reverse_eps_model`` lets the
    reverse pass run under a different epsilon model than the inversion (the
    conditioning-swap of latent-mode translation). ``use_cached_eps`` replays
    the reverse pass on the forward trajectory's own epsilons (requires
    ``strategy == "none"`` and ``eta == 0``), which reconstructs the source
    to machine precision.
    """
    x_src = np.asarray(x_src, dtype=float)
    T, d = schedule.T, x_src.shape[-1]
    if edit is None:
        edit = EditSchedule.uniform(cfg.t_edit)
    window = edit.t_edit2
    if window > T:
        raise ValueError(f"edit window {window} exceeds T={T}")
    mask = edit.mask
    if mask is not None and mask.shape != (d,):
        raise ValueError(f"mask dimension {mask.shape} does not match data dimension ({d},)")
    fwd_model = eps_model
    rev_model = reverse_eps_model if reverse_eps_model is not None else eps_model

    if use_cached_eps:
        if cfg.strategy != "none" or schedule.eta != 0.0:
            raise ValueError("cached-epsilon reconstruction requires strategy='none' and eta=0")
        record = invert_record(fwd_model, schedule, x_src)
        x = record.x[T]
        for t in range(T, 0, -1):
            x = reverse_step(rev_model, schedule, x, t, eps=record.eps[t - 1])
        return x

    fwd_eta = schedule.eta if stochastic_forward else 0.0
    x, cache = ddim_forward_invert(
        fwd_model, schedule, x_src, window, eta=fwd_eta, seed=seed, trajectory=trajectory
    )

    guided_strategy = cfg.strategy != "none" and window > 0
    for t in range(T, 0, -1):
        sig = sigma_t(schedule, t)
        z = step_noise(seed, trajectory, t, d) if sig > 0.0 else None
        guided = guided_strategy and t > T - window
        if guided:
            entry = cache.get(t)
            loss = TotalLoss(style_loss, entry.x0_hat, cfg.lambda_sty, cfg.lambda_reg)
            hooks = (
                make_resample_hooks(rev_model, schedule, t, x)
                if cfg.resample_period is not None
                else None
            )
            upd = agg_update(rev_model, schedule, loss, x, t, cfg, resample_hooks=hooks)
            x_hat = upd.x_hat_prime
            if mask is not None and t <= T - edit.t_edit1:
                x_hat = (1.0 - mask) * x_hat + mask * upd.x0
            if trace is not None:
                sty, reg = loss.parts(x_hat)
                trace.append(
                    {
                        "t": t,
                        "x_norm": float(np.linalg.norm(x)),
                        "loss_sty": sty,
                        "loss_reg": reg,
                        "loss_total": cfg.lambda_sty * sty + cfg.lambda_reg * reg,
                        "guided": True,
                        "eps_sha1": _sha1(upd.eps),
                        "eps_noise_sha1": _sha1(upd.eps_noise),
                    }
                )
            x = reverse_step(rev_model, schedule, x, t, x_hat_prime=x_hat, eps=upd.eps_noise, noise=z)
        else:
            if trace is not None:
                trace.append(
                    {
                        "t": t,
                        "x_norm": float(np.linalg.norm(x)),
                        "loss_sty": float("nan"),
                        "loss_reg": float("nan"),
                        "loss_total": float("nan"),
                        "guided": False,
                        "eps_sha1": "",
                        "eps_noise_sha1": "",
                    }
                )
            x = reverse_step(rev_model, schedule, x, t, noise=z)
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"non-finite state at reverse step {t}")
    return x


def translate_latent(
    codec: LatentCodec,
    eps_model,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    edit: EditSchedule | None,
    style_loss,
    x_src: np.ndarray,
    seed: int,
    reverse_eps_model=None,
    trajectory: int = 0,
    use_cached_eps: bool = False,
    stochastic_forward: bool = False,
    trace: list | None = None,
) -> np.ndarray:
    """Encode, translate in latent space, decode.

    The epsilon models act on the latent dimension; domain change is driven
    by passing a target-conditioned ``reverse_eps_model`` (and typically
    ``lambda_sty = 0``, regularization only).
    """
    if eps_model.d != codec.m:
        raise ValueError(f"latent model dimension {eps_model.d} != codec latent dimension {codec.m}")
    z_src = encode(codec, x_src)
    z_out = translate(
        eps_model,
        schedule,
        cfg,
        edit,
        style_loss,
        z_src,
        seed,
        reverse_eps_model=reverse_eps_model,
        trajectory=trajectory,
        use_cached_eps=use_cached_eps,
        stochastic_forward=stochastic_forward,
        trace=trace,
    )
    return decode(codec, z_out)


def ddpm_sample(eps_model, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Ancestral sample from pure noise with per-step variance beta_t.

    Deterministic in the seed; the final step adds no noise.
    """
    return ddpm_sample_batch(eps_model, schedule, 1, seed)[0]


def ddpm_sample_batch(eps_model, schedule: NoiseSchedule, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, eps_model.d))
    for t in range(schedule.T, 0, -1):
        alpha = schedule.alpha[t - 1]
        beta = schedule.beta[t - 1]
        ab = schedule.abar(t)
        eps = eps_model.eps(x, t)
        x = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            x = x + math.sqrt(beta) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"non-finite state at sampling step {t}")
    return x
