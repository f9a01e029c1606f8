"""Small trainable epsilon-prediction network with explicit gradients.

The network is a plain dense MLP with softplus activations between layers
and a linear output layer. Time conditioning enters as fixed sinusoidal
features of ``t / T`` appended to the input, so the input width is
``d + time_features``. Forward evaluation, the input-gradient (reverse-mode
vector-Jacobian product) and the weight gradients used for training are all
written out by hand; the smooth activation keeps finite-difference checks of
both gradient paths well-posed.

Weight snapshots serialize to an ``.npz`` archive holding the header fields
``widths``, ``d``, ``time_features``, ``T``, ``seed`` and ``activation``
plus one ``W{i}`` / ``b{i}`` array pair per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from guidelab.guidance import Adam
from guidelab.schedule import NoiseSchedule


def _softplus(h: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, h)


def time_features(t: int, T: int, width: int) -> np.ndarray:
    """Sinusoidal features of t / T at geometric frequencies 1, 2, 4, ...

    ``width`` must be even; each frequency contributes a (sin, cos) pair.
    """
    if width % 2 != 0 or width <= 0:
        raise ValueError("time-feature width must be a positive even number")
    tau = t / T
    freqs = 2.0 ** np.arange(width // 2)
    ang = 2.0 * np.pi * freqs * tau
    feats = np.empty(width)
    feats[0::2] = np.sin(ang)
    feats[1::2] = np.cos(ang)
    return feats


@dataclass(frozen=True)
class EpsNet:
    """Dense epsilon predictor; ``widths = [d + time_features, hidden..., d]``."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    d: int
    time_feature_width: int
    T: int
    seed: int
    activation: str = "softplus"

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1], *(w.shape[0] for w in self.weights)]

    def validate(self) -> None:
        if self.activation != "softplus":
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights[0].shape[1] != self.d + self.time_feature_width:
            raise ValueError("first layer width must equal d + time-feature width")
        if self.weights[-1].shape[0] != self.d:
            raise ValueError("output dimension must equal the data dimension d")
        for w, b in zip(self.weights, self.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite weights")


def new_epsnet(
    d: int,
    hidden: tuple[int, ...] = (64, 64),
    time_feature_width: int = 8,
    T: int = 60,
    seed: int = 0,
) -> EpsNet:
    """Fan-in scaled uniform init with a fixed seed; biases start at zero."""
    widths = [d + time_feature_width, *hidden, d]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    net = EpsNet(
        weights=tuple(weights),
        biases=tuple(biases),
        d=d,
        time_feature_width=time_feature_width,
        T=T,
        seed=seed,
    )
    net.validate()
    return net


def _forward_batch(net: EpsNet, u: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass on pre-assembled inputs u (B, d + tf); returns (out, pre-activations)."""
    pre = []
    a = u
    n_layers = len(net.weights)
    for i in range(n_layers - 1):
        h = a @ net.weights[i].T + net.biases[i]
        pre.append(h)
        a = _softplus(h)
    out = a @ net.weights[-1].T + net.biases[-1]
    return out, pre


def _inputs(net: EpsNet, x: np.ndarray, t) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if pts.shape[1] != net.d:
        raise ValueError(f"expected dimension {net.d}, got {pts.shape[1]}")
    if np.isscalar(t):
        tf = np.broadcast_to(time_features(t, net.T, net.time_feature_width), (len(pts), net.time_feature_width))
    else:
        tf = np.stack([time_features(ti, net.T, net.time_feature_width) for ti in t])
    return np.concatenate([pts, tf], axis=1), single


def eps_forward(net: EpsNet, x: np.ndarray, t: int, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Deterministic forward pass; accepts (d,) or (N, d) inputs."""
    net.validate()
    if schedule is not None and schedule.T != net.T:
        raise ValueError(f"schedule has T={schedule.T} but net was built for T={net.T}")
    if not np.all(np.isfinite(np.asarray(x, dtype=float))):
        raise ValueError("non-finite input")
    u, single = _inputs(net, x, t)
    out, _ = _forward_batch(net, u)
    return out[0] if single else out


def eps_vjp(net: EpsNet, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
    """Reverse-mode input gradient ``v^T (d eps / d x)`` at a single point."""
    net.validate()
    u, _ = _inputs(net, np.asarray(x, dtype=float), t)
    _, pre = _forward_batch(net, u)
    g = np.asarray(v, dtype=float) @ net.weights[-1]
    for i in range(len(net.weights) - 2, -1, -1):
        g = (expit(pre[i][0]) * g) @ net.weights[i]
    return g[: net.d]


def _dsm_gradients(net: EpsNet, u: np.ndarray, target: np.ndarray):
    """Mean-squared epsilon-matching loss and weight/bias gradients on one batch."""
    out, pre = _forward_batch(net, u)
    resid = out - target
    loss = float(np.mean(resid**2))
    delta = 2.0 * resid / resid.size
    acts = [u] + [_softplus(h) for h in pre]
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * expit(pre[i - 1])
    return loss, grads_w, grads_b


def _pack(arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def _unpack(flat: np.ndarray, like) -> list[np.ndarray]:
    out, k = [], 0
    for a in like:
        out.append(flat[k : k + a.size].reshape(a.shape))
        k += a.size
    return out


def train_dsm(
    net: EpsNet,
    data: np.ndarray,
    schedule: NoiseSchedule,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 128,
) -> tuple[EpsNet, np.ndarray]:
    """Train by epsilon matching on noised data; returns (new net, loss trace).

    Each step draws a batch, per-sample steps t uniform in {1..T} and fresh
    Gaussian noise, forms ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) e`` and
    minimizes the mean squared epsilon-prediction error with Adam. The run is
    fully determined by ``seed``; a non-finite loss aborts with the step
    index.
    """
    net.validate()
    if schedule.T != net.T:
        raise ValueError(f"schedule has T={schedule.T} but net was built for T={net.T}")
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != net.d:
        raise ValueError(f"data must be (N, {net.d})")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return net, np.empty(0)

    rng = np.random.default_rng(seed)
    params = [np.array(w) for w in net.weights] + [np.array(b) for b in net.biases]
    flat = _pack(params)
    opt = Adam(lr=lr)
    losses = np.empty(steps)
    n_w = len(net.weights)
    for step in range(steps):
        arrays = _unpack(flat, params)
        cur = replace(net, weights=tuple(arrays[:n_w]), biases=tuple(arrays[n_w:]))
        idx = rng.integers(0, len(data), size=batch_size)
        t = rng.integers(1, schedule.T + 1, size=batch_size)
        noise = rng.standard_normal((batch_size, net.d))
        ab = np.array([schedule.abar(int(ti)) for ti in t])[:, None]
        x_t = np.sqrt(ab) * data[idx] + np.sqrt(1.0 - ab) * noise
        u, _ = _inputs(cur, x_t, t)
        loss, gw, gb = _dsm_gradients(cur, u, noise)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")
        losses[step] = loss
        flat = opt.step(flat, _pack(gw + gb))
    arrays = _unpack(flat, params)
    trained = replace(net, weights=tuple(arrays[:n_w]), biases=tuple(arrays[n_w:]))
    trained.validate()
    return trained, losses


class NetScore:
    """An EpsNet bound to its schedule, exposing the common model surface."""

    def __init__(self, net: EpsNet, schedule: NoiseSchedule):
        if schedule.T != net.T:
            raise ValueError(f"schedule has T={schedule.T} but net was built for T={net.T}")
        self.net = net
        self.schedule = schedule
        self.d = net.d

    def eps(self, x: np.ndarray, t: int) -> np.ndarray:
        return eps_forward(self.net, x, t, self.schedule)

    def eps_vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        return eps_vjp(self.net, x, t, v)


def save_epsnet(net: EpsNet, path) -> None:
    arrays = {f"W{i}": w for i, w in enumerate(net.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(net.biases)})
    np.savez(
        path,
        widths=np.array(net.widths),
        d=net.d,
        time_feature_width=net.time_feature_width,
        T=net.T,
        seed=net.seed,
        activation=np.array(net.activation),
        n_layers=len(net.weights),
        **arrays,
    )


def load_epsnet(path) -> EpsNet:
    with np.load(path, allow_pickle=False) as z:
        n = int(z["n_layers"])
        net = EpsNet(
            weights=tuple(z[f"W{i}"] for i in range(n)),
            biases=tuple(z[f"b{i}"] for i in range(n)),
            d=int(z["d"]),
            time_feature_width=int(z["time_feature_width"]),
            T=int(z["T"]),
            seed=int(z["seed"]),
            activation=str(z["activation"]),
        )
    net.validate()
    return net
