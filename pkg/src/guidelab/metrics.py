"""Sample-set metrics: Frechet distances between fitted Gaussians and a
paired embedding-feature distance.

The squared Frechet distance between Gaussians (m_a, S_a), (m_b, S_b) is

    d^2 = ||m_a - m_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)),

computed via an eigendecomposition of the symmetrized product
``sqrt(S_a) S_b sqrt(S_a)``. Both covariances are regularized by adding
``1e-6 * trace / d`` to the diagonal before the square root. The two moment
pairs are processed in a canonical order so the distance is exactly
symmetric in its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COV_REG = 1e-6


@dataclass(frozen=True)
class SampleSet:
    """N x d points with optional integer class labels."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise ValueError("points must be an (N, d) array")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (len(pts),):
                raise ValueError("labels must have one entry per point")
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def d(self) -> int:
        return self.points.shape[1]


def fit_gaussian(points: np.ndarray, diagonal: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and covariance (ddof=1); a single point gets zero covariance."""
    pts = np.asarray(points, dtype=float)
    mu = pts.mean(axis=0)
    d = pts.shape[1]
    if len(pts) < 2:
        return mu, np.zeros((d, d))
    if diagonal:
        return mu, np.diag(pts.var(axis=0, ddof=1))
    return mu, np.cov(pts, rowvar=False).reshape(d, d)


def _psd_sqrt(S: np.ndarray, label: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((S + S.T) / 2.0)
    scale = max(abs(vals[0]), abs(vals[-1]), 1.0)
    if vals[0] < -1e-9 * scale:
        raise ValueError(f"{label} covariance is not positive semidefinite after regularization")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """Squared Frechet distance between two Gaussians given by their moments."""
    mu_a = np.asarray(mu_a, dtype=float)
    mu_b = np.asarray(mu_b, dtype=float)
    cov_a = np.asarray(cov_a, dtype=float)
    cov_b = np.asarray(cov_b, dtype=float)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError("moment shapes must match")
    # Canonical argument order makes the result bitwise symmetric.
    key_a = (mu_a.tobytes(), cov_a.tobytes())
    key_b = (mu_b.tobytes(), cov_b.tobytes())
    if key_b < key_a:
        mu_a, mu_b = mu_b, mu_a
        cov_a, cov_b = cov_b, cov_a
    d = len(mu_a)
    reg_a = cov_a + (COV_REG * np.trace(cov_a) / d) * np.eye(d)
    reg_b = cov_b + (COV_REG * np.trace(cov_b) / d) * np.eye(d)
    sa = _psd_sqrt(reg_a, "first")
    cross = _psd_sqrt(sa @ reg_b @ sa, "product")
    diff = mu_a - mu_b
    value = float(diff @ diff) + float(np.trace(reg_a) + np.trace(reg_b) - 2.0 * np.trace(cross))
    return max(value, 0.0) if value > -1e-9 else value


def _resolve_diagonal(a: SampleSet, b: SampleSet, diagonal: bool | None) -> bool:
    if diagonal is not None:
        return diagonal
    need = a.d + 1
    return a.n < need or b.n < need


def frechet_distance(a: SampleSet, b: SampleSet, diagonal: bool | None = None) -> float:
    """Squared Frechet distance between Gaussians fitted to the two sets.

    ``diagonal=None`` engages the diagonal-covariance fallback automatically
    when either set has fewer than d + 1 points.
    """
    if a.n < 2 or b.n < 2:
        raise ValueError("each set needs at least 2 points for a moment-based metric")
    if a.d != b.d:
        raise ValueError("sample sets have different dimensions")
    diag = _resolve_diagonal(a, b, diagonal)
    mu_a, cov_a = fit_gaussian(a.points, diagonal=diag)
    mu_b, cov_b = fit_gaussian(b.points, diagonal=diag)
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)


def classwise_frechet(a: SampleSet, b: SampleSet, diagonal: bool | None = None) -> float:
    """Unweighted mean of per-class Frechet distances over a shared vocabulary."""
    if a.labels is None or b.labels is None:
        raise ValueError("both sample sets must be labeled")
    classes_a = set(np.unique(a.labels).tolist())
    classes_b = set(np.unique(b.labels).tolist())
    if classes_a != classes_b:
        raise ValueError(f"label vocabularies differ: {sorted(classes_a)} vs {sorted(classes_b)}")
    values = []
    for c in sorted(classes_a):
        pa = a.points[a.labels == c]
        pb = b.points[b.labels == c]
        if len(pa) < 2 or len(pb) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        values.append(
            frechet_distance(SampleSet(pa), SampleSet(pb), diagonal=diagonal)
        )
    return float(np.mean(values))


def structure_distance(emb, x_src: np.ndarray, x_out: np.ndarray, raw: bool = False) -> float:
    """Mean over index-paired samples of the embedding-feature L2 distance.

    ``raw=True`` uses plain data-space L2 instead of the embedder features.
    """
    x_src = np.asarray(x_src, dtype=float)
    x_out = np.asarray(x_out, dtype=float)
    if x_src.shape != x_out.shape:
        raise ValueError("paired sets must have identical shapes")
    if x_src.ndim == 1:
        x_src = x_src[None, :]
        x_out = x_out[None, :]
    if raw:
        return float(np.mean(np.linalg.norm(x_src - x_out, axis=1)))
    e_src = emb.embed(x_src)
    e_out = emb.embed(x_out)
    return float(np.mean(np.linalg.norm(e_src - e_out, axis=1)))
