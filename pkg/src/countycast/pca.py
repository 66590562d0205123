"""Principal components by cyclic Jacobi rotation and per-feature
informativeness scores."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, DataError

CONSTANT_STD = 1e-12


@dataclass(frozen=True)
class Standardized:
    Z: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    kept: tuple[int, ...]
    dropped: tuple[int, ...]


def standardize(X, scale: bool = True) -> Standardized:
    """Center (and by default scale) columns using the population std.

    Columns whose std is below 1e-12 are dropped. ``mean``/``std`` cover the
    kept columns only; with ``scale=False`` the std vector is all ones.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("standardize needs a 2-D matrix with at least 2 rows")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    kept = tuple(int(j) for j in np.flatnonzero(sd >= CONSTANT_STD))
    dropped = tuple(int(j) for j in np.flatnonzero(sd < CONSTANT_STD))
    mu, sd = mu[list(kept)], sd[list(kept)]
    if not scale:
        sd = np.ones_like(sd)
    Z = (X[:, list(kept)] - mu) / sd
    return Standardized(Z, mu, sd, kept, dropped)


def eigen_sym(S, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns eigenvalues sorted descending and the matching eigenvectors as
    columns. Each vector is signed so its largest-magnitude entry is
    positive. Sweeps stop once every off-diagonal entry is below
    ``tol * max(1, max|S|)``.
    """
    A = np.array(S, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DataError("eigen_sym needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise DataError("eigen_sym input must be finite")
    scale = max(1.0, float(np.abs(A).max()) if A.size else 1.0)
    if np.abs(A - A.T).max(initial=0.0) > 1e-9 * scale:
        raise DataError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    threshold = tol * scale
    off = np.abs(A - np.diag(np.diag(A)))
    for _ in range(max_sweeps):
        if n < 2 or off.max() < threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-3 * threshold:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        off = np.abs(A - np.diag(np.diag(A)))
    else:
        if n >= 2 and off.max() >= threshold:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    vals, V = vals[order], V[:, order]
    for j in range(n):
        k = int(np.argmax(np.abs(V[:, j])))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    return vals, V


@dataclass(frozen=True)
class PcaModel:
    feature_names: tuple[str, ...]  # every input feature, dropped ones included
    kept: tuple[int, ...]
    dropped: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray
    eigenvalues: np.ndarray
    components: np.ndarray  # (n_kept, n_kept); row j is component j
    explained_variance_ratio: np.ndarray
    informativeness: np.ndarray  # aligned with feature_names
    retain: float
    n_components: int  # components summed into informativeness

    @property
    def kept_names(self) -> tuple[str, ...]:
        return tuple(self.feature_names[j] for j in self.kept)

    def transform(self, X, n: int = 2) -> np.ndarray:
        X = np.asarray(X, dtype=float)[:, list(self.kept)]
        return ((X - self.mean) / self.std) @ self.components[:n].T

    def save(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = self.kept_names
        with (directory / "components.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["component", *names])
            for j, row in enumerate(self.components):
                w.writerow([j + 1, *(repr(float(v)) for v in row)])
        _, cum = components_for_variance(self, 1.0)
        with (directory / "variance.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["component", "eigenvalue", "ratio", "cumulative"])
            for j, (lam, u, c) in enumerate(zip(self.eigenvalues, self.explained_variance_ratio, cum)):
                w.writerow([j + 1, repr(float(lam)), repr(float(u)), repr(float(c))])
        with (directory / "informativeness.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "feature", "score"])
            for r, (name, score) in enumerate(rank_features(self), start=1):
                w.writerow([r, name, repr(float(score))])
        return directory


def informativeness(ratios: np.ndarray, components: np.ndarray, k: int) -> np.ndarray:
    """sum_j ratio_j * |component_j| over the first k components."""
    return np.abs(components[:k]).T @ ratios[:k]


def fit_pca(
    Z,
    feature_names: Sequence[str] | None = None,
    retain: float = 0.98,
    standardization: Standardized | None = None,
) -> PcaModel:
    """PCA of an already standardized matrix.

    The sample covariance uses the 1/(m-1) estimator. Informativeness sums
    over the smallest number of leading components that reach ``retain`` of
    the variance. Pass the :class:`Standardized` record to carry the centering
    stats and dropped columns into the model.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise DataError("fit_pca needs at least 2 rows")
    if not 0.0 < retain <= 1.0:
        raise DataError("retain must lie in (0, 1]")
    m, n = Z.shape
    if standardization is None:
        kept, dropped = tuple(range(n)), ()
        mean, std = np.zeros(n), np.ones(n)
        total = n
    else:
        kept, dropped = standardization.kept, standardization.dropped
        mean, std = standardization.mean, standardization.std
        total = len(kept) + len(dropped)
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(total))
    if len(names) != total:
        raise DataError("feature_names length does not match the matrix")
    if n == 0:
        raise DataError("no non-constant features to analyze")
    Zc = Z - Z.mean(axis=0)
    cov = Zc.T @ Zc / (m - 1)
    vals, vecs = eigen_sym(cov)
    comps = vecs.T
    pos = np.clip(vals, 0.0, None)
    if pos.sum() <= 0:
        raise DataError("covariance has no positive variance")
    ratios = pos / pos.sum()
    k, _ = components_for_variance(ratios, retain)
    score = np.zeros(total)
    score[list(kept)] = informativeness(ratios, comps, k)
    return PcaModel(names, kept, dropped, mean, std, vals, comps, ratios, score, retain, k)


def components_for_variance(model_or_ratios, frac: float):
    """Smallest k whose leading ratios sum to at least ``frac``, and the
    cumulative curve."""
    ratios = model_or_ratios.explained_variance_ratio if isinstance(model_or_ratios, PcaModel) else model_or_ratios
    ratios = np.asarray(ratios, dtype=float)
    if not 0.0 < frac <= 1.0:
        raise DataError("frac must lie in (0, 1]")
    cum = np.cumsum(ratios)
    hits = np.flatnonzero(cum >= frac - 1e-12)
    k = int(hits[0]) + 1 if hits.size else len(ratios)
    return k, cum


def rank_features(model: PcaModel, top_k: int | None = None) -> list[tuple[str, float]]:
    dropped = set(model.dropped)
    order = sorted(
        range(len(model.feature_names)),
        key=lambda j: (j in dropped, -model.informativeness[j], model.feature_names[j]),
    )
    ranked = [(model.feature_names[j], float(model.informativeness[j])) for j in order]
    return ranked if top_k is None else ranked[:top_k]


def panel_matrix(panel, aggregate: bool = False):
    """Rows of static + dynamic features.

    One row per (county, date) by default; ``aggregate=True`` averages the
    dynamic block over dates for one row per county.
    """
    C, T = panel.n_counties, panel.n_days
    names = tuple(panel.static_names) + tuple(panel.dynamic_names)
    if aggregate:
        X = np.concatenate([panel.static, panel.dynamic.mean(axis=1)], axis=1)
    else:
        X = np.concatenate(
            [np.repeat(panel.static[:, None, :], T, axis=1), panel.dynamic], axis=2
        ).reshape(C * T, len(names))
    return X, names


def fit_panel_pca(panel, retain: float = 0.98, aggregate: bool = False, scale: bool = True) -> PcaModel:
    X, names = panel_matrix(panel, aggregate)
    st = standardize(X, scale=scale)
    return fit_pca(st.Z, names, retain, st)
