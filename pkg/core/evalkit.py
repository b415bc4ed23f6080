"""
Quality scores and triangle-plot data for generated samples.

Both scores compare a real and a generated matrix with rows as samples and
columns as features: the KS score averages one minus the two-sample
Kolmogorov-Smirnov distance over features, the PCA score compares the
leading eigenvalues of the two feature correlation matrices.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import EvaluationError

logger = logging.getLogger(__name__)

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
VARIANCE_EXPLAINED = 0.99
HDR_LEVELS = (0.68, 0.95)
TRIANGLE_BINS = 60


@dataclass
class ScoreReport:
    s_ks: float
    ks_per_feature: List[float]
    s_pca: float
    eigen_errors: List[float]
    retained: int
    real_eigenvalues: List[float]
    generated_eigenvalues: List[float]
    n_real: int
    n_generated: int
    features: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str) -> str:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
        return path


def _as_matrix(values, name: str) -> np.ndarray:
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if matrix.ndim != 2:
        raise EvaluationError(f"{name} must be a (samples, features) matrix")
    if not np.all(np.isfinite(matrix)):
        raise EvaluationError(f"{name} contains non-finite values")
    return matrix


def _check_pair(real, generated, min_rows: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    real = _as_matrix(real, "real")
    generated = _as_matrix(generated, "generated")
    if real.shape[1] != generated.shape[1]:
        raise EvaluationError(f"feature counts differ: {real.shape[1]} real vs {generated.shape[1]} generated")
    if len(real) < min_rows or len(generated) < min_rows:
        raise EvaluationError(f"need at least {min_rows} samples in each set")
    return real, generated


# ---------------------------------------------------------------------------
# KS score
# ---------------------------------------------------------------------------

def ks_statistic(a, b) -> float:
    """Two-sample KS distance ``sup |F_a - F_b|`` over the merged sample points"""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    points = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, points, side="right") / a.size
    cdf_b = np.searchsorted(b, points, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_score(real, generated) -> Tuple[float, List[float]]:
    """Mean over features of ``1 - D``, plus the per-feature values"""
    real, generated = _check_pair(real, generated)
    per_feature = [1.0 - ks_statistic(real[:, c], generated[:, c]) for c in range(real.shape[1])]
    return float(np.mean(per_feature)), per_feature


# ---------------------------------------------------------------------------
# PCA score
# ---------------------------------------------------------------------------

def correlation_matrix(matrix) -> np.ndarray:
    matrix = _as_matrix(matrix, "sample")
    if len(matrix) < 2:
        raise EvaluationError("need at least 2 samples for a correlation matrix")
    centered = matrix - matrix.mean(axis=0)
    std = np.sqrt(np.mean(centered ** 2, axis=0))
    if np.any(std == 0):
        columns = np.flatnonzero(std == 0).tolist()
        raise EvaluationError(f"constant columns {columns} have no correlation")
    scaled = centered / std
    corr = scaled.T @ scaled / len(matrix)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr


def jacobi_eigen(matrix, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigen-decomposition of a real symmetric matrix.

    Returns eigenvalues in descending order and the matching eigenvectors
    as columns.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise EvaluationError("eigen-decomposition needs a square matrix")
    if not np.all(np.isfinite(a)):
        raise EvaluationError("matrix has non-finite entries")
    if not np.allclose(a, a.T, atol=1e-12, rtol=0.0):
        raise EvaluationError("matrix is not symmetric")
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.max(np.abs(a)), 1.0)
    for sweep in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        logger.warning("Jacobi did not converge in %d sweeps", max_sweeps)
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def retained_count(eigenvalues, threshold: float = VARIANCE_EXPLAINED) -> int:
    values = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    share = np.cumsum(values) / np.sum(values)
    return int(np.searchsorted(share, threshold - 1e-12) + 1)


def pca_from_eigenvalues(real_values, generated_values, retained: Optional[int] = None):
    """``1 - mean(min(1, |e - e_hat| / e))`` over the leading eigenvalues"""
    real_values = np.asarray(real_values, dtype=np.float64)
    n = retained if retained is not None else retained_count(real_values)
    generated_values = np.asarray(generated_values, dtype=np.float64)
    padded = np.zeros(n)
    padded[:min(n, generated_values.size)] = generated_values[:n]
    errors = np.minimum(1.0, np.abs(real_values[:n] - padded) / real_values[:n])
    return float(1.0 - errors.mean()), errors.tolist(), n


def pca_score(real, generated):
    """Returns (score, clipped errors, retained count, real eigenvalues, generated eigenvalues)"""
    real, generated = _check_pair(real, generated)
    if real.shape[1] < 2:
        raise EvaluationError("the PCA score needs at least 2 features")
    real_values, _ = jacobi_eigen(correlation_matrix(real))
    generated_values, _ = jacobi_eigen(correlation_matrix(generated))
    score, errors, n = pca_from_eigenvalues(real_values, generated_values)
    return score, errors, n, real_values.tolist(), generated_values.tolist()


def score_report(real, generated, features: Sequence[str] = ()) -> ScoreReport:
    s_ks, per_feature = ks_score(real, generated)
    s_pca, errors, n, real_values, generated_values = pca_score(real, generated)
    logger.info("S_ks=%.4f S_pca=%.4f (N=%d)", s_ks, s_pca, n)
    return ScoreReport(s_ks, per_feature, s_pca, errors, n, real_values, generated_values,
                       len(np.atleast_2d(real)), len(np.atleast_2d(generated)), list(features))


# ---------------------------------------------------------------------------
# Triangle plot data
# ---------------------------------------------------------------------------

def hdr_threshold(counts, mass: float) -> float:
    """Smallest bin count whose highest-density region holds at least ``mass``"""
    flat = np.sort(np.asarray(counts, dtype=np.float64).reshape(-1))[::-1]
    total = flat.sum()
    if total <= 0:
        raise EvaluationError("histogram is empty")
    cumulative = np.cumsum(flat) / total
    index = int(np.searchsorted(cumulative, mass - 1e-12))
    return float(flat[min(index, flat.size - 1)])


def hdr_mass(counts, threshold: float) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    return float(counts[counts >= threshold].sum() / counts.sum())


def _edges(real_col, generated_col, bins: int) -> np.ndarray:
    lo = min(real_col.min(), generated_col.min())
    hi = max(real_col.max(), generated_col.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


@dataclass
class TrianglePlotData:
    marginals: pd.DataFrame  # source, feature, bin_lo, bin_hi, count
    pairs: pd.DataFrame  # source, f1, f2, b1_lo, b1_hi, b2_lo, b2_hi, count
    levels: pd.DataFrame  # source, f1, f2, mass, threshold, enclosed

    def write(self, out_dir: str) -> List[str]:
        paths = []
        for name, frame in (("marginals", self.marginals), ("pairs", self.pairs), ("contour_levels", self.levels)):
            path = os.path.join(out_dir, f"triangle_{name}.csv")
            frame.to_csv(path, index=False, lineterminator="\n")
            paths.append(path)
        return paths


def triangle_export(real, generated, bins: int = TRIANGLE_BINS, pairs: Optional[Sequence[Tuple[int, int]]] = None,
                    features: Optional[Sequence[str]] = None, levels: Sequence[float] = HDR_LEVELS) -> TrianglePlotData:
    """Histogram data for a corner plot of real against generated samples.

    Both sets share bin edges per feature. Each pair gets 2-D histograms and
    the count thresholds of its highest-density regions.
    """
    real, generated = _check_pair(real, generated)
    n_features = real.shape[1]
    names = list(features) if features is not None else [f"f{c + 1}" for c in range(n_features)]
    if pairs is None:
        pairs = list(combinations(range(n_features), 2))
    edges = [_edges(real[:, c], generated[:, c], bins) for c in range(n_features)]

    marginal_rows, pair_rows, level_rows = [], [], []
    for source, data in (("real", real), ("generated", generated)):
        for c in range(n_features):
            counts, _ = np.histogram(data[:, c], bins=edges[c])
            for b in range(bins):
                marginal_rows.append((source, names[c], edges[c][b], edges[c][b + 1], int(counts[b])))
        for c1, c2 in pairs:
            counts, _, _ = np.histogram2d(data[:, c1], data[:, c2], bins=[edges[c1], edges[c2]])
            b1, b2 = np.nonzero(counts)
            for i, j in zip(b1, b2):
                pair_rows.append((source, names[c1], names[c2], edges[c1][i], edges[c1][i + 1],
                                  edges[c2][j], edges[c2][j + 1], int(counts[i, j])))
            for mass in levels:
                threshold = hdr_threshold(counts, mass)
                level_rows.append((source, names[c1], names[c2], mass, threshold, hdr_mass(counts, threshold)))

    return TrianglePlotData(
        pd.DataFrame(marginal_rows, columns=["source", "feature", "bin_lo", "bin_hi", "count"]),
        pd.DataFrame(pair_rows, columns=["source", "f1", "f2", "b1_lo", "b1_hi", "b2_lo", "b2_hi", "count"]),
        pd.DataFrame(level_rows, columns=["source", "f1", "f2", "mass", "threshold", "enclosed"]),
    )
