"""Deep-feature subject relationships and their diffusion-map gradients."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.stats import pearsonr

from .model import MahgcnParams, forward
from .stats import mann_whitney_u

log = logging.getLogger(__name__)


def deep_features(params: MahgcnParams, adjacency: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """FL-3 activations (after batchnorm and ReLU) in eval mode, one row per subject."""
    n = adjacency[0].shape[0]
    out = [forward(params, [a[lo:lo + batch_size] for a in adjacency], train=False).deep_features
           for lo in range(0, n, batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.fl_widths[-1]))


def relation_matrix(features) -> np.ndarray:
    """Correlation distance ``1 - r`` between subjects' feature vectors.

    A constant vector has no defined correlation; it gets distance 1 to
    every other subject and a warning is logged.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need a (subjects >= 3, features) matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    c = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((c ** 2).sum(axis=1))
    flat = norms <= 1e-12 * max(1.0, float(np.abs(x).max()))
    if flat.any():
        log.warning("constant feature vectors for subjects %s: distance set to 1",
                    np.flatnonzero(flat).tolist())
    z = c / np.where(flat, 1.0, norms)[:, None]
    z[flat] = 0.0
    d = 1.0 - z @ z.T
    d = np.clip((d + d.T) / 2.0, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return d


def consensus_relation(matrices: Sequence[np.ndarray], aucs: Sequence[float]) -> np.ndarray:
    """AUC-weighted mean of per-model relation matrices."""
    w = np.asarray(aucs, dtype=float)
    if not len(matrices) or len(matrices) != w.size:
        raise ValueError("need one AUC per matrix")
    shape = np.shape(matrices[0])
    if any(np.shape(m) != shape for m in matrices):
        raise ValueError("relation matrices differ in shape")
    if np.any(w < 0) or w.sum() == 0:
        raise ValueError("AUC weights must be nonnegative and not all zero")
    return sum(wi * np.asarray(m, dtype=float) for wi, m in zip(w, matrices)) / w.sum()


@dataclass
class Embedding:
    coordinates: np.ndarray  # (subjects, components); NaN rows outside the embedded component
    lambdas: np.ndarray  # normalised component variances, non-increasing
    connected: bool = True
    embedded: np.ndarray | None = None  # indices of subjects that were embedded
    spectrum: np.ndarray | None = None  # normalised variances of every nontrivial component


def _sparsify(w: np.ndarray, sparsity: float) -> np.ndarray:
    """Keep each row's top ``1 - sparsity`` share of off-diagonal affinities (ties kept)."""
    n = w.shape[0]
    keep = max(1, math.ceil((1.0 - sparsity) * (n - 1) - 1e-9))
    off = w.copy()
    np.fill_diagonal(off, -np.inf)
    thresh = -np.sort(-off, axis=1)[:, keep - 1]
    mask = off >= thresh[:, None]
    np.fill_diagonal(mask, True)
    return np.where(mask, w, 0.0)


def diffusion_embed(rel, n_components: int = 10, alpha: float = 0.5, sparsity: float = 0.9) -> Embedding:
    """Diffusion-map gradients of a relation (distance) matrix.

    Affinity ``1 - rel / 2``; each row keeps its strongest ``1 - sparsity``
    share of neighbours and the graph is symmetrised by the maximum. After
    anisotropic normalisation with exponent ``alpha`` the kernel is row
    normalised into a Markov operator. Its nontrivial right eigenvectors,
    scaled by ``lambda / (1 - lambda)`` (diffusion time 0), are the gradients.
    A disconnected graph is flagged; only its largest component is embedded.
    """
    rel = np.asarray(rel, dtype=float)
    n = rel.shape[0]
    if rel.ndim != 2 or rel.shape[1] != n:
        raise ValueError("relation matrix must be square")
    if not np.all(np.isfinite(rel)):
        raise ValueError("relation matrix has non-finite entries")
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    if n < n_components + 2:
        raise ValueError(f"{n} subjects cannot give {n_components} components")
    w = np.clip(1.0 - rel / 2.0, 0.0, 1.0)
    w = (w + w.T) / 2.0
    np.fill_diagonal(w, 1.0)
    w = _sparsify(w, sparsity)
    w = np.maximum(w, w.T)

    off = w.copy()
    np.fill_diagonal(off, 0.0)
    n_comp, comp = connected_components(off > 0, directed=False)
    index = np.arange(n)
    connected = n_comp == 1
    if not connected:
        biggest = np.argmax(np.bincount(comp))
        index = np.flatnonzero(comp == biggest)
        log.warning("affinity graph has %d components; embedding the largest (%d of %d subjects)",
                    n_comp, index.size, n)
        if index.size < n_components + 2:
            raise ValueError("largest connected component is too small to embed")
        w = w[np.ix_(index, index)]

    d = w.sum(axis=1) ** alpha
    k = w / np.outer(d, d)
    d2 = k.sum(axis=1)
    sym = k / np.sqrt(np.outer(d2, d2))
    vals, vecs = np.linalg.eigh((sym + sym.T) / 2.0)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    psi = vecs / np.sqrt(d2)[:, None]
    psi = psi / psi[:, [0]]
    lam = vals[1:]
    scaled = lam / (1.0 - lam)
    coords = psi[:, 1:n_components + 1] * scaled[:n_components]
    variance = np.clip(scaled, 0.0, None)
    total = variance.sum()
    spectrum = variance / total if total > 0 else variance

    full = np.full((n, n_components), np.nan)
    full[index] = coords
    return Embedding(full, spectrum[:n_components], connected, index, spectrum)


def partition_asd(coordinates, diagnoses, g1_range=(10.0, 100.0), g2_range=(0.0, 90.0)) -> dict[str, np.ndarray]:
    """Split ASD subjects by a percentile box of the ADHD subjects' gradients 1 and 2.

    Bounds are inclusive. Returns subject indices of ``ADHD_like`` and
    ``MCI_like`` ASD subjects.
    """
    x = np.asarray(coordinates, dtype=float)
    diagnoses = np.asarray(diagnoses)
    adhd = x[diagnoses == "ADHD"]
    asd_idx = np.flatnonzero(diagnoses == "ASD")
    if adhd.shape[0] == 0:
        raise ValueError("no ADHD subjects to define the reference box")
    if asd_idx.size == 0:
        raise ValueError("no ASD subjects to partition")
    lo1, hi1 = np.percentile(adhd[:, 0], g1_range)
    lo2, hi2 = np.percentile(adhd[:, 1], g2_range)
    pts = x[asd_idx]
    inside = (pts[:, 0] >= lo1) & (pts[:, 0] <= hi1) & (pts[:, 1] >= lo2) & (pts[:, 1] <= hi2)
    return {"ADHD_like": asd_idx[inside], "MCI_like": asd_idx[~inside]}


def covariate_association(values, covariate) -> tuple[float, float]:
    """Pearson r with its t-test p, or Mann-Whitney U for a two-level covariate."""
    v = np.asarray(values, dtype=float)
    cov = np.asarray(covariate)
    if v.size < 10 or cov.shape != v.shape:
        raise ValueError("need at least 10 paired values")
    levels = np.unique(cov)
    if levels.size < 2:
        raise ValueError("covariate is constant")
    if levels.size == 2:
        res = mann_whitney_u(v[cov == levels[1]], v[cov == levels[0]])
        return res.statistic, res.pvalue
    r, p = pearsonr(v, cov.astype(float))
    return float(r), float(p)
