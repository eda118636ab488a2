"""ROI signal averaging and Pearson functional networks."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def roi_average(voxel_signals: np.ndarray, membership) -> np.ndarray:
    """Average voxel time series within each ROI.

    Parameters
    ----------
    voxel_signals : (voxels, timepoints) array
    membership : per-voxel ROI index, 0-based

    Returns
    -------
    (rois, timepoints) array, ROI count = max(membership) + 1.
    """
    x = np.asarray(voxel_signals, dtype=float)
    member = np.asarray(membership, dtype=int)
    if member.shape != (x.shape[0],):
        raise ValueError(f"membership has {member.size} entries for {x.shape[0]} voxels")
    n_rois = int(member.max()) + 1
    counts = np.bincount(member, minlength=n_rois)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"ROIs without voxels: {empty.tolist()}")
    sums = np.zeros((n_rois, x.shape[1]))
    np.add.at(sums, member, x)
    return sums / counts[:, None]


def build_bfn(roi_series: np.ndarray) -> np.ndarray:
    """Pearson correlation between all pairs of ROI signals.

    Rows with zero variance get correlation 0 with every other ROI (a
    warning is logged); the diagonal is always 1.
    """
    x = np.asarray(roi_series, dtype=float)
    if x.ndim != 2:
        raise ValueError("roi_series must be a 2-D (ROIs x timepoints) array")
    if x.shape[1] < 3:
        raise ValueError(f"need at least 3 timepoints, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("roi_series contains non-finite values")
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    flat = norms <= 1e-12 * max(1.0, float(np.abs(x).max()))
    if flat.any():
        log.warning("zero-variance ROI rows %s: correlations set to 0", np.flatnonzero(flat).tolist())
    safe = np.where(flat, 1.0, norms)
    z = centered / safe[:, None]
    z[flat] = 0.0
    r = z @ z.T
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r


def check_bfn(w: np.ndarray, clipped: bool = True) -> None:
    """Validate network invariants; ``clipped=False`` allows values beyond [-1, 1]."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"network must be square, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("network has non-finite entries")
    if not np.array_equal(w, w.T):
        raise ValueError("network is not symmetric")
    if not np.all(np.diag(w) == 1.0):
        raise ValueError("network diagonal is not 1")
    if clipped and (w.min() < -1.0 or w.max() > 1.0):
        raise ValueError("network entries outside [-1, 1]")


def upper_triangle(w: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(w.shape[-1], k=1)
    return w[..., iu[0], iu[1]]


def from_upper_triangle(values: np.ndarray, n: int) -> np.ndarray:
    """Rebuild symmetric unit-diagonal matrices from upper-triangle vectors."""
    values = np.asarray(values, dtype=float)
    out = np.zeros(values.shape[:-1] + (n, n))
    iu = np.triu_indices(n, k=1)
    out[..., iu[0], iu[1]] = values
    out[..., iu[1], iu[0]] = values
    idx = np.arange(n)
    out[..., idx, idx] = 1.0
    return out


def write_matrix(path: str | Path, m: np.ndarray) -> None:
    np.savetxt(path, np.asarray(m), delimiter=",", fmt="%.17g")


def read_matrix(path: str | Path) -> np.ndarray:
    """Load a comma- or whitespace-delimited numeric matrix."""
    with open(path) as fh:
        first = next((ln for ln in fh if ln.strip() and not ln.startswith("#")), "")
    delimiter = "," if "," in first else None
    return np.loadtxt(path, delimiter=delimiter, ndmin=2)
