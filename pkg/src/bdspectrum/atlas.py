"""Multiscale parcellation hierarchy, RSN labels and inter-scale mapping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RSN_NAMES = ("VIS", "SM", "DAN", "SAL", "LIM", "ECN", "DMN")


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class AtlasScale:
    n_rois: int
    rsn_label: np.ndarray  # int index into RSN_NAMES
    roi_size: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.rsn_label, dtype=int)
        sizes = np.asarray(self.roi_size, dtype=float)
        object.__setattr__(self, "rsn_label", labels)
        object.__setattr__(self, "roi_size", sizes)
        if labels.shape != (self.n_rois,):
            raise AtlasError(f"rsn_label length {labels.size} != n_rois {self.n_rois}")
        if sizes.shape != (self.n_rois,):
            raise AtlasError(f"roi_size length {sizes.size} != n_rois {self.n_rois}")
        if np.any(sizes <= 0):
            raise AtlasError(f"roi_size must be > 0 (scale {self.n_rois})")
        if np.any((labels < 0) | (labels >= len(RSN_NAMES))):
            raise AtlasError(f"rsn_label outside 0..{len(RSN_NAMES) - 1} (scale {self.n_rois})")


@dataclass(frozen=True)
class MultiscaleAtlasSet:
    """Scales ordered coarse to fine; ``overlaps[k]`` maps scale k+1 onto scale k.

    ``overlaps[k]`` has shape ``(n_rois[k+1], n_rois[k])`` and holds voxel
    counts shared between each finer ROI and each coarser ROI.
    """

    scales: tuple[AtlasScale, ...]
    overlaps: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        object.__setattr__(self, "overlaps", tuple(np.asarray(o, dtype=float) for o in self.overlaps))
        counts = [s.n_rois for s in self.scales]
        if not counts:
            raise AtlasError("atlas needs at least one scale")
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise AtlasError(f"scales must be strictly increasing, got {counts}")
        if len(self.overlaps) != len(counts) - 1:
            raise AtlasError(f"expected {len(counts) - 1} overlap matrices, got {len(self.overlaps)}")
        for k, ov in enumerate(self.overlaps):
            fine, coarse = self.scales[k + 1], self.scales[k]
            if ov.shape != (fine.n_rois, coarse.n_rois):
                raise AtlasError(f"overlap {fine.n_rois}->{coarse.n_rois} has shape {ov.shape}")
            if np.any(ov < 0):
                raise AtlasError(f"overlap {fine.n_rois}->{coarse.n_rois} has negative counts")
            if not np.allclose(ov.sum(axis=1), fine.roi_size):
                raise AtlasError(
                    f"overlap {fine.n_rois}->{coarse.n_rois}: row sums differ from finer roi_size")

    @property
    def n_rois(self) -> list[int]:
        return [s.n_rois for s in self.scales]

    def index_of(self, n_rois: int) -> int:
        try:
            return self.n_rois.index(n_rois)
        except ValueError:
            raise AtlasError(f"no scale with {n_rois} ROIs") from None

    def to_dict(self) -> dict:
        return {
            "rsn_names": list(RSN_NAMES),
            "scales": [
                {"n_rois": s.n_rois, "rsn_label": [RSN_NAMES[i] for i in s.rsn_label],
                 "roi_size": s.roi_size.tolist()}
                for s in self.scales
            ],
            "overlaps": [
                {"finer": self.scales[k + 1].n_rois, "coarser": self.scales[k].n_rois,
                 "counts": ov.tolist()}
                for k, ov in enumerate(self.overlaps)
            ],
        }


def compute_mapping(atlas: MultiscaleAtlasSet, fine: int, coarse: int, threshold: float = 0.0) -> np.ndarray:
    """Binary mapping from scale index ``fine`` onto scale index ``coarse``.

    Entry (i, j) is 1 when the share of fine ROI i's voxels lying in coarse
    ROI j exceeds ``threshold``. Only adjacent scales carry overlap data.
    """
    if fine <= coarse:
        raise AtlasError(f"scale {fine} is not finer than scale {coarse}")
    if fine != coarse + 1:
        raise AtlasError(f"no overlap data between non-adjacent scales {fine} and {coarse}")
    ov = atlas.overlaps[coarse]
    ratio = ov / atlas.scales[fine].roi_size[:, None]
    return (ratio > threshold).astype(float)


def adjacent_mappings(atlas: MultiscaleAtlasSet, threshold: float = 0.0) -> list[np.ndarray]:
    """Mappings ordered finest->coarsest: element k maps scale -(k+1) to -(k+2)."""
    n = len(atlas.scales)
    return [compute_mapping(atlas, k, k - 1, threshold) for k in range(n - 1, 0, -1)]


def _split_counts(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    base = np.full(parts, total // parts)
    extra = rng.choice(parts, size=total % parts, replace=False)
    base[extra] += 1
    return base


def synth_hierarchy(scales, rsn_count: int = len(RSN_NAMES), seed: int = 0) -> MultiscaleAtlasSet:
    """Strictly nested synthetic hierarchy.

    RSN labels are dealt out evenly at the coarsest scale and inherited by
    every descendant ROI; each finer scale keeps RSN sizes within one ROI
    of each other where nesting allows. Fine ROI indices are shuffled so mappings are not
    block diagonal.
    """
    scales = [int(s) for s in scales]
    if not scales or any(s < 1 for s in scales):
        raise AtlasError(f"invalid scale list {scales}")
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise AtlasError(f"scales must be strictly increasing, got {scales}")
    if not 1 <= rsn_count <= len(RSN_NAMES):
        raise AtlasError(f"rsn_count must lie in 1..{len(RSN_NAMES)}")
    if scales[0] < rsn_count:
        raise AtlasError(f"coarsest scale {scales[0]} has fewer ROIs than {rsn_count} RSNs")
    rng = np.random.default_rng(seed)

    # RSN sizes stay balanced at every scale; which RSNs take the remainder is random
    labels = [rng.permutation(np.repeat(np.arange(rsn_count), _split_counts(scales[0], rsn_count, rng)))]
    parents = []  # parents[k][i]: coarse parent (scale k) of ROI i at scale k+1
    for coarse_n, fine_n in zip(scales, scales[1:]):
        coarse_lab = labels[-1]
        counts = np.bincount(coarse_lab, minlength=rsn_count)
        fine_counts = counts.copy()
        for _ in range(fine_n - coarse_n):
            low = np.flatnonzero(fine_counts == fine_counts.min())
            fine_counts[rng.choice(low)] += 1
        children = np.zeros(coarse_n, int)
        for r in range(rsn_count):
            members = np.flatnonzero(coarse_lab == r)
            if members.size:
                children[members] = _split_counts(int(fine_counts[r]), members.size, rng)
        parent = rng.permutation(np.repeat(np.arange(coarse_n), children))
        parents.append(parent)
        labels.append(coarse_lab[parent])

    sizes = [rng.integers(40, 160, size=scales[-1]).astype(float)]
    for parent, coarse_n in zip(reversed(parents), reversed(scales[:-1])):
        sizes.insert(0, np.bincount(parent, weights=sizes[0], minlength=coarse_n))

    overlaps = []
    for k, parent in enumerate(parents):
        fine_n, coarse_n = scales[k + 1], scales[k]
        ov = np.zeros((fine_n, coarse_n))
        ov[np.arange(fine_n), parent] = sizes[k + 1]
        overlaps.append(ov)

    return MultiscaleAtlasSet(
        scales=tuple(AtlasScale(n, lab, sz) for n, lab, sz in zip(scales, labels, sizes)),
        overlaps=tuple(overlaps),
    )


def save_atlas(atlas: MultiscaleAtlasSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(atlas.to_dict(), indent=1) + "\n")


def load_atlas(path: str | Path) -> MultiscaleAtlasSet:
    """Read and validate an atlas JSON file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AtlasError(f"{path}: not valid JSON ({exc})") from exc
    names = doc.get("rsn_names", list(RSN_NAMES))
    lookup = {name: i for i, name in enumerate(RSN_NAMES)}
    scales = []
    for sec in doc["scales"]:
        try:
            labels = [lookup[names[x]] if isinstance(x, int) else lookup[x] for x in sec["rsn_label"]]
        except KeyError as exc:
            raise AtlasError(f"unknown RSN label {exc} at scale {sec.get('n_rois')}") from None
        scales.append(AtlasScale(int(sec["n_rois"]), np.array(labels), np.array(sec["roi_size"], float)))
    counts = [s.n_rois for s in scales]
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise AtlasError(f"scales must be strictly increasing, got {counts}")
    by_pair = {(o["finer"], o["coarser"]): np.array(o["counts"], float) for o in doc.get("overlaps", [])}
    overlaps = []
    for coarse, fine in zip(counts, counts[1:]):
        if (fine, coarse) not in by_pair:
            raise AtlasError(f"missing overlap section {fine}->{coarse}")
        overlaps.append(by_pair[(fine, coarse)])
    return MultiscaleAtlasSet(tuple(scales), tuple(overlaps))
