"""Grad-CAM node scores, double normalization and RSN summaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import engine as E
from .atlas import RSN_NAMES, MultiscaleAtlasSet
from .model import MahgcnParams, forward
from .train import BD

log = logging.getLogger(__name__)


@dataclass
class CamMap:
    """Per-scale node scores keyed by ROI count."""

    scores: dict[int, np.ndarray]
    fold: int | None = None
    group: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def scales(self) -> list[int]:
        return sorted(self.scores)

    def map(self, fn) -> "CamMap":
        return CamMap({s: fn(v) for s, v in self.scores.items()}, self.fold, self.group)


def gradcam(params: MahgcnParams, adjacency: Sequence[np.ndarray], target: int = BD) -> list[dict[int, np.ndarray]]:
    """Grad-CAM for a batch of subjects.

    Backpropagates the ``target`` logit (eval mode) to every GCN output
    feature map; the node score is ``sum_c grad[n, c] * h[n, c]``.
    ``adjacency`` holds normalised stacks, finest first. Returns one
    ``{scale: scores}`` dict per subject.
    """
    trace = forward(params, adjacency, train=False)
    seed = np.zeros_like(trace.logits.data)
    seed[..., target] = 1.0
    E.backward(trace.logits, seed)
    per_scale = {}
    for scale, h in zip(params.gcn_scales, trace.feature_maps):
        g = h.grad if h.grad is not None else np.zeros_like(h.data)
        per_scale[scale] = (g * h.data).sum(axis=-1)
    for t in params.tensors.values():
        t.zero_grad()
    n = trace.logits.data.shape[0]
    return [{s: v[i].copy() for s, v in per_scale.items()} for i in range(n)]


def gradcam_subject(params: MahgcnParams, adjacency: Sequence[np.ndarray], target: int = BD,
                    fold: int | None = None, group: str | None = None) -> CamMap:
    """Grad-CAM for one subject given its normalised adjacency per layer (finest first)."""
    batch = [np.asarray(a)[None] if np.asarray(a).ndim == 2 else np.asarray(a) for a in adjacency]
    if batch[0].shape[0] != 1:
        raise ValueError("gradcam_subject takes a single subject")
    return CamMap(gradcam(params, batch, target)[0], fold, group)


def minmax_normalize(values) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to zeros."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("cannot normalise an empty array")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def auc_weighted_average(maps: Sequence[CamMap], aucs: Sequence[float]) -> CamMap:
    """``sum_f auc_f * map_f / sum_f auc_f`` per scale and node."""
    w = np.asarray(aucs, dtype=float)
    if len(maps) != w.size or not maps:
        raise ValueError("need one AUC per map")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("AUC weights must be finite and nonnegative")
    if w.sum() == 0:
        raise ValueError("AUC weights are all zero")
    scales = maps[0].scales
    for m in maps:
        if m.scales != scales or any(m.scores[s].shape != maps[0].scores[s].shape for s in scales):
            raise ValueError("maps differ in shape")
    out = {s: sum(wi * m.scores[s] for wi, m in zip(w, maps)) / w.sum() for s in scales}
    return CamMap(out, None, maps[0].group)


def mean_map(maps: Sequence[CamMap]) -> CamMap:
    if not maps:
        raise ValueError("no maps to average")
    scales = maps[0].scales
    return CamMap({s: np.mean([m.scores[s] for m in maps], axis=0) for s in scales},
                  maps[0].fold, maps[0].group)


def group_map(subject_maps: Mapping[int, Sequence[CamMap]], fold_aucs: Mapping[int, float]) -> CamMap:
    """One group's map: mean over subjects per fold model, min-max, AUC-weighted over folds, min-max."""
    per_fold, weights = [], []
    for fold in sorted(subject_maps):
        maps = subject_maps[fold]
        if not maps:
            continue
        per_fold.append(mean_map(maps).map(minmax_normalize))
        weights.append(fold_aucs[fold])
    if not per_fold:
        raise ValueError("group has no correctly predicted BD subjects")
    return auc_weighted_average(per_fold, weights).map(minmax_normalize)


def consensus_map(groups: Mapping[str, Mapping[int, Sequence[CamMap]]], fold_aucs: Mapping[int, float],
                  include: Sequence[str] | None = None) -> CamMap:
    """Double-normalised consensus across dataset groups.

    ``groups[group][fold]`` lists the maps of correctly predicted BD test
    subjects of that fold. ``include`` selects the groups averaged at the
    end (default all).
    """
    names = sorted(groups) if include is None else sorted(include)
    missing = [g for g in names if g not in groups]
    if missing or not names:
        raise ValueError(f"unknown or empty group selection: {missing or names}")
    maps = [group_map(groups[g], fold_aucs) for g in names]
    out = mean_map(maps)
    out.group = "+".join(names)
    return out


def rsn_aggregate(cam: CamMap, atlas: MultiscaleAtlasSet) -> dict[int, np.ndarray]:
    """Mean node score per RSN at every scale (NaN, with a warning, for an empty RSN)."""
    out = {}
    for scale, scores in cam.scores.items():
        labels = atlas.scales[atlas.index_of(scale)].rsn_label
        if labels.shape != scores.shape:
            raise ValueError(f"scale {scale}: {scores.size} scores for {labels.size} ROIs")
        row = np.full(len(RSN_NAMES), np.nan)
        for r in range(len(RSN_NAMES)):
            sel = labels == r
            if sel.any():
                row[r] = scores[sel].mean()
            else:
                log.warning("scale %d: RSN %s has no ROIs", scale, RSN_NAMES[r])
        out[scale] = row
    return out


def fold_cams(params: MahgcnParams, adjacency: Sequence[np.ndarray], labels: np.ndarray, scores: np.ndarray,
              fold: int, groups: Sequence[str], threshold: float = 0.5,
              batch_size: int = 64) -> dict[str, list[CamMap]]:
    """CAMs of the correctly predicted BD subjects of one fold's test set, keyed by group."""
    labels = np.asarray(labels)
    hits = np.flatnonzero((labels == BD) & (np.asarray(scores) >= threshold))
    out: dict[str, list[CamMap]] = {}
    for lo in range(0, hits.size, batch_size):
        idx = hits[lo:lo + batch_size]
        for i, scores_i in zip(idx, gradcam(params, [a[idx] for a in adjacency])):
            g = str(groups[i])
            out.setdefault(g, []).append(CamMap(scores_i, fold, g))
    return out
