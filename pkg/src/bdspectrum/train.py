"""Site-weighted training, Adam, metrics and k-fold cross-validation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import engine as E
from .atlas import MultiscaleAtlasSet, adjacent_mappings
from .cohort import Cohort, split_kfold
from .engine import Tensor
from .model import (MahgcnParams, ModelConfig, forward, init_params, normalize_adjacency,
                    single_scale_config)

log = logging.getLogger(__name__)

HC, BD = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr: float = 0.01
    lr_late: float = 0.001
    lr_boundary: int = 50  # epochs run at ``lr`` before switching to ``lr_late``
    weight_decay: float = 0.01
    per_site_batch: int = 100
    seed: int = 0
    k_folds: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.per_site_batch < 1 or self.k_folds < 2:
            raise ValueError("epochs, per_site_batch must be >= 1 and k_folds >= 2")
        if self.lr < 0 or self.lr_late < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be >= 0")
        if self.lr_boundary < 0:
            raise ValueError("lr_boundary must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr if epoch < self.lr_boundary else self.lr_late


# -- data --------------------------------------------------------------------

@dataclass
class PreparedData:
    """Normalised adjacency stacks (finest first) with labels and sites."""

    adjacency: list[np.ndarray]
    labels: np.ndarray
    sites: np.ndarray
    scales: list[int]  # finest first

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index) -> "PreparedData":
        index = np.asarray(index)
        return PreparedData([a[index] for a in self.adjacency], self.labels[index], self.sites[index],
                            self.scales)

    def restrict(self, scales: Iterable[int]) -> "PreparedData":
        keep = [self.scales.index(s) for s in sorted(scales, reverse=True)]
        return PreparedData([self.adjacency[k] for k in keep], self.labels, self.sites,
                            [self.scales[k] for k in keep])


def prepare(cohort: Cohort) -> PreparedData:
    cohort.require_networks()
    scales = sorted(cohort.scales, reverse=True)
    adjacency = [normalize_adjacency(cohort.networks(s)) for s in scales]
    return PreparedData(adjacency, cohort.labels, cohort.sites, scales)


# -- loss --------------------------------------------------------------------

@dataclass(frozen=True)
class SiteStats:
    n_hc: int
    n_bd: int

    @property
    def size(self) -> int:
        return self.n_hc + self.n_bd

    @property
    def class_weights(self) -> np.ndarray:
        """Inverse class frequencies scaled to mean 1: ``(w_HC, w_BD)``."""
        inv = np.array([1.0 / self.n_hc, 1.0 / self.n_bd])
        return inv * 2.0 / inv.sum()

    @property
    def penalty(self) -> float:
        return 1.0 / math.sqrt(self.size)


def site_statistics(labels: np.ndarray, sites: np.ndarray) -> dict[str, SiteStats]:
    """Per-site class counts; every site must contain both classes."""
    stats = {}
    for site in sorted(set(sites.tolist())):
        lab = labels[sites == site]
        n_bd = int(lab.sum())
        n_hc = int(lab.size - n_bd)
        if n_hc == 0 or n_bd == 0:
            raise ValueError(f"site {site!r} lacks {'HC' if n_hc == 0 else 'BD'} training samples; "
                             "class weights undefined")
        stats[site] = SiteStats(n_hc, n_bd)
    return stats


def site_weighted_loss(logits: Tensor, labels: np.ndarray, sites: np.ndarray,
                       site_stats: Mapping[str, SiteStats]) -> Tensor:
    """Sum over sites of class-weighted cross-entropy times ``1/sqrt(site size)``."""
    terms = []
    for site in sorted(set(sites.tolist())):
        idx = np.flatnonzero(sites == site)
        st = site_stats[site]
        ce, _ = E.softmax_crossentropy(E.take_rows(logits, idx), labels[idx], st.class_weights)
        terms.append(E.scale(ce, st.penalty))
    return E.add_all(terms)


# -- optimiser -----------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float, weight_decay: float,
              trainable: Iterable[str] | None = None) -> None:
    """One Adam update with L2 weight decay folded into the gradient.

    Tensors outside ``trainable`` are left untouched. A trainable tensor
    without a gradient is treated as having a zero gradient.
    """
    names = list(params) if trainable is None else [n for n in params if n in set(trainable)]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in names:
        p = params[name]
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise E.NonFiniteError(f"non-finite gradient for {name}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training loop ---------------------------------------------------------------

def _site_pools(sites: np.ndarray) -> dict[str, np.ndarray]:
    return {s: np.flatnonzero(sites == s) for s in sorted(set(sites.tolist()))}


def run_epoch(params: MahgcnParams, data: PreparedData, config: TrainConfig, rng: np.random.Generator,
              state: AdamState, lr: float, site_stats: Mapping[str, SiteStats] | None = None,
              trainable: Iterable[str] | None = None) -> list[float]:
    """One epoch; returns the loss of every update iteration.

    Each iteration draws ``per_site_batch`` samples from every site (with
    replacement when the site pool is smaller) and the epoch runs
    ``ceil(largest pool / per_site_batch)`` iterations.
    """
    pools = _site_pools(data.sites)
    if not pools or any(p.size == 0 for p in pools.values()):
        raise ValueError("empty site pool")
    site_stats = site_stats or site_statistics(data.labels, data.sites)
    trainable = list(params.tensors) if trainable is None else list(trainable)
    n_iter = math.ceil(max(p.size for p in pools.values()) / config.per_site_batch)
    losses = []
    for _ in range(n_iter):
        batch = np.concatenate([
            rng.choice(pool, size=config.per_site_batch, replace=pool.size < config.per_site_batch)
            for pool in pools.values()
        ])
        adj = [a[batch] for a in data.adjacency]
        for name in trainable:
            params.tensors[name].zero_grad()
        trace = forward(params, adj, train=True, rng=rng)
        loss = site_weighted_loss(trace.logits, data.labels[batch], data.sites[batch], site_stats)
        E.backward(loss)
        adam_step(params.tensors, state, lr, config.weight_decay, trainable)
        losses.append(float(loss.data))
    return losses


def train_model(params: MahgcnParams, data: PreparedData, config: TrainConfig, seed,
                trainable: Iterable[str] | None = None) -> list[float]:
    """Train ``params`` in place; returns the mean loss of each epoch."""
    rng = np.random.default_rng(seed)
    state = AdamState()
    stats = site_statistics(data.labels, data.sites)
    trace = []
    for epoch in range(config.epochs):
        losses = run_epoch(params, data, config, rng, state, config.lr_at(epoch), stats, trainable)
        trace.append(float(np.mean(losses)))
    return trace


def predict(params: MahgcnParams, data: PreparedData, batch_size: int = 256) -> np.ndarray:
    """Eval-mode BD probability for every sample."""
    out = []
    for lo in range(0, len(data), batch_size):
        adj = [a[lo:lo + batch_size] for a in data.adjacency]
        out.append(forward(params, adj, train=False).probabilities[:, BD])
    return np.concatenate(out) if out else np.zeros(0)


# -- metrics -----------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRecord:
    """ACC/SEN/SPE/AUC in [0, 1]; NaN marks a metric undefined for the set."""

    acc: float
    sen: float
    spe: float
    auc: float
    scope: str = "global"  # "global", "site_averaged" or "site:<id>"
    fold: int | None = None
    counts: Mapping[str, int] | None = None  # sites contributing, for site-averaged records

    def as_dict(self) -> dict[str, float]:
        return {"ACC": self.acc, "SEN": self.sen, "SPE": self.spe, "AUC": self.auc}


METRICS = ("ACC", "SEN", "SPE", "AUC")


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_BD > score_HC) + 0.5 P(tie). NaN for one class."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold: float = 0.5, scope: str = "global",
                    fold: int | None = None) -> MetricsRecord:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.size == 0 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be nonempty and equally long")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    return MetricsRecord(
        acc=(tp + tn) / labels.size,
        sen=tp / n_pos if n_pos else float("nan"),
        spe=tn / n_neg if n_neg else float("nan"),
        auc=auc_score(scores, labels),
        scope=scope, fold=fold,
    )


def site_metrics(scores, labels, sites, fold: int | None = None) -> dict[str, MetricsRecord]:
    scores, labels, sites = np.asarray(scores), np.asarray(labels), np.asarray(sites)
    return {s: compute_metrics(scores[sites == s], labels[sites == s], scope=f"site:{s}", fold=fold)
            for s in sorted(set(sites.tolist()))}


def aggregate_site_metrics(records: Sequence[MetricsRecord] | Mapping[str, MetricsRecord]) -> MetricsRecord:
    """Unweighted mean over sites, skipping sites where a metric is undefined."""
    records = list(records.values()) if isinstance(records, Mapping) else list(records)
    values, counts = {}, {}
    for key in METRICS:
        vals = np.array([r.as_dict()[key] for r in records], dtype=float)
        ok = ~np.isnan(vals)
        counts[key] = int(ok.sum())
        values[key] = float(vals[ok].mean()) if ok.any() else float("nan")
        if ok.sum() < len(vals):
            log.info("%s undefined at %d of %d sites; averaged over the rest", key,
                     len(vals) - ok.sum(), len(vals))
    fold = records[0].fold if records else None
    return MetricsRecord(values["ACC"], values["SEN"], values["SPE"], values["AUC"],
                         scope="site_averaged", fold=fold, counts=counts)


# -- cross-validation ----------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    method: str
    test_index: np.ndarray
    scores: np.ndarray
    loss_trace: list[float]
    params: MahgcnParams
    site_specific: dict[str, MetricsRecord]
    site_averaged: MetricsRecord
    global_metrics: MetricsRecord
    test_labels: np.ndarray | None = None
    test_sites: np.ndarray | None = None


@dataclass
class CVResult:
    folds: dict[str, list[FoldResult]]  # method -> per-fold results
    splits: list[tuple[np.ndarray, np.ndarray]]

    @property
    def methods(self) -> list[str]:
        return list(self.folds)

    def metric_matrix(self, method: str, scope: str = "site_averaged") -> np.ndarray:
        """(folds, 4) array of ACC/SEN/SPE/AUC for ``method``."""
        rows = []
        for fr in self.folds[method]:
            rec = fr.site_averaged if scope == "site_averaged" else fr.global_metrics
            rows.append([rec.as_dict()[k] for k in METRICS])
        return np.array(rows)

    def site_matrix(self, method: str, site: str) -> np.ndarray:
        return np.array([[fr.site_specific[site].as_dict()[k] for k in METRICS]
                         for fr in self.folds[method] if site in fr.site_specific])


def method_name(scale: int | None) -> str:
    return "MAHGCN" if scale is None else f"{scale} ROIs"


def _fit_fold(args) -> FoldResult:
    (fold, method, scale, data, train_idx, test_idx, mappings, model_config,
     train_config, seed_key) = args
    if scale is None:
        cfg, maps, fold_data = model_config, mappings, data
    else:
        cfg, maps, fold_data = single_scale_config(model_config, scale), [], data.restrict([scale])
    params = init_params(cfg, maps, seed=seed_key + (0,))
    train = fold_data.take(train_idx)
    test = fold_data.take(test_idx)
    trace = train_model(params, train, train_config, seed=seed_key + (1,))
    scores = predict(params, test)
    per_site = site_metrics(scores, test.labels, test.sites, fold)
    return FoldResult(fold, method_name(scale), test_idx, scores, trace, params, per_site,
                      aggregate_site_metrics(per_site), compute_metrics(scores, test.labels, fold=fold),
                      test.labels, test.sites)


def cross_validate(cohort: Cohort | PreparedData, atlas: MultiscaleAtlasSet, model_config: ModelConfig,
                   train_config: TrainConfig, baselines: bool = True, jobs: int = 1,
                   splits: list | None = None, fold_data: Sequence[PreparedData] | None = None) -> CVResult:
    """k-fold CV of the multiscale model and, optionally, every single-scale GCN.

    Fold f of method m is seeded from ``(seed, f, m)`` so results do not
    depend on ``jobs``. ``fold_data`` optionally supplies one prepared data
    set per fold (e.g. harmonized with parameters fit on that fold's
    training subjects); it replaces ``cohort`` for that fold.
    """
    data = cohort if isinstance(cohort, PreparedData) else prepare(cohort)
    splits = splits or split_kfold(len(data), train_config.k_folds, train_config.seed)
    mappings = adjacent_mappings(atlas)
    methods: list[int | None] = [None] + (sorted(model_config.scales) if baselines else [])
    if fold_data is not None and len(fold_data) != len(splits):
        raise ValueError(f"{len(fold_data)} fold data sets for {len(splits)} folds")
    tasks = []
    for m_idx, scale in enumerate(methods):
        for fold, (tr, te) in enumerate(splits):
            d = data if fold_data is None else fold_data[fold]
            tasks.append((fold, method_name(scale), scale, d, tr, te, mappings, model_config,
                          train_config, (train_config.seed, fold, m_idx)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_fold, tasks))
    else:
        results = [_fit_fold(t) for t in tasks]
    folds: dict[str, list[FoldResult]] = {}
    for r in results:
        folds.setdefault(r.method, []).append(r)
    return CVResult(folds, splits)
