"""Pre-training on source groups and K-shot fine-tuning on a held-out target."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .model import MahgcnParams, ModelConfig, init_params
from .stats import wilcoxon_signed_rank
from .train import (METRICS, MetricsRecord, PreparedData, TrainConfig, compute_metrics, predict,
                    train_model)

log = logging.getLogger(__name__)

LEVELS = (1, 2, 3, 4)
BASELINE = "baseline"


@dataclass(frozen=True)
class TransferConfig:
    pretrain_epochs: int = 250
    finetune_epochs: int = 50
    shots: int = 20
    pool: int = 100
    repetitions: int = 10
    levels: tuple[int, ...] = LEVELS

    def __post_init__(self):
        if self.shots < 1 or self.pool < self.shots:
            raise ValueError(f"need 1 <= shots <= pool, got shots={self.shots}, pool={self.pool}")
        bad = [lv for lv in self.levels if lv not in LEVELS]
        if bad:
            raise ValueError(f"unknown fine-tuning levels {bad}")


def trainable_set(level: int, params: MahgcnParams) -> frozenset[str]:
    """Names of tensors updated at a fine-tuning level.

    1: everything. 2: all FLs and BNs. 3: last FL and all BNs.
    4: last FL and last BN.
    """
    names = set(params.tensors)
    if level == 1:
        return frozenset(names)
    if level == 2:
        return frozenset(n for n in names if n.startswith(("fl.", "bn.")))
    if level == 3:
        return frozenset(n for n in names if n.startswith(("fl.3.", "bn.")))
    if level == 4:
        return frozenset(n for n in names if n.startswith(("fl.3.", "bn.2.")))
    raise ValueError(f"level must be one of {LEVELS}, got {level!r}")


def frozen_batchnorms(level: int, params: MahgcnParams) -> frozenset[int]:
    """BN layer indices that keep eval behaviour (running stats) at ``level``."""
    train = trainable_set(level, params)
    return frozenset(i for i in range(3) if f"bn.{i}.gamma" not in train)


def pretrain(params: MahgcnParams, source: PreparedData, config: TrainConfig, seed) -> list[float]:
    """Train on the source groups in place; ``config.epochs`` is the pre-training length."""
    return train_model(params, source, config, seed)


def finetune(checkpoint: MahgcnParams, level: int, data: PreparedData, config: TrainConfig,
             seed) -> tuple[MahgcnParams, list[float]]:
    """Fine-tune a copy of ``checkpoint``; tensors outside the level's set stay bit-identical."""
    if len(data) == 0:
        raise ValueError("fine-tuning needs at least one training sample")
    model = checkpoint.clone()
    model.frozen_bn = frozen_batchnorms(level, model)
    trace = train_model(model, data, config, seed, trainable=sorted(trainable_set(level, model)))
    model.frozen_bn = frozenset()
    return model, trace


def kshot_protocol(n_subjects: int, shots: int, seed, pool: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle, keep the first ``pool`` as the training pool and train on its first ``shots``.

    Everything outside the pool is the test set.
    """
    if not 1 <= shots <= pool:
        raise ValueError(f"need 1 <= shots <= pool, got shots={shots}, pool={pool}")
    if pool >= n_subjects:
        raise ValueError(f"pool of {pool} leaves no test subjects among {n_subjects}")
    order = np.random.default_rng(seed).permutation(n_subjects)
    return np.sort(order[:shots]), np.sort(order[pool:])


@dataclass
class TransferResult:
    records: dict[str, list[MetricsRecord]]  # scheme -> one record per repetition
    pretrain_loss: list[float]

    @property
    def schemes(self) -> list[str]:
        return list(self.records)

    def metric_matrix(self, scheme: str) -> np.ndarray:
        return np.array([[r.as_dict()[k] for k in METRICS] for r in self.records[scheme]])

    def medians(self, metric: str = "AUC") -> dict[str, float]:
        col = METRICS.index(metric)
        return {s: float(np.nanmedian(self.metric_matrix(s)[:, col])) for s in self.records}

    def pvalues(self, reference: str = BASELINE) -> dict[str, dict[str, float]]:
        """One-sided Wilcoxon signed-rank p of each scheme exceeding ``reference``."""
        ref = self.metric_matrix(reference)
        out = {}
        for s in self.records:
            if s == reference:
                continue
            m = self.metric_matrix(s)
            row = {}
            for j, k in enumerate(METRICS):
                try:
                    row[k] = wilcoxon_signed_rank(m[:, j], ref[:, j], alternative="greater").pvalue
                except ValueError:
                    row[k] = float("nan")
            out[s] = row
        return out


def scheme_name(level: int) -> str:
    return f"Level {level}"


def run_transfer(source: PreparedData, target: PreparedData, model_config: ModelConfig,
                 mappings: Sequence[np.ndarray], train_config: TrainConfig,
                 transfer_config: TransferConfig, seed: int = 0,
                 checkpoint: MahgcnParams | None = None) -> tuple[TransferResult, MahgcnParams]:
    """Pre-train on ``source`` (unless a checkpoint is given) and run the K-shot comparison.

    Repetition r uses split seed ``(seed, r)``. The baseline starts from
    ``init_params`` and runs the same fine-tuning loop with every tensor
    trainable.
    """
    tc = transfer_config
    trace: list[float] = []
    if checkpoint is None:
        checkpoint = init_params(model_config, mappings, seed=(seed, 0))
        trace = pretrain(checkpoint, source, replace(train_config, epochs=tc.pretrain_epochs), (seed, 1))
    ft_config = replace(train_config, epochs=tc.finetune_epochs)
    schemes = [scheme_name(lv) for lv in tc.levels] + [BASELINE]
    records: dict[str, list[MetricsRecord]] = {s: [] for s in schemes}
    for r in range(tc.repetitions):
        tr, te = kshot_protocol(len(target), tc.shots, (seed, r), tc.pool)
        train_data, test_data = target.take(tr), target.take(te)
        for lv in tc.levels:
            model, _ = finetune(checkpoint, lv, train_data, ft_config, (seed, r, lv))
            records[scheme_name(lv)].append(
                compute_metrics(predict(model, test_data), test_data.labels, fold=r))
        base = init_params(model_config, mappings, seed=(seed, 0))
        model, _ = finetune(base, 1, train_data, ft_config, (seed, r, 1))
        records[BASELINE].append(compute_metrics(predict(model, test_data), test_data.labels, fold=r))
    return TransferResult(records, trace), checkpoint


def split_by_group(data: PreparedData, held_out: Sequence[str]) -> tuple[PreparedData, PreparedData]:
    """Source = sites not in ``held_out``; target = the held-out sites."""
    held = np.isin(data.sites, list(held_out))
    if not held.any():
        raise ValueError(f"no subjects in held-out group {list(held_out)}")
    if held.all():
        raise ValueError("held-out group covers the whole cohort")
    return data.take(np.flatnonzero(~held)), data.take(np.flatnonzero(held))
