"""Multiscale atlas-guided hierarchical GCN and its single-scale baseline.

Graph convolution: ``relu(D^-1/2 (A + I) D^-1/2 h W)`` with ``D`` built from
absolute row sums, so signed correlation networks stay well defined.
Pooling between adjacent scales is ``M^T h`` with the binary overlap
mapping ``M``. Each scale's GCN output is mean-pooled over nodes and the
per-scale vectors are concatenated before four fully connected layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine as E
from .engine import Tensor


@dataclass(frozen=True)
class ModelConfig:
    scales: tuple[int, ...]  # coarse to fine, as in the atlas
    hidden_dim: int = 64
    fl_widths: tuple[int, ...] = (256, 64, 16)
    dropout: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "fl_widths", tuple(int(w) for w in self.fl_widths))
        if len(self.fl_widths) != 3:
            raise ValueError("fl_widths lists the three hidden FL widths (FL-4 outputs 2)")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {self.scales}")

    def to_dict(self) -> dict:
        return {"scales": list(self.scales), "hidden_dim": self.hidden_dim,
                "fl_widths": list(self.fl_widths), "dropout": self.dropout}


@dataclass
class MahgcnParams:
    """Weights, batchnorm buffers and pooling mappings.

    GCN layers are ordered finest to coarsest (``gcn.0`` reads the finest
    network with identity node features). ``mappings[k]`` pools the output
    of ``gcn.k`` onto the node set of ``gcn.k+1``.
    """

    config: ModelConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    mappings: list[np.ndarray] = field(default_factory=list)
    # batchnorm layers kept in eval behaviour during training (fine-tuning)
    frozen_bn: frozenset[int] = frozenset()

    @property
    def n_gcn(self) -> int:
        return len(self.config.scales)

    @property
    def gcn_scales(self) -> list[int]:
        """Scales in layer order (finest first)."""
        return list(reversed(self.config.scales))

    def state(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.tensors.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {t.data.shape}")
            t.data = np.array(state[k], dtype=float)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=float)

    def clone(self) -> "MahgcnParams":
        tensors = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()}
        return MahgcnParams(self.config, tensors, {k: v.copy() for k, v in self.buffers.items()},
                            [m.copy() for m in self.mappings])

    def save(self, path) -> None:
        meta = {"config": self.config.to_dict(), "n_mappings": len(self.mappings)}
        arrays = self.state()
        for k, m in enumerate(self.mappings):
            arrays[f"mapping.{k}"] = m
        E.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "MahgcnParams":
        arrays, meta = E.load_checkpoint(path)
        cfg = meta["config"]
        config = ModelConfig(tuple(cfg["scales"]), cfg["hidden_dim"], tuple(cfg["fl_widths"]), cfg["dropout"])
        mappings = [arrays.pop(f"mapping.{k}") for k in range(meta["n_mappings"])]
        params = init_params(config, mappings, seed=0)
        params.load_state(arrays)
        return params


@dataclass
class ForwardTrace:
    feature_maps: list[Tensor]  # per GCN layer, finest first, (batch, nodes, d)
    readouts: list[Tensor]
    fl_outputs: list[Tensor]  # FL-1..FL-3 after batchnorm + ReLU
    logits: Tensor
    probabilities: np.ndarray

    @property
    def deep_features(self) -> np.ndarray:
        return self.fl_outputs[2].data


def init_params(config: ModelConfig, mappings: Sequence[np.ndarray] = (), seed: int = 0) -> MahgcnParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit BN scale."""
    mappings = [np.asarray(m, dtype=float) for m in mappings]
    scales = list(reversed(config.scales))
    if len(mappings) != len(scales) - 1:
        raise ValueError(f"{len(scales)} scales need {len(scales) - 1} mappings, got {len(mappings)}")
    for k, m in enumerate(mappings):
        if m.shape != (scales[k], scales[k + 1]):
            raise ValueError(f"mapping {k} has shape {m.shape}, expected {(scales[k], scales[k + 1])}")
    rng = np.random.default_rng(seed)
    d = config.hidden_dim
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    for k, n in enumerate(scales):
        fan_in = n if k == 0 else d
        tensors[f"gcn.{k}.weight"] = Tensor(uniform(fan_in, (fan_in, d)), True, f"gcn.{k}.weight")
    widths = [d * len(scales), *config.fl_widths, 2]
    for i in range(4):
        w_name, b_name = f"fl.{i}.weight", f"fl.{i}.bias"
        tensors[w_name] = Tensor(uniform(widths[i], (widths[i], widths[i + 1])), True, w_name)
        tensors[b_name] = Tensor(np.zeros(widths[i + 1]), True, b_name)
        if i < 3:
            tensors[f"bn.{i}.gamma"] = Tensor(np.ones(widths[i + 1]), True, f"bn.{i}.gamma")
            tensors[f"bn.{i}.beta"] = Tensor(np.zeros(widths[i + 1]), True, f"bn.{i}.beta")
            buffers[f"bn.{i}.running_mean"] = np.zeros(widths[i + 1])
            buffers[f"bn.{i}.running_var"] = np.ones(widths[i + 1])
    return MahgcnParams(config, tensors, buffers, mappings)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with D the absolute row sums of ``A + I``.

    Works on a single matrix or a stack ``(..., n, n)``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("adjacency has non-finite entries")
    n = a.shape[-1]
    a_tilde = a + np.eye(n)
    deg = np.abs(a_tilde).sum(axis=-1)
    if np.any(deg == 0):
        raise ValueError("adjacency has a zero absolute row sum")
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a_tilde * inv_sqrt[..., :, None] * inv_sqrt[..., None, :]


def gcn_layer(a_norm, h: Tensor | None, weight: Tensor, train: bool = False,
              dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """One graph convolution on a pre-normalised adjacency.

    ``h=None`` stands for identity node features, so the product reduces to
    ``a_norm @ W``.
    """
    hw = weight if h is None else E.matmul(h, weight)
    out = E.relu(E.matmul(a_norm, hw))
    return E.dropout(out, dropout, train, rng)


def atlas_pool(h: Tensor, mapping: np.ndarray) -> Tensor:
    """Coarse node features as sums of their member fine nodes: ``M^T h``."""
    mapping = np.asarray(mapping, dtype=float)
    if mapping.shape[0] != h.shape[-2]:
        raise ValueError(f"mapping has {mapping.shape[0]} rows for {h.shape[-2]} nodes")
    return E.matmul(Tensor(mapping.T), h)


def forward(params: MahgcnParams, adjacency: Sequence[np.ndarray], train: bool = False,
            rng: np.random.Generator | None = None, update_stats: bool = True) -> ForwardTrace:
    """Full forward pass.

    ``adjacency`` lists normalised adjacency stacks ``(batch, n, n)`` in GCN
    layer order (finest first); see :func:`prepare_adjacency`.
    """
    cfg = params.config
    t = params.tensors
    if len(adjacency) != params.n_gcn:
        raise ValueError(f"expected {params.n_gcn} adjacency stacks, got {len(adjacency)}")
    for k, (a, n) in enumerate(zip(adjacency, params.gcn_scales)):
        if a.shape[-2:] != (n, n):
            raise ValueError(f"layer {k}: adjacency {a.shape[-2:]} does not match scale {n}")
    maps, readouts = [], []
    h = None
    for k, a in enumerate(adjacency):
        if k > 0:
            h = atlas_pool(h, params.mappings[k - 1])
        h = gcn_layer(a, h, t[f"gcn.{k}.weight"], train, cfg.dropout, rng)
        maps.append(h)
        readouts.append(E.mean_rows(h))
    x = E.concat_cols(readouts) if len(readouts) > 1 else readouts[0]
    fl_outputs = []
    for i in range(3):
        z = E.add(E.matmul(x, t[f"fl.{i}.weight"]), t[f"fl.{i}.bias"])
        z = E.batchnorm(z, t[f"bn.{i}.gamma"], t[f"bn.{i}.beta"],
                        params.buffers[f"bn.{i}.running_mean"], params.buffers[f"bn.{i}.running_var"],
                        train=train and i not in params.frozen_bn, update_stats=update_stats)
        x = E.relu(z)
        fl_outputs.append(x)
    logits = E.add(E.matmul(x, t["fl.3.weight"]), t["fl.3.bias"])
    return ForwardTrace(maps, readouts, fl_outputs, logits, E.softmax(logits.data))


def prepare_adjacency(networks_by_scale: dict[int, np.ndarray], params_or_scales) -> list[np.ndarray]:
    """Normalise stacked networks and order them finest first."""
    scales = (params_or_scales.gcn_scales if isinstance(params_or_scales, MahgcnParams)
              else sorted(params_or_scales, reverse=True))
    return [normalize_adjacency(networks_by_scale[s]) for s in scales]


def single_scale_config(config: ModelConfig, scale: int) -> ModelConfig:
    return ModelConfig((scale,), config.hidden_dim, config.fl_widths, config.dropout)


def single_scale_forward(params: MahgcnParams, adjacency: np.ndarray, train: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Logits of a one-scale model (one GCN layer, same head)."""
    if params.n_gcn != 1:
        raise ValueError("single_scale_forward needs a one-scale parameter set")
    return forward(params, [adjacency], train, rng).logits
