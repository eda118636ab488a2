"""Subjects, cohorts, manifest ingestion, synthetic cohorts and k-fold splits."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .atlas import MultiscaleAtlasSet, synth_hierarchy
from .bfn import read_matrix, write_matrix

DIAGNOSES = ("HC", "ASD", "ADHD", "MCI", "AD", "VCI")
DISORDERS = DIAGNOSES[1:]
GENDERS = ("M", "F")
_SCALE_COL = re.compile(r"^scale_(\d+)$")


class CohortError(ValueError):
    pass


class MissingFileError(CohortError):
    pass


class ShapeMismatchError(CohortError):
    pass


class DuplicateSubjectError(CohortError):
    pass


class CovariateError(CohortError):
    pass


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    subject_id: str
    site_id: str
    scanner_id: str
    diagnosis: str
    age: float
    gender: str
    signals: Mapping[int, np.ndarray] = field(default_factory=dict, repr=False)
    networks: Mapping[int, np.ndarray] = field(default_factory=dict, repr=False)
    severity: float | None = None

    def __post_init__(self):
        for name in ("subject_id", "site_id", "scanner_id"):
            if not str(getattr(self, name)):
                raise CovariateError(f"subject {self.subject_id!r}: empty {name}")
        if self.diagnosis not in DIAGNOSES:
            raise CovariateError(f"subject {self.subject_id}: unknown diagnosis {self.diagnosis!r}")
        if self.gender not in GENDERS:
            raise CovariateError(f"subject {self.subject_id}: unknown gender {self.gender!r}")
        if not (math.isfinite(self.age) and self.age > 0):
            raise CovariateError(f"subject {self.subject_id}: age must be > 0, got {self.age}")
        for scale, sig in self.signals.items():
            if np.shape(sig)[0] != scale:
                raise ShapeMismatchError(
                    f"subject {self.subject_id}: scale {scale} signals have {np.shape(sig)[0]} rows")
        for scale, net in self.networks.items():
            if np.shape(net) != (scale, scale):
                raise ShapeMismatchError(
                    f"subject {self.subject_id}: scale {scale} network has shape {np.shape(net)}")

    @property
    def binary_label(self) -> str:
        return "HC" if self.diagnosis == "HC" else "BD"

    @property
    def label(self) -> int:
        """0 for HC, 1 for BD."""
        return int(self.diagnosis != "HC")


@dataclass(frozen=True, eq=False)
class Cohort:
    subjects: tuple[SubjectRecord, ...]
    scales: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        seen = set()
        for s in self.subjects:
            if s.subject_id in seen:
                raise DuplicateSubjectError(f"duplicate subject_id {s.subject_id!r}")
            seen.add(s.subject_id)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=int)

    @property
    def sites(self) -> np.ndarray:
        return np.array([s.site_id for s in self.subjects])

    @property
    def scanners(self) -> np.ndarray:
        return np.array([s.scanner_id for s in self.subjects])

    def networks(self, scale: int, index=None) -> np.ndarray:
        """Stacked ``(n, scale, scale)`` networks for ``scale``."""
        subs = self.subjects if index is None else [self.subjects[i] for i in index]
        try:
            return np.stack([s.networks[scale] for s in subs])
        except KeyError:
            raise CohortError(f"networks at scale {scale} missing for some subjects") from None

    def require_networks(self) -> None:
        for s in self.subjects:
            missing = [k for k in self.scales if k not in s.networks]
            if missing:
                raise CohortError(f"subject {s.subject_id}: no networks at scales {missing}")

    def subset(self, index) -> "Cohort":
        return Cohort(tuple(self.subjects[i] for i in index), self.scales)

    def with_networks(self, networks: Mapping[int, np.ndarray]) -> "Cohort":
        """Copy with networks replaced by ``networks[scale][subject]``."""
        subs = tuple(
            replace(s, networks={k: networks[k][i] for k in self.scales})
            for i, s in enumerate(self.subjects)
        )
        return Cohort(subs, self.scales)


# -- manifest I/O ------------------------------------------------------------

MANIFEST_FIELDS = ("subject_id", "site_id", "scanner_id", "diagnosis", "age", "gender")


def _scale_columns(header: Sequence[str]) -> list[tuple[str, int]]:
    cols = []
    for name in header:
        m = _SCALE_COL.match(name.strip())
        if m:
            cols.append((name, int(m.group(1))))
    return cols


def _looks_like_network(m: np.ndarray) -> bool:
    return m.shape[0] == m.shape[1] and np.allclose(m, m.T) and np.allclose(np.diag(m), 1.0)


def load_cohort(manifest_path: str | Path, kind: str = "auto") -> Cohort:
    """Read a manifest and the per-subject, per-scale data files it lists.

    The manifest is comma-separated with a header: ``subject_id, site_id,
    scanner_id, diagnosis, age, gender`` then one ``scale_<S>`` column per
    scale holding a path (relative to the manifest). An optional
    ``severity`` column is carried through. ``kind`` selects time-series
    files (``"timeseries"``), network files (``"network"``) or guesses per
    file (``"auto"``: square, symmetric, unit-diagonal means network).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFileError(f"manifest {manifest_path} not found")
    base = manifest_path.parent
    with open(manifest_path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise CohortError(f"{manifest_path}: empty manifest")
    header = [h.strip() for h in rows[0]]
    missing = [f for f in MANIFEST_FIELDS if f not in header]
    if missing:
        raise CohortError(f"{manifest_path}: missing columns {missing}")
    scale_cols = _scale_columns(header)
    if not scale_cols:
        raise CohortError(f"{manifest_path}: no scale_<S> columns")
    scales = [s for _, s in scale_cols]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise CohortError(f"{manifest_path}: scale columns must be strictly increasing, got {scales}")
    col = {name: i for i, name in enumerate(header)}

    subjects, seen = [], set()
    for row in rows[1:]:
        rec = {name: row[i].strip() if i < len(row) else "" for name, i in col.items()}
        sid = rec["subject_id"]
        if sid in seen:
            raise DuplicateSubjectError(f"duplicate subject_id {sid!r} in {manifest_path}")
        seen.add(sid)
        try:
            age = float(rec["age"])
        except ValueError:
            raise CovariateError(f"subject {sid}: unparseable age {rec['age']!r}") from None
        severity = None
        if rec.get("severity"):
            try:
                severity = float(rec["severity"])
            except ValueError:
                raise CovariateError(f"subject {sid}: unparseable severity {rec['severity']!r}") from None
        signals, networks = {}, {}
        for name, scale in scale_cols:
            path = base / rec[name]
            if not rec[name] or not path.exists():
                raise MissingFileError(f"subject {sid}: file for scale {scale} not found ({path})")
            try:
                m = read_matrix(path)
            except ValueError as exc:
                raise CohortError(f"subject {sid}: cannot parse {path} ({exc})") from None
            if m.shape[0] != scale:
                raise ShapeMismatchError(
                    f"subject {sid}: {path.name} has {m.shape[0]} rows, scale {scale} expects {scale}")
            is_net = kind == "network" or (kind == "auto" and _looks_like_network(m))
            if is_net:
                if m.shape != (scale, scale):
                    raise ShapeMismatchError(f"subject {sid}: network {path.name} has shape {m.shape}")
                networks[scale] = m
            else:
                signals[scale] = m
        subjects.append(SubjectRecord(
            subject_id=sid, site_id=rec["site_id"], scanner_id=rec["scanner_id"],
            diagnosis=rec["diagnosis"], age=age, gender=rec["gender"],
            signals=signals, networks=networks, severity=severity,
        ))
    return Cohort(tuple(subjects), tuple(scales))


def save_cohort(cohort: Cohort, directory: str | Path, what: str = "networks",
                header_comment: str | None = None) -> Path:
    """Write a manifest plus one data file per subject and scale.

    ``what`` chooses ``"networks"`` or ``"signals"``. Returns the manifest path.
    """
    directory = Path(directory)
    data_dir = directory / what
    data_dir.mkdir(parents=True, exist_ok=True)
    has_severity = any(s.severity is not None for s in cohort.subjects)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(MANIFEST_FIELDS) + (["severity"] if has_severity else [])
                   + [f"scale_{k}" for k in cohort.scales])
        for s in cohort.subjects:
            paths = []
            source = s.networks if what == "networks" else s.signals
            for k in cohort.scales:
                rel = f"{what}/{s.subject_id}_s{k}.csv"
                write_matrix(directory / rel, source[k])
                paths.append(rel)
            extra = [repr(float(s.severity)) if s.severity is not None else ""] if has_severity else []
            w.writerow([s.subject_id, s.site_id, s.scanner_id, s.diagnosis, repr(float(s.age)),
                        s.gender] + extra + paths)
    return manifest


# -- synthetic cohorts -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic cohort with planted effects.

    ``noise_level`` is the latent loading sd of the base connectivity model,
    either one value or one per scale;
    ``planted_scales`` limits the planted effect to some scales (default all).
    ``scale_expression`` is the probability that a BD subject expresses the
    effect at any one planted scale, drawn independently per scale, so with
    values below 1 no single scale carries the whole signal.
    """

    n_sites: int = 3
    subjects_per_site: int = 100
    class_ratio_per_site: float = 0.5
    scales: tuple[int, ...] = (20, 40)
    site_shift_magnitude: float = 0.0
    site_noise_scale: float = 0.0
    planted_rsn: int = 6
    planted_effect_size: float = 0.3
    severity_continuum: bool = False
    rng_seed: int = 0
    noise_level: float | tuple[float, ...] = 0.5
    planted_scales: tuple[int, ...] | None = None
    site_disorders: tuple[str, ...] | None = None
    scale_expression: float = 1.0

    @property
    def noise_levels(self) -> tuple[float, ...]:
        if isinstance(self.noise_level, tuple):
            return self.noise_level
        return (float(self.noise_level),) * len(self.scales)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.planted_scales is not None:
            object.__setattr__(self, "planted_scales", tuple(int(s) for s in self.planted_scales))
        if self.site_disorders is not None:
            object.__setattr__(self, "site_disorders", tuple(self.site_disorders))
        if self.n_sites < 1 or self.subjects_per_site < 1:
            raise ValueError("n_sites and subjects_per_site must be >= 1")
        if not 0.0 < self.class_ratio_per_site < 1.0:
            raise ValueError("class_ratio_per_site must lie in (0, 1)")
        if not self.scales or any(s < 1 for s in self.scales):
            raise ValueError(f"invalid scales {self.scales}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {self.scales}")
        if not 0.0 <= self.scale_expression <= 1.0:
            raise ValueError("scale_expression must lie in [0, 1]")
        if self.planted_effect_size < 0:
            raise ValueError("planted_effect_size must be >= 0")
        if not isinstance(self.noise_level, (int, float)):
            object.__setattr__(self, "noise_level", tuple(float(v) for v in self.noise_level))
            if len(self.noise_level) != len(self.scales):
                raise ValueError("noise_level needs one value per scale")
        if self.site_noise_scale < 0 or min(self.noise_levels) < 0:
            raise ValueError("noise scales must be >= 0")
        if self.planted_scales and not set(self.planted_scales) <= set(self.scales):
            raise ValueError("planted_scales must be a subset of scales")
        if self.site_disorders is not None:
            if len(self.site_disorders) != self.n_sites or not set(self.site_disorders) <= set(DISORDERS):
                raise ValueError("site_disorders needs one disorder name per site")


_YOUNG = ("ASD", "ADHD")


def _latent_correlation(n: int, rank: int, loading: float, rng: np.random.Generator) -> np.ndarray:
    lam = rng.normal(0.0, loading, size=(n, rank))
    psi = rng.uniform(0.5, 1.5, size=n)
    cov = lam @ lam.T + np.diag(psi)
    d = 1.0 / np.sqrt(np.diag(cov))
    return cov * d[:, None] * d[None, :]


def _site_levels(n_sites: int) -> np.ndarray:
    if n_sites == 1:
        return np.zeros(1)
    return np.arange(n_sites) / (n_sites - 1)


def generate_synthetic(spec: SyntheticSpec, atlas: MultiscaleAtlasSet | None = None) -> Cohort:
    """Sample a cohort whose networks carry site effects and a planted RSN effect.

    Each off-diagonal edge is ``base * site_noise + site_shift + effect``:
    ``base`` comes from a rank-4 latent factor correlation model drawn per
    subject and scale, site k gets shift ``magnitude * k / (K - 1)`` and
    noise factor ``exp(site_noise_scale * (2k / (K - 1) - 1))``, and BD
    subjects get ``planted_effect_size`` (times severity when the continuum
    is on) on every edge inside the planted RSN. Matrices are clipped to
    [-1, 1] with unit diagonal. HC subjects carry severity 0.
    """
    atlas = atlas or synth_hierarchy(spec.scales, seed=spec.rng_seed)
    if atlas.n_rois != list(spec.scales):
        raise ValueError(f"atlas scales {atlas.n_rois} differ from spec scales {list(spec.scales)}")
    rng = np.random.default_rng(spec.rng_seed)
    planted = set(spec.planted_scales or spec.scales)
    masks = {}
    for sc in atlas.scales:
        inside = sc.rsn_label == spec.planted_rsn
        m = np.outer(inside, inside).astype(float)
        np.fill_diagonal(m, 0.0)
        masks[sc.n_rois] = m if sc.n_rois in planted else np.zeros_like(m)

    levels = _site_levels(spec.n_sites)
    disorders = spec.site_disorders or tuple(DISORDERS[k % len(DISORDERS)] for k in range(spec.n_sites))
    subjects = []
    for k in range(spec.n_sites):
        shift = spec.site_shift_magnitude * levels[k]
        noise = math.exp(spec.site_noise_scale * (2.0 * levels[k] - 1.0)) if spec.n_sites > 1 else 1.0
        n = spec.subjects_per_site
        n_hc = math.ceil(spec.class_ratio_per_site * n)
        labels = rng.permutation(np.r_[np.zeros(n_hc, int), np.ones(n - n_hc, int)])
        lo = rng.uniform(8.0, 14.0) if disorders[k] in _YOUNG else rng.uniform(60.0, 68.0)
        ages = rng.uniform(lo, lo + 12.0, size=n)
        genders = np.where(rng.random(n) < 0.5, "M", "F")
        for i in range(n):
            bd = labels[i] == 1
            severity = (rng.uniform(0.0, 1.0) if spec.severity_continuum else 1.0) if bd else 0.0
            nets = {}
            for scale, level in zip(spec.scales, spec.noise_levels):
                w = _latent_correlation(scale, 4, level, rng) * noise + shift
                expressed = spec.scale_expression == 1.0 or rng.random() < spec.scale_expression
                if bd and expressed:
                    w = w + spec.planted_effect_size * severity * masks[scale]
                w = np.clip((w + w.T) / 2.0, -1.0, 1.0)
                np.fill_diagonal(w, 1.0)
                nets[scale] = w
            subjects.append(SubjectRecord(
                subject_id=f"s{k:02d}_{i:04d}", site_id=f"site{k}", scanner_id=f"scanner{k}",
                diagnosis=disorders[k] if bd else "HC", age=float(ages[i]), gender=str(genders[i]),
                networks=nets, severity=float(severity),
            ))
    return Cohort(tuple(subjects), spec.scales)


def sample_timeseries(network: np.ndarray, n_timepoints: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian ROI signals whose population correlation is ``network``.

    Non positive-definite inputs are projected by clipping eigenvalues.
    """
    vals, vecs = np.linalg.eigh(network)
    root = vecs * np.sqrt(np.clip(vals, 1e-6, None))
    return root @ rng.standard_normal((network.shape[0], n_timepoints))


# -- cross-validation ----------------------------------------------------------

def split_kfold(n: int | Cohort, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold split; fold sizes differ by at most one."""
    n = len(n) if isinstance(n, Cohort) else int(n)
    if not 2 <= k <= n:
        raise ValueError(f"k must lie in [2, {n}], got {k}")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out
