"""Table writers: delimited text for diffing plus JSON for tooling.

Every file starts with provenance (config hash, seed, package version) so
outputs can be traced to the run that produced them. Nothing time-dependent
is written, so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .stats import fdr_correct, permutation_chance, wilcoxon_signed_rank
from .train import METRICS, CVResult

log = logging.getLogger(__name__)


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(config: Mapping, seed: int, command: str) -> dict:
    return {"config_hash": config_hash(config), "seed": int(seed), "version": __version__,
            "command": command}


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if not np.isfinite(v) else v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    return v


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else repr(float(v))
    return str(v)


def write_table(stem: str | Path, columns: Sequence[str], rows: Sequence[Sequence], prov: Mapping) -> list[Path]:
    """Write ``stem.csv`` (provenance as ``#`` lines) and ``stem.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for k in sorted(prov):
        buf.write(f"# {k}: {prov[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    csv_path = stem.with_suffix(".csv")
    csv_path.write_text(buf.getvalue())
    json_path = stem.with_suffix(".json")
    payload = {"provenance": dict(prov), "columns": list(columns),
               "rows": [dict(zip(columns, _clean(list(r)))) for r in rows]}
    json_path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return [csv_path, json_path]


def write_json(path: str | Path, payload: Mapping, prov: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"provenance": dict(prov), **_clean(dict(payload))}, indent=1,
                               sort_keys=True) + "\n")
    return path


def mean_sd(values) -> str:
    """``mean±sd`` in percent with two decimals; NaN entries are skipped."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return "nan"
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    return f"{100 * v.mean():.2f}±{100 * sd:.2f}"


def _paired_p(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    ok = np.isfinite(a) & np.isfinite(b)
    try:
        return wilcoxon_signed_rank(a[ok], b[ok], alternative="greater").pvalue
    except ValueError:
        return float("nan")


def table1(cv: CVResult, reference: str = "MAHGCN") -> tuple[list[str], list[list]]:
    """Site-averaged metrics per method; p of ``reference`` beating each method (FDR over all cells)."""
    columns = ["method", *METRICS, *(f"p_{k}" for k in METRICS)]
    ref = cv.metric_matrix(reference)
    raw, cells = [], []
    for m in cv.methods:
        mat = cv.metric_matrix(m)
        row = [m, *(mean_sd(mat[:, j]) for j in range(len(METRICS)))]
        ps = [float("nan")] * len(METRICS) if m == reference else \
            [_paired_p(ref[:, j], mat[:, j]) for j in range(len(METRICS))]
        raw.append(row)
        cells.append(ps)
    flat = np.array(cells, dtype=float).ravel()
    ok = np.isfinite(flat)
    adj = flat.copy()
    if ok.any():
        adj[ok] = fdr_correct(flat[ok])
    adj = adj.reshape(len(cells), len(METRICS))
    return columns, [r + list(a) for r, a in zip(raw, adj)]


def table2(cv: CVResult, method: str = "MAHGCN", n_perm_per_fold: int = 100,
           seed: int = 0) -> tuple[list[str], list[list]]:
    """Per-site metrics of ``method`` with permutation chance-level p values.

    Folds where a site's test subjects are all one class are left out of
    that site's chance test.
    """
    columns = ["site", "n_folds", *METRICS, *(f"p_{k}" for k in METRICS)]
    folds = cv.folds[method]
    sites = sorted({s for fr in folds for s in fr.site_specific})
    rows = []
    for k, site in enumerate(sites):
        mat = cv.site_matrix(method, site)
        preds, labels = [], []
        for fr in folds:
            sel = fr.test_sites == site
            y = fr.test_labels[sel]
            if y.size and y.min() != y.max():
                preds.append(fr.scores[sel])
                labels.append(y)
        if preds:
            chance = permutation_chance(preds, labels, n_perm_per_fold, seed=(seed, k))
            ps = [chance.pvalues[m] for m in METRICS]
        else:
            ps = [float("nan")] * len(METRICS)
        rows.append([site, len(mat), *(mean_sd(mat[:, j]) for j in range(len(METRICS))), *ps])
    return columns, rows


def table3(result, reference: str = "baseline") -> tuple[list[str], list[list]]:
    """Transfer schemes: metrics over K-shot repetitions and p of beating the baseline."""
    columns = ["scheme", *METRICS, *(f"p_{k}" for k in METRICS)]
    pvals = result.pvalues(reference)
    rows = []
    for s in result.schemes:
        mat = result.metric_matrix(s)
        ps = [pvals[s][k] for k in METRICS] if s in pvals else [float("nan")] * len(METRICS)
        rows.append([s, *(mean_sd(mat[:, j]) for j in range(len(METRICS))), *ps])
    return columns, rows
