"""ComBat harmonization of edge features across scanners.

Location/scale model per feature ``y = alpha + C beta + gamma_b + delta_b e``
with parametric empirical Bayes shrinkage of the per-batch ``gamma_b`` and
``delta_b`` (normal and inverse-gamma priors). Covariate effects are
estimated jointly with the batch effects and added back after adjustment.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bfn import from_upper_triangle, upper_triangle
from .cohort import DIAGNOSES, Cohort

log = logging.getLogger(__name__)


class CombatError(ValueError):
    pass


@dataclass
class DesignInfo:
    """How covariate columns were built, so new subjects get the same coding."""

    age_center: float
    diagnosis_levels: tuple[str, ...]  # indicator columns (reference level excluded)
    columns: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"age_center": self.age_center, "diagnosis_levels": list(self.diagnosis_levels),
                "columns": list(self.columns)}


def covariate_design(cohort: Cohort, info: DesignInfo | None = None) -> tuple[np.ndarray, DesignInfo]:
    """Centered age, gender indicator (M=1) and diagnosis indicators.

    Diagnosis uses the six-level label; HC (or the first level present) is
    the reference. Passing ``info`` reuses a previous coding.
    """
    ages = np.array([s.age for s in cohort.subjects], dtype=float)
    diag = [s.diagnosis for s in cohort.subjects]
    if info is None:
        present = [d for d in DIAGNOSES if d in set(diag)]
        levels = tuple(present[1:])
        info = DesignInfo(float(ages.mean()), levels, ("age", "gender_M", *(f"dx_{d}" for d in levels)))
    cols = [ages - info.age_center, np.array([s.gender == "M" for s in cohort.subjects], dtype=float)]
    cols += [np.array([d == lev for d in diag], dtype=float) for lev in info.diagnosis_levels]
    return np.column_stack(cols), info


@dataclass
class CombatModel:
    feature_mean: np.ndarray  # (features,) grand mean alpha
    covariate_coeffs: np.ndarray  # (covariates, features)
    pooled_var: np.ndarray  # (features,)
    site_additive: np.ndarray  # (batches, features) gamma*
    site_multiplicative: np.ndarray  # (batches, features) delta*, variance scale
    site_index: tuple[str, ...]
    converged: bool = True
    iterations: int = 0
    design: DesignInfo | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n_b, n_f = self.site_additive.shape
        if self.site_multiplicative.shape != (n_b, n_f) or len(self.site_index) != n_b:
            raise CombatError("inconsistent batch dimensions")
        if self.feature_mean.shape != (n_f,) or self.pooled_var.shape != (n_f,):
            raise CombatError("inconsistent feature dimensions")
        if self.covariate_coeffs.ndim != 2 or self.covariate_coeffs.shape[1] != n_f:
            raise CombatError("covariate coefficients do not match the feature count")
        if np.any(self.site_multiplicative <= 0):
            raise CombatError("site_multiplicative must be positive")

    def to_dict(self) -> dict:
        out = {
            "site_index": list(self.site_index),
            "converged": self.converged,
            "iterations": self.iterations,
            "feature_mean": self.feature_mean.tolist(),
            "covariate_coeffs": self.covariate_coeffs.tolist(),
            "pooled_var": self.pooled_var.tolist(),
            "site_additive": self.site_additive.tolist(),
            "site_multiplicative": self.site_multiplicative.tolist(),
        }
        if self.design is not None:
            out["design"] = self.design.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CombatModel":
        design = d.get("design")
        n_f = len(d["feature_mean"])
        return cls(
            feature_mean=np.array(d["feature_mean"], dtype=float),
            covariate_coeffs=np.array(d["covariate_coeffs"], dtype=float).reshape(-1, n_f),
            pooled_var=np.array(d["pooled_var"], dtype=float),
            site_additive=np.array(d["site_additive"], dtype=float),
            site_multiplicative=np.array(d["site_multiplicative"], dtype=float),
            site_index=tuple(d["site_index"]),
            converged=bool(d.get("converged", True)),
            iterations=int(d.get("iterations", 0)),
            design=None if design is None else DesignInfo(
                float(design["age_center"]), tuple(design["diagnosis_levels"]), tuple(design["columns"])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CombatModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _batch_codes(batch: Sequence, catalogue: Sequence[str] | None = None) -> tuple[np.ndarray, tuple[str, ...]]:
    labels = [str(b) for b in batch]
    if catalogue is None:
        catalogue = tuple(sorted(set(labels)))
    lookup = {b: i for i, b in enumerate(catalogue)}
    unknown = sorted(set(labels) - set(lookup))
    if unknown:
        raise CombatError(f"batches unknown to the model: {unknown}")
    return np.array([lookup[b] for b in labels], dtype=int), tuple(catalogue)


def _inverse_gamma_prior(delta_hat: np.ndarray) -> tuple[float, float]:
    m = delta_hat.mean()
    s2 = delta_hat.var(ddof=1) if delta_hat.size > 1 else 0.0
    if s2 <= 0:
        # no spread across features: a sharp prior at the common value
        s2 = 1e-8 * max(m * m, 1e-12)
    return (2.0 * s2 + m * m) / s2, (m * s2 + m ** 3) / s2


def _eb_iterate(sdat, g_hat, d_hat, g_bar, t2, a, b, tol, max_iter):
    """Joint posterior mean of gamma and posterior variance of delta for one batch."""
    n = sdat.shape[0]
    g_old, d_old = g_hat.copy(), d_hat.copy()
    for it in range(1, max_iter + 1):
        g_new = (t2 * n * g_hat + d_old * g_bar) / (t2 * n + d_old)
        sum2 = ((sdat - g_new) ** 2).sum(axis=0)
        d_new = (0.5 * sum2 + b) / (n / 2.0 + a - 1.0)
        change = max(np.max(np.abs(g_new - g_old)), np.max(np.abs(d_new - d_old)))
        g_old, d_old = g_new, d_new
        if change < tol:
            return g_new, d_new, True, it
    return g_old, d_old, False, max_iter


def fit_combat(features, batch, covariates=None, tol: float = 1e-6, max_iter: int = 200,
               design: DesignInfo | None = None) -> CombatModel:
    """Estimate ComBat parameters.

    Parameters
    ----------
    features : (subjects, features) array
    batch : per-subject batch labels (scanner ids)
    covariates : (subjects, p) design columns without intercept, or None

    Non-convergence is logged and the last iterate is kept.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise CombatError("features must be a subjects x features matrix")
    if not np.all(np.isfinite(x)):
        raise CombatError("features contain non-finite values")
    n, n_feat = x.shape
    codes, catalogue = _batch_codes(batch)
    if codes.size != n:
        raise CombatError(f"{codes.size} batch labels for {n} subjects")
    n_batch = len(catalogue)
    counts = np.bincount(codes, minlength=n_batch)
    small = [catalogue[i] for i in np.flatnonzero(counts < 2)]
    if small:
        raise CombatError(f"batches with fewer than 2 subjects: {small}")
    cov = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=float).reshape(n, -1)
    onehot = np.eye(n_batch)[codes]
    full = np.hstack([onehot, cov])
    if np.linalg.matrix_rank(full) < full.shape[1]:
        raise CombatError("design matrix (batch indicators + covariates) is singular")

    coef, *_ = np.linalg.lstsq(full, x, rcond=None)
    batch_coef, cov_coef = coef[:n_batch], coef[n_batch:]
    grand = (counts / n) @ batch_coef
    var_pooled = ((x - full @ coef) ** 2).mean(axis=0)
    if np.any(var_pooled > 0):
        var_pooled[var_pooled == 0] = np.median(var_pooled[var_pooled > 0])
    else:
        var_pooled[:] = 1.0
    sd = np.sqrt(var_pooled)
    sdat = (x - grand - cov @ cov_coef) / sd

    if n_batch == 1:
        # nothing to separate from the grand mean: identity adjustment
        gamma = np.zeros((1, n_feat))
        delta = np.ones((1, n_feat))
        return CombatModel(grand, cov_coef, var_pooled, gamma, delta, catalogue, True, 0, design)

    gamma_hat = np.linalg.lstsq(onehot, sdat, rcond=None)[0]
    gamma = np.empty_like(gamma_hat)
    delta = np.empty_like(gamma_hat)
    converged, iterations = True, 0
    for i in range(n_batch):
        rows = sdat[codes == i]
        d_hat = rows.var(axis=0, ddof=1)
        d_hat[d_hat == 0] = 1.0
        g_bar = gamma_hat[i].mean()
        t2 = gamma_hat[i].var(ddof=1) if n_feat > 1 else 0.0
        a, b = _inverse_gamma_prior(d_hat)
        g, d, ok, it = _eb_iterate(rows, gamma_hat[i], d_hat, g_bar, t2, a, b, tol, max_iter)
        gamma[i], delta[i] = g, d
        converged &= ok
        iterations = max(iterations, it)
    if not converged:
        log.warning("ComBat EB iterations did not converge within %d steps; keeping last iterate", max_iter)
    return CombatModel(grand, cov_coef, var_pooled, gamma, delta, catalogue, converged, iterations, design)


def apply_combat(model: CombatModel, features, batch, covariates=None) -> np.ndarray:
    """Remove batch location/scale effects; covariate effects are kept."""
    x = np.asarray(features, dtype=float)
    codes, _ = _batch_codes(batch, model.site_index)
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != model.feature_mean.size:
        raise CombatError(f"features must have {model.feature_mean.size} columns")
    if codes.size != n:
        raise CombatError(f"{codes.size} batch labels for {n} subjects")
    cov = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=float).reshape(n, -1)
    if cov.shape[1] != model.covariate_coeffs.shape[0]:
        raise CombatError(f"expected {model.covariate_coeffs.shape[0]} covariate columns, got {cov.shape[1]}")
    if model.site_index and len(model.site_index) == 1:
        return x.copy()
    sd = np.sqrt(model.pooled_var)
    mod_mean = cov @ model.covariate_coeffs
    sdat = (x - model.feature_mean - mod_mean) / sd
    adj = (sdat - model.site_additive[codes]) / np.sqrt(model.site_multiplicative[codes])
    return adj * sd + model.feature_mean + mod_mean


# -- cohort level ---------------------------------------------------------------------

def harmonize_cohort(cohort: Cohort, fit_index=None, tol: float = 1e-6,
                     max_iter: int = 200) -> tuple[Cohort, dict[int, CombatModel]]:
    """Harmonize every scale's upper-triangle edges by scanner.

    ``fit_index`` restricts fitting to a subset (fold-wise use); the fitted
    model is applied to all subjects. Harmonized edges are not re-clipped.
    """
    cohort.require_networks()
    fit_index = np.arange(len(cohort)) if fit_index is None else np.asarray(fit_index, dtype=int)
    fit_sub = cohort.subset(fit_index)
    design_fit, info = covariate_design(fit_sub)
    design_all, _ = covariate_design(cohort, info)
    scanners = cohort.scanners
    models: dict[int, CombatModel] = {}
    new_nets: dict[int, np.ndarray] = {}
    for scale in cohort.scales:
        feats = upper_triangle(cohort.networks(scale))
        model = fit_combat(feats[fit_index], scanners[fit_index], design_fit, tol, max_iter, design=info)
        models[scale] = model
        new_nets[scale] = from_upper_triangle(apply_combat(model, feats, scanners, design_all), scale)
    return cohort.with_networks(new_nets), models
