"""Acceptance criteria 1-9, each at its stated tolerance and runtime.

Every test prints one ``Criterion N: PASS|FAIL`` line (collected again in
the terminal summary). Criteria 4, 6 and 8 share the trained models of the
multiscale comparison, so run the whole module together. Marked ``slow``;
deselect with ``-m "not slow"``.
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml
from scipy.stats import spearmanr

from bdspectrum import engine as E
from bdspectrum.atlas import adjacent_mappings, synth_hierarchy
from bdspectrum.bfn import upper_triangle
from bdspectrum.cli import main
from bdspectrum.cohort import SyntheticSpec, generate_synthetic, split_kfold
from bdspectrum.harmonize import harmonize_cohort
from bdspectrum.interpret import consensus_map, fold_cams, rsn_aggregate
from bdspectrum.model import ModelConfig
from bdspectrum.spectrum import consensus_relation, deep_features, diffusion_embed, relation_matrix
from bdspectrum.stats import fdr_correct, mann_whitney_u, permutation_chance, wilcoxon_signed_rank
from bdspectrum.train import TrainConfig, cross_validate, predict, prepare
from bdspectrum.transfer import TransferConfig, run_transfer, scheme_name, split_by_group

from conftest import model_loss_fn, small_instance
from test_stats import mw_oracle, wilcoxon_oracle

pytestmark = pytest.mark.slow

RESULTS: dict[int, str] = {}

# multiscale comparison cohort: the planted effect is expressed at each scale
# independently (probability 0.7), so no single scale carries all of it
C4_SCALES = (20, 40, 60, 80, 100)
C4_SEEDS = (0, 1, 2)
SMALL_MODEL = dict(hidden_dim=8, fl_widths=(32, 16, 8))


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"Criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print("\n" + line)
    assert ok, line


def c4_spec(seed: int) -> SyntheticSpec:
    return SyntheticSpec(n_sites=3, subjects_per_site=200, scales=C4_SCALES, planted_effect_size=0.4,
                         noise_level=0.25, scale_expression=0.7, rng_seed=seed)


@pytest.fixture(scope="module")
def multiscale_runs():
    """Ten-fold CV of the multiscale model and every single-scale GCN, per seed."""
    runs, start = {}, time.perf_counter()
    for seed in C4_SEEDS:
        spec = c4_spec(seed)
        atlas = synth_hierarchy(spec.scales, seed=seed)
        cohort = generate_synthetic(spec, atlas)
        data = prepare(cohort)
        cv = cross_validate(data, atlas, ModelConfig(C4_SCALES, **SMALL_MODEL), TrainConfig(seed=seed),
                            splits=split_kfold(len(cohort), 10, seed))
        runs[seed] = (cohort, atlas, data, cv)
    return runs, time.perf_counter() - start


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    # Central differences carry truncation error where the step straddles a
    # ReLU kink and rounding error on tiny gradients, in opposite directions
    # of the step size. Each tensor is scored by its best of three steps; a
    # wrong gradient disagrees at every step.
    start = time.perf_counter()
    worst = []
    for seed in range(25):
        params, adj, labels, sites = small_instance(seed, scales=(10, 20, 30), hidden_dim=8)
        loss = model_loss_fn(params, adj, labels, sites)
        per_step = [E.gradient_check(loss, params.tensors, step=h, max_coords=40, rng=np.random.default_rng(seed))
                    for h in (1e-4, 1e-5, 1e-6)]
        worst.append(max(min(errs[name] for errs in per_step) for name in params.tensors))
    elapsed = time.perf_counter() - start
    ok = max(worst) < 1e-4 and elapsed < 60
    verdict(1, ok, f"max relative error {max(worst):.2e} over 25 instances (< 1e-4), {elapsed:.0f}s (< 60s)")


# -- 2 ---------------------------------------------------------------------------------

def _check_wilcoxon(d, mismatches):
    if not np.any(np.asarray(d) != 0):
        return
    for alt in ("two-sided", "greater", "less"):
        stat, p = wilcoxon_oracle(d, alt)
        res = wilcoxon_signed_rank(d, alternative=alt)
        if res.method != "exact" or abs(res.statistic - stat) > 1e-9 or abs(res.pvalue - p) > 1e-12:
            mismatches.append(("wilcoxon", tuple(d), alt))


def _check_mw(a, b, mismatches):
    for alt in ("two-sided", "greater", "less"):
        u, p = mw_oracle(np.asarray(a, float), np.asarray(b, float), alt)
        res = mann_whitney_u(a, b, alternative=alt)
        if res.method != "exact" or abs(res.statistic - u) > 1e-9 or abs(res.pvalue - p) > 1e-12:
            mismatches.append(("mann-whitney", tuple(a), tuple(b), alt))


def test_criterion_2_exact_statistics():
    # the tests see only the tie and sign pattern of the ranks, which small
    # integer values cover: exhaustive for short samples, random up to 10
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    bad, n_cases = [], 0
    # the signed-rank test needs at least 3 pairs
    for n in range(3, 7):
        for d in itertools.product(range(-2, 3), repeat=n):
            _check_wilcoxon(d, bad)
            n_cases += 1
    for _ in range(600):
        n = int(rng.integers(6, 11))
        d = rng.integers(-4, 5, size=n) if rng.random() < 0.7 else rng.normal(size=n)
        _check_wilcoxon(d, bad)
        n_cases += 1
    for total in range(2, 7):
        for m in range(1, total):
            for values in itertools.product(range(3), repeat=total):
                _check_mw(values[:m], values[m:], bad)
                n_cases += 1
    for _ in range(600):
        total = int(rng.integers(7, 11))
        m = int(rng.integers(1, total))
        v = rng.integers(0, 5, size=total) if rng.random() < 0.7 else rng.normal(size=total)
        _check_mw(v[:m], v[m:], bad)
        n_cases += 1
    bh = fdr_correct([0.01, 0.02, 0.03, 0.04])
    bh_ok = np.allclose(bh, [0.04] * 4, rtol=0, atol=1e-15)
    elapsed = time.perf_counter() - start
    ok = not bad and bh_ok and elapsed < 60
    verdict(2, ok, f"{len(bad)} oracle mismatches in {n_cases} inputs (x3 alternatives), "
                   f"BH {np.round(bh, 6).tolist()}, {elapsed:.0f}s (< 60s)")


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_3_harmonization_recovery():
    start = time.perf_counter()
    spec = SyntheticSpec(n_sites=3, subjects_per_site=200, scales=(20,), site_shift_magnitude=0.5,
                         planted_effect_size=0.3, rng_seed=0)
    atlas = synth_hierarchy(spec.scales, seed=0)
    cohort = generate_synthetic(spec, atlas)
    harmonized, _ = harmonize_cohort(cohort)
    planted = atlas.scales[0].rsn_label == spec.planted_rsn
    mask = np.outer(planted, planted)[np.triu_indices(20, 1)]

    def gaps(c):
        e = upper_triangle(c.networks(20))
        site_means = [e[c.scanners == s].mean() for s in sorted(set(c.scanners))]
        y = c.labels
        return np.ptp(site_means), e[y == 1][:, mask].mean() - e[y == 0][:, mask].mean()

    (site_pre, bd_pre), (site_post, bd_post) = gaps(cohort), gaps(harmonized)
    elapsed = time.perf_counter() - start
    ratio, drift = site_post / site_pre, abs(bd_post - bd_pre) / abs(bd_pre)
    ok = ratio < 0.1 and drift < 0.1 and elapsed < 120
    verdict(3, ok, f"scanner gap ratio {ratio:.4f} (< 0.10), planted gap change {drift:.3f} (< 0.10), "
                   f"{elapsed:.0f}s (< 120s)")


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_multiscale_advantage(multiscale_runs):
    runs, elapsed = multiscale_runs
    margins, parts = [], []
    for seed, (_, _, _, cv) in runs.items():
        acc = {m: float(np.nanmean(cv.metric_matrix(m)[:, 0])) for m in cv.methods}
        best = max((m for m in acc if m != "MAHGCN"), key=acc.get)
        margins.append(acc["MAHGCN"] - acc[best])
        parts.append(f"seed {seed}: {100 * acc['MAHGCN']:.1f} vs {best} {100 * acc[best]:.1f}")
    median = float(np.median(margins))
    ok = median >= 0.03 and elapsed < 1200
    verdict(4, ok, f"median margin {100 * median:+.1f} pp (>= +3.0); {'; '.join(parts)}; "
                   f"{elapsed:.0f}s (< 1200s)")


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_5_transfer_pattern():
    # source: three sites; target: a held-out fourth site with the same planted RSN
    start = time.perf_counter()
    scales = (20, 40, 60)
    margins, ordered, parts = [], [], []
    for seed in (0, 1, 2):
        spec = SyntheticSpec(n_sites=4, subjects_per_site=150, scales=scales, planted_effect_size=0.08,
                             noise_level=0.25, rng_seed=seed)
        atlas = synth_hierarchy(scales, seed=seed)
        data = prepare(generate_synthetic(spec, atlas))
        source, target = split_by_group(data, ["site3"])
        result, _ = run_transfer(source, target, ModelConfig(scales, **SMALL_MODEL), adjacent_mappings(atlas),
                                 TrainConfig(seed=seed), TransferConfig(250, 50, shots=20, pool=100,
                                                                        repetitions=10), seed=seed)
        med = result.medians("AUC")
        levels = [med[scheme_name(lv)] for lv in (1, 2, 3, 4)]
        margins.append(med[scheme_name(4)] - med["baseline"])
        ordered.append(all(a <= b for a, b in zip(levels, levels[1:])))
        parts.append(f"seed {seed}: L1-L4 {[round(100 * v, 1) for v in levels]} baseline "
                     f"{100 * med['baseline']:.1f}")
    elapsed = time.perf_counter() - start
    ok = min(margins) >= 0.02 and sum(ordered) >= 2 and elapsed < 900
    verdict(5, ok, f"Level-4 minus baseline AUC {[round(100 * m, 1) for m in margins]} pp (each >= 2.0), "
                   f"ordered in {sum(ordered)}/3 seeds (>= 2); {'; '.join(parts)}; {elapsed:.0f}s (< 900s)")


# -- 6 ---------------------------------------------------------------------------------

def test_criterion_6_attribution_localization(multiscale_runs):
    runs, _ = multiscale_runs
    cohort, atlas, data, cv = runs[0]
    planted_rsn = c4_spec(0).planted_rsn
    start = time.perf_counter()
    hits = {s: 0 for s in C4_SCALES}
    for fr in cv.folds["MAHGCN"]:
        test = data.take(fr.test_index)
        cams = fold_cams(fr.params, test.adjacency, test.labels, predict(fr.params, test), fr.fold, test.sites)
        cam = consensus_map({g: {fr.fold: maps} for g, maps in cams.items()}, {fr.fold: 1.0})
        for scale, row in rsn_aggregate(cam, atlas).items():
            hits[scale] += int(np.nanargmax(row) == planted_rsn)
    elapsed = time.perf_counter() - start
    n_folds = len(cv.folds["MAHGCN"])
    # the effect is planted at every scale, so every scale must localize it
    ok = min(hits.values()) >= 8 and elapsed < 300
    verdict(6, ok, f"planted RSN ranked first in {hits} of {n_folds} folds per scale (>= 8 each), "
                   f"{elapsed:.0f}s (< 300s)")


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_7_spectrum_recovery():
    start = time.perf_counter()
    scales = (20, 40, 60)
    spec = SyntheticSpec(n_sites=3, subjects_per_site=200, scales=scales, planted_effect_size=0.15,
                         noise_level=0.25, severity_continuum=True, rng_seed=0)
    atlas = synth_hierarchy(scales, seed=0)
    cohort = generate_synthetic(spec, atlas)
    data = prepare(cohort)
    cv = cross_validate(data, atlas, ModelConfig(scales, **SMALL_MODEL), TrainConfig(seed=0), baselines=False)
    folds = cv.folds["MAHGCN"]
    rel = consensus_relation([relation_matrix(deep_features(f.params, data.adjacency)) for f in folds],
                             [f.global_metrics.auc for f in folds])
    emb = diffusion_embed(rel, n_components=10, alpha=0.5, sparsity=0.9)
    g1 = emb.coordinates[:, 0]
    ok_rows = np.isfinite(g1)
    severity = np.array([s.severity for s in cohort.subjects])
    rho = abs(spearmanr(g1[ok_rows], severity[ok_rows])[0])
    y = data.labels
    p = mann_whitney_u(g1[ok_rows & (y == 1)], g1[ok_rows & (y == 0)]).pvalue
    elapsed = time.perf_counter() - start
    ok = emb.connected and rho >= 0.8 and p < 1e-3 and elapsed < 300
    verdict(7, ok, f"|Spearman| {rho:.3f} (>= 0.8), HC vs BD gradient-1 p {p:.1e} (< 1e-3), "
                   f"connected {emb.connected}, {elapsed:.0f}s (< 300s)")


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_8_chance_calibration(multiscale_runs):
    runs, _ = multiscale_runs
    start = time.perf_counter()
    # label-randomized data: a model trained on shuffled labels
    scales = (20, 40)
    spec = SyntheticSpec(n_sites=3, subjects_per_site=100, scales=scales, planted_effect_size=0.3,
                         noise_level=0.25, rng_seed=5)
    atlas = synth_hierarchy(scales, seed=5)
    data = prepare(generate_synthetic(spec, atlas))
    data = replace(data, labels=np.random.default_rng(5).permutation(data.labels))
    cv = cross_validate(data, atlas, ModelConfig(scales, **SMALL_MODEL), TrainConfig(seed=5), baselines=False)
    folds = cv.folds["MAHGCN"]
    null = permutation_chance([f.scores for f in folds], [f.test_labels for f in folds], 100, seed=5)
    null_mean = float(null.chance["AUC"].mean())
    # planted data: the trained multiscale models of criterion 4
    folds = runs[0][3].folds["MAHGCN"]
    real = permutation_chance([f.scores for f in folds], [f.test_labels for f in folds], 100, seed=0)
    p_auc = real.pvalues["AUC"]
    elapsed = time.perf_counter() - start
    ok = abs(null_mean - 0.5) <= 0.02 and p_auc < 0.01 and elapsed < 600
    verdict(8, ok, f"chance AUC mean {null_mean:.4f} (0.5 +- 0.02), trained-model AUC p {p_auc:.1e} (< 0.01), "
                   f"{elapsed:.0f}s (< 600s)")


# -- 9 ---------------------------------------------------------------------------------

PIPELINE_CFG = {
    "seed": 11,
    "synthetic": {"n_sites": 3, "subjects_per_site": 40, "scales": [10, 20, 30], "planted_effect_size": 0.3,
                  "site_shift_magnitude": 0.3, "severity_continuum": True, "timepoints": 80},
    "model": {"hidden_dim": 8, "fl_widths": [16, 8, 8]},
    "train": {"epochs": 20, "k_folds": 5, "n_perm_per_fold": 20},
    "harmonize": {"enabled": True},
    "transfer": {"held_out": ["site2"], "shots": [10], "pool": 20, "repetitions": 3, "pretrain_epochs": 10,
                 "finetune_epochs": 5},
    "spectrum": {"n_components": 4},
}


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(PIPELINE_CFG))
    codes = [main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / name), "--jobs", jobs])
             for name, jobs in (("a", "1"), ("b", "1"), ("c", "2"))]
    trees = [_tree(tmp_path / name) for name in ("a", "b", "c")]
    differing = sorted({k for t in trees[1:] for k in set(t) | set(trees[0]) if t.get(k) != trees[0].get(k)})
    n_ckpt = sum(k.endswith(".ckpt") for k in trees[0])
    ok = codes == [0, 0, 0] and not differing and n_ckpt > 0
    verdict(9, ok, f"{len(trees[0])} files incl. {n_ckpt} checkpoints, {len(differing)} differ across two reruns "
                   f"and a --jobs 2 run")
