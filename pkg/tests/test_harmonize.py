import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdspectrum.cohort import SyntheticSpec, generate_synthetic
from bdspectrum.atlas import synth_hierarchy
from bdspectrum.harmonize import (CombatError, CombatModel, apply_combat, covariate_design, fit_combat,
                                  harmonize_cohort)
from bdspectrum.bfn import upper_triangle


def shifted(n=250, p=40, c=0.8, seed=0, noise=0.5):
    rng = np.random.default_rng(seed)
    base = rng.normal(0, 1, p)
    x = base + rng.normal(0, noise, (2 * n, p))
    batch = np.repeat(["A", "B"], n)
    x[batch == "B"] += c
    return x, batch


def test_single_batch_is_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 10))
    cov = rng.normal(size=(30, 2))
    model = fit_combat(x, ["only"] * 30, cov)
    assert np.all(np.abs(model.site_additive) < 1e-6)
    assert np.all(np.abs(model.site_multiplicative - 1) < 1e-3)
    np.testing.assert_allclose(apply_combat(model, x, ["only"] * 30, cov), x, atol=1e-8)


def test_additive_shift_recovered():
    c = 0.8
    x, batch = shifted(n=400, c=c, noise=0.15)
    model = fit_combat(x, batch)
    assert model.converged
    shift = model.site_additive * np.sqrt(model.pooled_var)
    # equal batch sizes: +-c/2 about the grand mean
    np.testing.assert_allclose(shift[0], -c / 2, rtol=0.05)
    np.testing.assert_allclose(shift[1], c / 2, rtol=0.05)
    assert (shift[1] - shift[0]).mean() == pytest.approx(c, rel=0.01)
    out = apply_combat(model, x, batch)
    gap = out[batch == "B"].mean(0) - out[batch == "A"].mean(0)
    assert np.max(np.abs(gap)) < 0.05 * c


def test_batch_free_features_are_not_inflated():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 30))
    batch = rng.permutation(np.repeat(["A", "B"], 100))
    out = apply_combat(fit_combat(x, batch), x, batch)
    before = np.abs(x[batch == "A"].mean(0) - x[batch == "B"].mean(0)).mean()
    after = np.abs(out[batch == "A"].mean(0) - out[batch == "B"].mean(0)).mean()
    assert after / before < 1


def test_scale_effect_removed():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 1, (400, 25))
    batch = np.repeat(["A", "B"], 200)
    x[batch == "B"] *= 3.0
    out = apply_combat(fit_combat(x, batch), x, batch)
    ratio = out[batch == "B"].std(0) / out[batch == "A"].std(0)
    assert np.all(np.abs(ratio - 1) < 0.15)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 2.0))
def test_refit_is_nearly_idempotent(seed, c):
    x, batch = shifted(n=120, p=20, c=c, seed=seed)
    first = fit_combat(x, batch)
    out = apply_combat(first, x, batch)
    second = fit_combat(out, batch)
    assert np.max(np.abs(second.site_additive)) < 0.1 * np.max(np.abs(first.site_additive))


def test_covariate_effect_preserved():
    rng = np.random.default_rng(4)
    n = 300
    batch = np.repeat(["A", "B", "C"], n // 3)
    dx = rng.integers(0, 2, n).astype(float)
    x = rng.normal(0, 0.3, (n, 15)) + 0.5 * dx[:, None]
    x[batch == "B"] += 1.0
    x[batch == "C"] -= 0.7
    out = apply_combat(fit_combat(x, batch, dx[:, None]), x, batch, dx[:, None])
    before = x[dx == 1].mean() - x[dx == 0].mean()
    after = out[dx == 1].mean() - out[dx == 0].mean()
    assert after == pytest.approx(0.5, abs=0.05)
    assert abs(before - 0.5) < 0.2


def test_errors():
    x = np.random.default_rng(5).normal(size=(6, 3))
    with pytest.raises(CombatError, match="fewer than 2"):
        fit_combat(x, ["A"] * 5 + ["B"])
    with pytest.raises(CombatError, match="singular"):
        fit_combat(x, ["A"] * 3 + ["B"] * 3, np.c_[np.ones(6)])
    model = fit_combat(x, ["A"] * 3 + ["B"] * 3)
    with pytest.raises(CombatError, match="unknown"):
        apply_combat(model, x, ["A"] * 3 + ["Z"] * 3)


def test_model_serialization(tmp_path):
    x, batch = shifted(n=20, p=5)
    model = fit_combat(x, batch)
    model.save(tmp_path / "m.json")
    back = CombatModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(apply_combat(back, x, batch), apply_combat(model, x, batch))
    with pytest.raises(ValueError):
        CombatModel.from_dict({**model.to_dict(), "site_multiplicative": [[-1.0] * 5, [1.0] * 5]})


def test_cohort_harmonization_keeps_structure_and_effect():
    spec = SyntheticSpec(n_sites=3, subjects_per_site=80, scales=(10, 20), site_shift_magnitude=0.5,
                         planted_effect_size=0.3, noise_level=0.25, rng_seed=7)
    atlas = synth_hierarchy(spec.scales, seed=7)
    c = generate_synthetic(spec, atlas)
    out, models = harmonize_cohort(c)
    assert set(models) == {10, 20}
    nets = out.networks(20)
    np.testing.assert_array_equal(nets, np.swapaxes(nets, 1, 2))
    assert np.all(nets[:, np.arange(20), np.arange(20)] == 1.0)
    site_mean = lambda co: np.array([upper_triangle(co.networks(20))[co.sites == s].mean() for s in
                                     sorted(set(co.sites))])
    pre, post = np.ptp(site_mean(c)), np.ptp(site_mean(out))
    assert post < 0.1 * pre


def test_design_coding():
    spec = SyntheticSpec(n_sites=2, subjects_per_site=10, scales=(8,), rng_seed=1)
    c = generate_synthetic(spec)
    design, info = covariate_design(c)
    assert info.columns[:2] == ("age", "gender_M")
    assert design.shape == (20, 2 + len(info.diagnosis_levels))
    assert abs(design[:, 0].mean()) < 1e-12
    again, _ = covariate_design(c.subset(range(5)), info)
    np.testing.assert_array_equal(again, design[:5])
