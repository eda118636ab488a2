import sys

import numpy as np
import pytest

from bdspectrum.atlas import adjacent_mappings, synth_hierarchy
from bdspectrum.cohort import SyntheticSpec, generate_synthetic
from bdspectrum.model import ModelConfig, init_params, normalize_adjacency
from bdspectrum.train import site_statistics, site_weighted_loss
from bdspectrum import model as M


def random_networks(rng, n_subjects, scale):
    x = rng.normal(size=(n_subjects, scale, 3 * scale))
    c = np.einsum("bit,bjt->bij", x - x.mean(-1, keepdims=True), x - x.mean(-1, keepdims=True))
    d = np.sqrt(np.einsum("bii->bi", c))
    return c / d[:, :, None] / d[:, None, :]


def small_instance(seed, scales=(10, 20, 30), hidden_dim=8, n_subjects=12):
    """Random atlas, networks, labels and parameters for gradient checks."""
    rng = np.random.default_rng(seed)
    atlas = synth_hierarchy(scales, seed=seed)
    cfg = ModelConfig(scales, hidden_dim=hidden_dim, fl_widths=(12, 8, 6))
    params = init_params(cfg, adjacent_mappings(atlas), seed=seed)
    # nonzero BN shifts keep ReLUs away from the all-dead regime
    for t in params.tensors.values():
        t.data = t.data + rng.normal(0, 0.05, t.data.shape)
    adj = [normalize_adjacency(random_networks(rng, n_subjects, s)) for s in reversed(scales)]
    labels = np.tile([0, 1], n_subjects // 2)
    sites = np.repeat(["a", "b"], n_subjects // 2)
    return params, adj, labels, sites


def model_loss_fn(params, adj, labels, sites, dropout_seed=0):
    """Deterministic train-mode loss (fixed dropout stream, frozen running stats)."""
    stats = site_statistics(labels, sites)

    def loss():
        rng = np.random.default_rng(dropout_seed)
        tr = M.forward(params, adj, train=True, rng=rng, update_stats=False)
        return site_weighted_loss(tr.logits, labels, sites, stats)

    return loss


@pytest.fixture(scope="session")
def tiny_cohort():
    spec = SyntheticSpec(n_sites=2, subjects_per_site=20, scales=(10, 20), planted_effect_size=0.3,
                         rng_seed=3)
    atlas = synth_hierarchy(spec.scales, seed=3)
    return generate_synthetic(spec, atlas), atlas


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    results = getattr(acc, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
