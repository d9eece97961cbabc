"""End-to-end quality checks on learned representations.

These train real networks on 20x4 low-rank MDPs and take minutes; run them
with ``pytest -m slow``.
"""
import numpy as np
import pytest

from evaluation.pipeline import run_seed
from utils.config import config_hash, load_config, with_updates

pytestmark = pytest.mark.slow

SEEDS = range(5)

LOW_RANK = {
    "name": "acceptance",
    "mdp": {"kind": "low-rank", "num_states": 20, "num_actions": 4, "feature_dim": 8, "gamma": 0.9},
    "policy": {"kind": "uniform"},
    "nu": {"kind": "behavior", "behavior": "random"},
    "features": {"kind": "trainable"},
    "train": {"steps": 3000, "batch_size": 256, "feature_dim": 8, "learning_rate": 1e-3,
              "design_weight": 0.1, "refit_every": 25},
    "dataset_size": 20_000,
    "lspe": {"k_iters": 50},
    "baselines": {"ablations": ["no-design", "design-only"]},
    "ranking": {"enabled": True, "temperatures": [0.05, 0.2, 1.0]},
    "seeds": list(SEEDS),
}


@pytest.fixture(scope="module")
def trained():
    config = load_config(LOW_RANK)
    digest = config_hash(config)
    reports = [r for seed in SEEDS for r in run_seed(config, seed, digest).reports]
    return config, reports


def _by_method(reports, method):
    return [r for r in reports if r.method == method]


def test_learned_features_are_complete_covering_and_accurate(trained):
    config, reports = trained
    bcrl = _by_method(reports, "bcrl")
    radius = 1.0 / (1.0 - config.mdp.gamma)
    assert np.median([r.diagnostics["lbc_error"] for r in bcrl]) <= 0.05 * (1.0 + radius)
    assert np.median([r.covariance["nu_lambda_min"] / r.diagnostics["truth_nu_lambda_min"] for r in bcrl]) >= 0.5
    assert np.median([r.abs_error for r in bcrl]) <= 0.05 / (1.0 - config.mdp.gamma)


def test_design_term_improves_coverage_without_hurting_accuracy(trained):
    _, reports = trained
    full, no_design = _by_method(reports, "bcrl"), _by_method(reports, "no-design")
    assert np.median([r.covariance["empirical_lambda_min"] for r in full]) > np.median(
        [r.covariance["empirical_lambda_min"] for r in no_design])
    assert np.median([r.abs_error for r in full]) <= np.median([r.abs_error for r in no_design])


def test_bellman_term_is_needed(trained):
    _, reports = trained
    full, design_only = _by_method(reports, "bcrl"), _by_method(reports, "design-only")
    assert np.median([r.abs_error for r in design_only]) >= 2.0 * np.median([r.abs_error for r in full])


def test_error_away_from_the_initial_distribution(trained):
    _, reports = trained
    profiles = np.array([[err for _, err in r.beyond_d0] for r in _by_method(reports, "bcrl")])
    medians = np.median(profiles, axis=0)
    assert np.all(medians <= 3.0 * medians[0])


def test_policy_ranking(trained):
    _, reports = trained
    assert np.median([r.spearman for r in _by_method(reports, "bcrl")]) >= 0.5


def test_error_shrinks_with_more_data():
    base = with_updates(load_config(LOW_RANK), {
        "features.kind": "low-rank-truth",
        "baselines.ablations": [],
        "ranking.enabled": False,
    })
    medians = []
    for n in (500, 2000, 8000):
        config = with_updates(base, {"dataset_size": n})
        digest = config_hash(config)
        errors = [run_seed(config, seed, digest).reports[0].abs_error for seed in SEEDS]
        medians.append(float(np.median(errors)))
    assert medians[0] >= medians[1] >= medians[2]
    assert medians[0] >= 2.0 * medians[2]
