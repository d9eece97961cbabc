"""End-to-end experiment orchestration.

One run = one config and a list of seeds. For every seed the pipeline builds
the MDP, the target policy and the data distribution, samples 2N tuples,
splits them into a representation half and an evaluation half, learns (or
fixes) features on the first half, runs LSPE on the second half and compares
every estimate against exact dynamic programming.
"""
import logging
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pydantic
import scipy

from evaluation.metrics import EvalReport, aggregate, beyond_d0_profile, graded_policies, spearman_rank_correlation
from evaluation.oracles import (
    certify_witness,
    concentrability_coefficient,
    exact_lbc_error,
    exact_value,
    lspe_error_bound,
    occupancy,
    relative_condition_number,
)
from models.baselines import ablation_config, fqe_run
from models.bcrl import TrainConfig, TrainResult, build_feature_net, train
from models.dataset import OfflineDataset, sample_offline_dataset, save_dataset, split_dataset
from models.features import FeatureMap, NetworkFeatureMap, TabularFeatureMap, covariance
from models.generators import contract_for_policy, make_low_rank_mdp, make_random_tabular_mdp
from models.lspe import lspe_run, lspe_run_population
from models.mdp import FiniteMdp, Policy, StateActionDist, mixture_dist, save_mdp
from models.network import TrainableNet
from utils.config import ExperimentConfig, NuSpec, PolicySpec, config_hash, with_updates
from utils.database import CONFIG_FILE, MANIFEST_FILE, SUMMARY_FILE, ResultStore, write_frame
from utils.exceptions import ConfigValidationError, NumericAbortError
from utils.seeding import Stream, make_rng

logger = logging.getLogger(__name__)

SWEEP_AXES = {"N": "dataset_size", "K": "lspe.k_iters", "lambda": "train.design_weight", "seed": "seeds"}

# substreams of Stream.POLICY
_TARGET_POLICY, _BEHAVIOR_POLICY, _EXPLICIT_NU = 0, 1, 2


@dataclass(frozen=True)
class Problem:
    mdp: FiniteMdp
    pi_e: Policy
    nu: StateActionDist
    truth: Optional[TabularFeatureMap] = None  # exact low-rank features when known

    @property
    def true_value(self) -> float:
        return exact_value(self.mdp, self.pi_e).value_at(self.mdp.initial_dist, self.pi_e)


@dataclass
class SeedOutcome:
    seed: int
    reports: List[EvalReport]
    frames: Dict[str, pd.DataFrame] = field(default_factory=dict)
    documents: Dict[str, Any] = field(default_factory=dict)
    checkpoint: Optional[TrainableNet] = None


def build_mdp(config: ExperimentConfig, seed: int) -> Tuple[FiniteMdp, Optional[TabularFeatureMap]]:
    spec = config.mdp
    mdp_seed = spec.seed if spec.seed is not None else seed
    if spec.kind == "low-rank":
        return make_low_rank_mdp(mdp_seed, spec.num_states, spec.num_actions, spec.feature_dim, spec.gamma)
    return make_random_tabular_mdp(mdp_seed, spec.num_states, spec.num_actions, spec.gamma, spec.stochastic), None


def _random_policy(num_states: int, num_actions: int, concentration: float, seed: int, substream: int) -> Policy:
    rng = make_rng(seed, Stream.POLICY, substream)
    probs = rng.dirichlet(np.full(num_actions, concentration), size=num_states)
    return Policy(probs / probs.sum(axis=1, keepdims=True))


def build_policy(spec: PolicySpec, mdp: FiniteMdp, seed: int) -> Policy:
    if spec.kind == "uniform":
        return Policy.uniform(mdp.num_states, mdp.num_actions)
    return _random_policy(mdp.num_states, mdp.num_actions, spec.concentration, seed, _TARGET_POLICY)


def build_nu(spec: NuSpec, mdp: FiniteMdp, pi_e: Policy, seed: int) -> StateActionDist:
    if spec.kind == "explicit":
        if spec.table == "uniform":
            return StateActionDist.uniform(mdp.num_states, mdp.num_actions)
        weights = make_rng(seed, Stream.POLICY, _EXPLICIT_NU).dirichlet(np.ones(mdp.num_pairs))
        return StateActionDist.normalized(weights.reshape(mdp.num_states, mdp.num_actions))

    if spec.behavior == "uniform":
        behavior = Policy.uniform(mdp.num_states, mdp.num_actions)
    else:
        behavior = _random_policy(mdp.num_states, mdp.num_actions, 1.0, seed, _BEHAVIOR_POLICY)
    nu_b = occupancy(mdp, behavior, mdp.initial_dist)
    if spec.kind == "behavior":
        return nu_b
    return mixture_dist(occupancy(mdp, pi_e, mdp.initial_dist), nu_b, spec.mixture_weight)


def build_problem(config: ExperimentConfig, seed: int) -> Problem:
    mdp, truth = build_mdp(config, seed)
    pi_e = build_policy(config.policy, mdp, seed)
    if truth is not None:
        truth = contract_for_policy(mdp, truth, pi_e)
    return Problem(mdp, pi_e, build_nu(config.nu, mdp, pi_e, seed), truth)


def build_dataset(config: ExperimentConfig, problem: Problem, seed: int):
    """2N tuples from nu and their (representation, evaluation) halves."""
    data = sample_offline_dataset(problem.mdp, problem.nu, 2 * config.dataset_size, seed)
    first, second = split_dataset(data, seed)
    return data, first, second


def fixed_features(config: ExperimentConfig, problem: Problem, seed: int) -> FeatureMap:
    kind, mdp = config.features.kind, problem.mdp
    dim = config.feature_dim
    if kind == "one-hot":
        return TabularFeatureMap.one_hot(mdp.num_states, mdp.num_actions)
    if kind == "low-rank-truth":
        return problem.truth
    if kind == "random-fixed":
        return TabularFeatureMap.random_fixed(mdp.num_states, mdp.num_actions, dim, seed)
    if kind == "rank-one":
        return TabularFeatureMap.rank_one(mdp.num_states, mdp.num_actions, dim, seed)
    raise ValueError(f"{kind} features are learned, not fixed")


def seed_train_config(config: ExperimentConfig, seed: int) -> TrainConfig:
    return config.train.model_copy(update={"seed": config.train.seed + seed})


def learn_features(train_config: TrainConfig, data: OfflineDataset, pi_e: Policy) -> TrainResult:
    phi = build_feature_net(train_config, data.num_states, data.num_actions)
    return train(phi, train_config, data, pi_e)


def _w_radius(config: ExperimentConfig) -> float:
    return config.lspe.w_radius if config.lspe.w_radius is not None else np.inf


def _curve(method: str, result, p0: np.ndarray, truth: float) -> pd.DataFrame:
    estimates = result.values_by_iteration(p0)
    return pd.DataFrame({
        "method": method,
        "iteration": np.arange(len(estimates)),
        "estimate": estimates,
        "exact_value": truth,
    })


def _profile_frame(method: str, profile: Sequence[Tuple[int, float]]) -> pd.DataFrame:
    return pd.DataFrame(
        {"method": method, "slice": [h for h, _ in profile], "abs_error": [e for _, e in profile]}
    )


def _covariance_summary(phi: FeatureMap, data: OfflineDataset, nu: StateActionDist) -> Dict[str, float]:
    summary = {f"empirical_{k}": v for k, v in covariance(phi, data).as_dict().items()}
    summary.update({f"nu_{k}": v for k, v in covariance(phi, nu).as_dict().items()})
    return summary


def _spectrum_frame(phi: FeatureMap, data: OfflineDataset, nu: StateActionDist) -> pd.DataFrame:
    frames = []
    for source, report in (("empirical", covariance(phi, data)), ("nu", covariance(phi, nu))):
        frames.append(pd.DataFrame({
            "source": source,
            "index": np.arange(report.dim),
            "eigenvalue": report.eigenvalues,
        }))
    return pd.concat(frames, ignore_index=True)


def feature_diagnostics(config: ExperimentConfig, problem: Problem, phi: FeatureMap) -> Dict[str, Any]:
    """Oracle measurements of a representation: Bellman completeness, coverage and the implied error bound."""
    mdp, nu, pi_e = problem.mdp, problem.nu, problem.pi_e
    radius = config.diagnostics.lbc_radius or 1.0 / (1.0 - mdp.gamma)
    lbc = exact_lbc_error(mdp, nu, phi, pi_e, radius, config.diagnostics.n_probes)
    concentrability = concentrability_coefficient(mdp, nu, pi_e, mdp.initial_dist)
    diagnostics = {
        "lbc_radius": radius,
        "lbc_error": lbc,
        "relative_condition_number": relative_condition_number(nu, pi_e, mdp.initial_dist, phi, mdp),
        "concentrability": concentrability,
        "error_bound": lspe_error_bound(mdp.gamma, config.lspe.k_iters, lbc, concentrability),
    }
    if problem.truth is not None:
        diagnostics["truth_nu_lambda_min"] = covariance(problem.truth, nu).lambda_min
    return diagnostics


def rank_policies(config: ExperimentConfig, problem: Problem, phi: FeatureMap, data: OfflineDataset) -> float:
    """Spearman correlation between LSPE estimates and exact values over the graded policies."""
    p0 = problem.mdp.initial_dist
    policies = graded_policies(problem.mdp, problem.pi_e, config.ranking.temperatures)
    estimates = [lspe_run(phi, data, pi, config.lspe.k_iters, _w_radius(config)).value_at(p0) for pi in policies]
    truths = [exact_value(problem.mdp, pi).value_at(p0, pi) for pi in policies]
    return spearman_rank_correlation(estimates, truths)


def run_seed(config: ExperimentConfig, seed: int, digest: str) -> SeedOutcome:
    problem = build_problem(config, seed)
    mdp, pi_e, p0 = problem.mdp, problem.pi_e, problem.mdp.initial_dist
    data, first, second = build_dataset(config, problem, seed)
    truth = problem.true_value
    slices = config.diagnostics.horizon_slices
    k_iters, w_radius = config.lspe.k_iters, _w_radius(config)
    logger.info("seed %d: %dx%d MDP, %d tuples, true value %.6f", seed, mdp.num_states, mdp.num_actions,
                len(data), truth)

    outcome = SeedOutcome(seed, [])
    outcome.documents["split.json"] = {
        "train_indices": first.indices.tolist(),
        "eval_indices": second.indices.tolist(),
    }
    curves, profiles, traces = [], [], []

    def report(method: str, result, phi: Optional[FeatureMap] = None, **extra) -> EvalReport:
        profile = beyond_d0_profile(result, mdp, pi_e, slices)
        curves.append(_curve(method, result, p0, truth))
        profiles.append(_profile_frame(method, profile))
        entry = EvalReport(
            method=method,
            config_hash=digest,
            seed=seed,
            ope_estimate=result.value_at(p0),
            exact_value=truth,
            beyond_d0=profile,
            covariance=_covariance_summary(phi, second, problem.nu) if phi is not None else {},
            **extra,
        )
        outcome.reports.append(entry)
        return entry

    if config.trains:
        learned = learn_features(seed_train_config(config, seed), first, pi_e)
        traces.append(learned.trace.assign(method="bcrl"))
        outcome.checkpoint = learned.phi.net
        phi = learned.phi.freeze()
        method = "bcrl"
    else:
        learned = None
        phi = fixed_features(config, problem, seed)
        method = f"lspe-{config.features.kind}"

    diagnostics = feature_diagnostics(config, problem, phi)
    if learned is not None:
        diagnostics.update({f"final_{k}": v for k, v in learned.final_row.items() if k != "refit"})
    spearman = rank_policies(config, problem, phi, second) if config.ranking.enabled else None
    report(method, lspe_run(phi, second, pi_e, k_iters, w_radius), phi, spearman=spearman, diagnostics=diagnostics)
    outcome.frames["spectrum.csv"] = _spectrum_frame(phi, second, problem.nu)

    if config.lspe.population:
        population = lspe_run_population(phi, mdp, problem.nu, pi_e, k_iters, w_radius)
        report(f"{method}-population", population, phi,
               diagnostics={"bellman_errors": population.bellman_errors})

    for kind in config.baselines.ablations:
        ablated = learn_features(ablation_config(kind, seed_train_config(config, seed)), first, pi_e)
        traces.append(ablated.trace.assign(method=kind))
        ablated_phi = ablated.phi.freeze()
        report(kind, lspe_run(ablated_phi, second, pi_e, k_iters, w_radius), ablated_phi,
               diagnostics={f"final_{k}": v for k, v in ablated.final_row.items() if k != "refit"})

    if config.baselines.fqe:
        net = build_feature_net(seed_train_config(config, seed), mdp.num_states, mdp.num_actions).net
        fqe = fqe_run(net, data, pi_e, config.baselines.fqe_iters, config.baselines.fqe_inner_steps, seed,
                      learning_rate=config.baselines.fqe_learning_rate, batch_size=config.baselines.fqe_batch_size)
        outcome.frames["fqe_trace.csv"] = fqe.trace
        report("fqe", fqe)

    outcome.frames["lspe_curve.csv"] = pd.concat(curves, ignore_index=True)
    outcome.frames["beyond_d0.csv"] = pd.concat(profiles, ignore_index=True)
    if traces:
        frame = pd.concat(traces, ignore_index=True)
        outcome.frames["train_trace.csv"] = frame[["method"] + [c for c in frame.columns if c != "method"]]
    for entry in outcome.reports:
        logger.info("seed %d %-22s estimate %.6f error %.3e", seed, entry.method, entry.ope_estimate, entry.abs_error)
    return outcome


def _map_seeds(config: ExperimentConfig, digest: str, jobs: int) -> List[SeedOutcome]:
    tasks = [(config, seed, digest) for seed in config.seeds]
    if jobs > 1 and len(tasks) > 1:
        with Pool(min(jobs, len(tasks))) as pool:
            return pool.starmap(run_seed, tasks)
    return [run_seed(*task) for task in tasks]


def _versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.VERSION,
    }


def _write_outcome(store: ResultStore, outcome: SeedOutcome) -> None:
    prefix = f"seed-{outcome.seed}"
    for name, frame in sorted(outcome.frames.items()):
        store.write_frame(f"{prefix}/{name}", frame)
    for name, document in sorted(outcome.documents.items()):
        store.write_json(f"{prefix}/{name}", document)
    if outcome.checkpoint is not None:
        outcome.checkpoint.save(store.path(f"{prefix}/phi.ckpt"))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def run_experiment(config: ExperimentConfig, out: Optional[Union[str, Path]] = None, jobs: int = 1) -> Path:
    """Run every seed of ``config`` and publish the results under ``<out>/<config hash>``.

    Reruns of the same config reproduce every file byte for byte except the
    manifest, which holds the timestamps.
    """
    digest = config_hash(config)
    store = ResultStore(out if out is not None else config.output_dir, digest).open()
    started = _now()
    logger.info("run %s (%s): seeds %s", digest, config.name, config.seeds)
    try:
        store.write_json(CONFIG_FILE, config.model_dump(mode="json", exclude={"output_dir"}))
        outcomes = _map_seeds(config, digest, jobs)
        for outcome in outcomes:
            _write_outcome(store, outcome)
        reports = [r for outcome in outcomes for r in outcome.reports]
        store.store_reports(reports)
        store.write_frame(SUMMARY_FILE, aggregate(reports))
        store.write_json(MANIFEST_FILE, {
            "config_hash": digest,
            "name": config.name,
            "seeds": list(config.seeds),
            "started": started,
            "finished": _now(),
            "versions": _versions(),
        })
    except NumericAbortError as exc:
        store.write_frame("abort_trace.csv", pd.DataFrame(exc.trace))
        store.write_json("abort.json", {"config_hash": digest, "error": str(exc)})
        store.quarantine()
        raise
    except BaseException:
        store.quarantine()
        raise
    return store.commit()


def _axis_value(axis: str, value: Any) -> Any:
    if axis == "lambda":
        return float(value)
    number = float(value)
    if not number.is_integer():
        raise ConfigValidationError([f"{axis}: {value!r} is not an integer"])
    return int(number)


def sweep_configs(base: ExperimentConfig, axis: str, values: Sequence[Any]) -> List[Tuple[Any, ExperimentConfig]]:
    """One validated config per axis value; all problems are reported together."""
    if axis not in SWEEP_AXES:
        raise ConfigValidationError([f"axis: {axis!r} is not one of {sorted(SWEEP_AXES)}"])
    if not values:
        raise ConfigValidationError(["values: a sweep needs at least one value"])
    violations, configs = [], []
    parsed = []
    for value in values:
        try:
            parsed.append(_axis_value(axis, value))
        except (ConfigValidationError, ValueError) as exc:
            violations.append(f"{axis}={value}: {exc}")
    duplicates = sorted({v for v in parsed if parsed.count(v) > 1})
    if duplicates:
        violations.append(f"values: duplicate {axis} values {duplicates}")
    for value in parsed:
        update = [value] if axis == "seed" else value
        try:
            configs.append((value, with_updates(base, {SWEEP_AXES[axis]: update})))
        except ConfigValidationError as exc:
            violations.extend(f"{axis}={value}: {v}" for v in exc.violations)
    if violations:
        raise ConfigValidationError(violations)
    return configs


def _run_for_sweep(config: ExperimentConfig, out: Optional[Union[str, Path]]) -> Path:
    return run_experiment(config, out, jobs=1)


def run_sweep(
    base: ExperimentConfig,
    axis: str,
    values: Sequence[Any],
    out: Optional[Union[str, Path]] = None,
    jobs: int = 1,
) -> pd.DataFrame:
    """Run ``base`` once per axis value and collect the summaries in long format."""
    configs = sweep_configs(base, axis, values)
    root = Path(out if out is not None else base.output_dir)
    tasks = [(config, root) for _, config in configs]
    if jobs > 1 and len(tasks) > 1:
        with Pool(min(jobs, len(tasks))) as pool:
            run_dirs = pool.starmap(_run_for_sweep, tasks)
    else:
        run_dirs = [_run_for_sweep(*task) for task in tasks]

    frames = []
    for (value, config), run_dir in zip(configs, run_dirs):
        summary = pd.read_csv(run_dir / SUMMARY_FILE)
        summary.insert(0, "value", value)
        summary.insert(0, "axis", axis)
        frames.append(summary)
    table = pd.concat(frames, ignore_index=True)
    target = root / f"sweep-{axis}-{config_hash(base)}.csv"
    write_frame(target, table)
    logger.info("sweep over %s with %d values written to %s", axis, len(configs), target)
    return table


def generate_data(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Path:
    """Write each seed's MDP document and 2N-tuple dataset."""
    digest = config_hash(config)
    store = ResultStore(out if out is not None else config.output_dir, f"{digest}-data").open()
    try:
        store.write_json(CONFIG_FILE, config.model_dump(mode="json", exclude={"output_dir"}))
        for seed in config.seeds:
            problem = build_problem(config, seed)
            data, _, _ = build_dataset(config, problem, seed)
            save_mdp(problem.mdp, store.path(f"seed-{seed}/mdp.json"))
            save_dataset(data, store.path(f"seed-{seed}/dataset.bin"))
    except BaseException:
        store.quarantine()
        raise
    return store.commit()


def train_only(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Path:
    """Learn each seed's representation on its first split half and save the checkpoint and trace."""
    if not config.trains:
        raise ConfigValidationError(["features.kind: the train verb needs features.kind = trainable"])
    digest = config_hash(config)
    store = ResultStore(out if out is not None else config.output_dir, f"{digest}-train").open()
    try:
        store.write_json(CONFIG_FILE, config.model_dump(mode="json", exclude={"output_dir"}))
        for seed in config.seeds:
            problem = build_problem(config, seed)
            _, first, _ = build_dataset(config, problem, seed)
            learned = learn_features(seed_train_config(config, seed), first, problem.pi_e)
            store.write_frame(f"seed-{seed}/train_trace.csv", learned.trace)
            learned.phi.net.save(store.path(f"seed-{seed}/phi.ckpt"))
    except NumericAbortError as exc:
        store.write_frame("abort_trace.csv", pd.DataFrame(exc.trace))
        store.quarantine()
        raise
    except BaseException:
        store.quarantine()
        raise
    return store.commit()


def certify_checkpoint(config: ExperimentConfig, checkpoint: Union[str, Path], seed: int) -> Dict[str, Any]:
    """Witness certificate and coverage of a saved representation on the seed's exact problem."""
    problem = build_problem(config, seed)
    mdp = problem.mdp
    expected = build_feature_net(seed_train_config(config, seed), mdp.num_states, mdp.num_actions).net.descriptor()
    net = TrainableNet.load(checkpoint, expected=expected)
    phi = NetworkFeatureMap(net, mdp.num_states, mdp.num_actions).freeze()
    radius = config.diagnostics.lbc_radius or 1.0 / (1.0 - mdp.gamma)
    certificate = certify_witness(phi, mdp, problem.nu, problem.pi_e, config.diagnostics.n_probes, radius)
    result = {"seed": seed, "checkpoint": str(checkpoint)}
    result.update(certificate.as_dict())
    result.update(feature_diagnostics(config, problem, phi))
    result["nu_lambda_min"] = covariance(phi, problem.nu).lambda_min
    return result

