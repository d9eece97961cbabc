import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from evaluation.oracles import exact_value, state_marginal
from models.mdp import FiniteMdp, Policy
from utils.exceptions import AggregationError, LengthMismatchError

UNDEFINED_CORRELATION = math.nan
SUMMARY_COLUMNS = [
    "method", "config_hash", "num_seeds", "rmse", "median_abs_error", "iqr_abs_error",
    "mean_ope_estimate", "mean_exact_value", "median_spearman",
]


@dataclass
class EvalReport:
    """One method evaluated on one seed."""
    method: str
    config_hash: str
    seed: int
    ope_estimate: float
    exact_value: float
    spearman: Optional[float] = None
    beyond_d0: List[Tuple[int, float]] = field(default_factory=list)
    covariance: Dict[str, float] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def error(self) -> float:
        return self.ope_estimate - self.exact_value

    @property
    def abs_error(self) -> float:
        return abs(self.error)

    def to_dict(self) -> Dict[str, Any]:
        record = asdict(self)
        record["beyond_d0"] = [[int(h), float(e)] for h, e in self.beyond_d0]
        record["abs_error"] = self.abs_error
        return record

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "EvalReport":
        record = {k: v for k, v in record.items() if k != "abs_error"}
        record["beyond_d0"] = [(int(h), float(e)) for h, e in record.get("beyond_d0", [])]
        return cls(**record)


def spearman_rank_correlation(estimates: Sequence[float], truths: Sequence[float]) -> float:
    """Pearson correlation of average ranks; NaN when either ranking is constant."""
    if len(estimates) != len(truths):
        raise LengthMismatchError(f"got {len(estimates)} estimates for {len(truths)} true values")
    if len(estimates) < 2:
        raise LengthMismatchError("rank correlation needs at least two values")
    x = rankdata(np.asarray(estimates, dtype=np.float64))
    y = rankdata(np.asarray(truths, dtype=np.float64))
    x -= x.mean()
    y -= y.mean()
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0.0:
        return UNDEFINED_CORRELATION
    return float(np.clip((x @ y) / denom, -1.0, 1.0))


def rmse(errors: Sequence[float]) -> float:
    errors = np.asarray(errors, dtype=np.float64)
    return math.sqrt(float(np.mean(errors * errors)))


def beyond_d0_profile(result, mdp: FiniteMdp, pi_e: Policy, horizon_slices: Sequence[int]) -> List[Tuple[int, float]]:
    """|estimate - truth| with p0 set to the exact state marginal of pi_e at each step."""
    if any(h < 0 for h in horizon_slices):
        raise ValueError("horizon slices must be non-negative")
    values = exact_value(mdp, pi_e).v_under(pi_e)
    profile = []
    for h in horizon_slices:
        p0 = state_marginal(mdp, pi_e, mdp.initial_dist, h)
        profile.append((int(h), abs(result.value_at(p0) - float(p0 @ values))))
    return profile


def graded_policies(mdp: FiniteMdp, pi_e: Policy, temperatures: Sequence[float]) -> List[Policy]:
    """pi_e followed by softmax(Q^{pi_e} / T) for each temperature."""
    q = exact_value(mdp, pi_e).q
    return [pi_e] + [Policy.softmax(q, t) for t in temperatures]


def aggregate(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """RMSE, median and IQR of absolute errors per method."""
    if not reports:
        raise AggregationError("nothing to aggregate")
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1:
        raise AggregationError(f"refusing to aggregate reports from different configs: {sorted(hashes)}")

    rows = []
    for method in sorted({r.method for r in reports}):
        group = sorted((r for r in reports if r.method == method), key=lambda r: r.seed)
        errors = np.array([r.error for r in group])
        abs_errors = np.abs(errors)
        spearman = [r.spearman for r in group if r.spearman is not None and not math.isnan(r.spearman)]
        q75, q25 = np.percentile(abs_errors, [75, 25])
        rows.append({
            "method": method,
            "config_hash": group[0].config_hash,
            "num_seeds": len(group),
            "rmse": rmse(errors),
            "median_abs_error": float(np.median(abs_errors)),
            "iqr_abs_error": float(q75 - q25),
            "mean_ope_estimate": float(np.mean([r.ope_estimate for r in group])),
            "mean_exact_value": float(np.mean([r.exact_value for r in group])),
            "median_spearman": float(np.median(spearman)) if spearman else math.nan,
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
