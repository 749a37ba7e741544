"""Scoring association and mechanism estimates against a simulation truth."""

from collections.abc import Mapping

import numpy as np
import pandas as pd
from scipy import stats

from mnar_factor.errors import InputError

METHOD_SETS = {"ols": "observed", "ipw": "missing"}


def _truth_series(truth: Mapping, key: str) -> pd.Series:
    if key not in truth or "feature_ids" not in truth:
        raise InputError(f"truth has no '{key}' entry keyed by feature_ids")
    return pd.Series(np.asarray(truth[key], dtype=float), index=list(truth["feature_ids"]))


def evaluate_results(
    results: pd.DataFrame,
    truth: Mapping,
    sets: Mapping[str, str] | None = None,
    q_threshold: float = 0.1,
    level: float = 0.95,
) -> pd.DataFrame:
    """False discovery proportion, power and interval coverage per feature set.

    Args:
        results: Long association table (feature, beta, se, q, method, ...)
            for a single interest covariate
        truth: Parsed truth JSON with ``feature_ids`` and ``beta``
        sets: Feature id -> set label; derived from the method column when None
        q_threshold: Discoveries are q <= q_threshold
        level: Confidence level of the intervals beta +- z se

    Returns:
        One row per set plus "all" with columns set, features, discoveries,
        false_discoveries, fdp, power and coverage
    """
    if results["covariate"].nunique() > 1:
        raise InputError("evaluate one interest covariate at a time")
    beta_true = _truth_series(truth, "beta")
    frame = results[results["status"] == "ok"].copy()
    unknown = set(frame["feature"]) - set(beta_true.index)
    if unknown:
        raise InputError(f"{len(unknown)} result features are absent from the truth")

    frame["truth"] = beta_true.loc[frame["feature"]].to_numpy()
    if sets is None:
        frame["set"] = frame["method"].map(METHOD_SETS).fillna("all")
    else:
        frame["set"] = frame["feature"].map(sets).fillna("unknown")

    z = stats.norm.ppf(0.5 + level / 2.0)
    frame["covered"] = np.abs(frame["beta"] - frame["truth"]) <= z * frame["se"]
    frame["discovery"] = frame["q"] <= q_threshold
    frame["null"] = frame["truth"] == 0.0

    rows = []
    labels = [s for s in ("observed", "missing") if s in set(frame["set"])] + ["all"]
    for label in labels:
        part = frame if label == "all" else frame[frame["set"] == label]
        discoveries = int(part["discovery"].sum())
        false = int((part["discovery"] & part["null"]).sum())
        signals = int((~part["null"]).sum())
        rows.append(
            {
                "set": label,
                "features": len(part),
                "discoveries": discoveries,
                "false_discoveries": false,
                "fdp": false / discoveries if discoveries else 0.0,
                "power": int((part["discovery"] & ~part["null"]).sum()) / signals if signals else np.nan,
                "coverage": float(part["covered"].mean()) if len(part) else np.nan,
            }
        )
    return pd.DataFrame(rows)


def mechanism_rmse(estimates: pd.DataFrame, truth: Mapping) -> dict[str, float]:
    """RMSE of log alpha and delta over the features in ``estimates``.

    ``estimates`` needs columns feature, alpha and delta.
    """
    alpha = _truth_series(truth, "alpha").loc[estimates["feature"]].to_numpy()
    delta = _truth_series(truth, "delta").loc[estimates["feature"]].to_numpy()
    log_error = np.log(estimates["alpha"].to_numpy(dtype=float)) - np.log(alpha)
    delta_error = estimates["delta"].to_numpy(dtype=float) - delta
    return {
        "rmse_log_alpha": float(np.sqrt(np.nanmean(log_error**2))),
        "rmse_delta": float(np.sqrt(np.nanmean(delta_error**2))),
    }
