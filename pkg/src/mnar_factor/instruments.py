"""Per-feature instrument selection from the estimated factors."""

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from mnar_factor.data_model import IntensityMatrix
from mnar_factor.errors import InputError, MnarFactorError, SelectionWarning
from mnar_factor.stats_util import ols_masked, storey_qvalues

if TYPE_CHECKING:
    from mnar_factor.factor import FactorEstimate

# Observed cells required beyond the number of factors
MIN_OBSERVED_MARGIN = 5


@dataclass(frozen=True)
class InstrumentTables:
    """p- and q-values of every (feature, factor) pair in the scan.

    Attributes:
        features: Feature indices (rows of the intensity matrix) that were scanned
        p_values: len(features) x K p-values
        q_values: len(features) x K q-values, computed per factor column
        excluded: Feature indices skipped for having too few observed cells
    """

    features: np.ndarray
    p_values: np.ndarray
    q_values: np.ndarray
    excluded: np.ndarray

    @cached_property
    def _rows(self) -> dict[int, int]:
        return {int(g): i for i, g in enumerate(self.features)}

    def row(self, g: int) -> int:
        try:
            return self._rows[int(g)]
        except KeyError:
            raise InputError(f"feature {g} has no row in the instrument tables")


@dataclass(frozen=True)
class InstrumentAssignment:
    """The two selected factor columns (0-based) for one feature."""

    feature: int
    indices: tuple[int, int]
    q_values: tuple[float, float]
    p_value_row: np.ndarray


def instrument_scan(
    matrix: IntensityMatrix,
    missing_set: np.ndarray,
    C_miss: "FactorEstimate | np.ndarray",
    Z: np.ndarray | None = None,
) -> InstrumentTables:
    """Regress each missing-set feature on (Z | C_k) for every factor column k.

    Only observed cells enter each regression. q-values are computed down
    each factor column, across features.
    """
    C = np.asarray(getattr(C_miss, "C_hat", C_miss), dtype=float)
    n, K = C.shape
    if K < 2:
        raise InputError(f"instrument selection needs at least 2 factors, got {K}")
    base = np.ones((n, 1)) if Z is None else np.asarray(Z, dtype=float).reshape(n, -1)

    features: list[int] = []
    excluded: list[int] = []
    rows: list[np.ndarray] = []
    for g in np.asarray(missing_set, dtype=int):
        mask = matrix.mask[g]
        if int(mask.sum()) < K + MIN_OBSERVED_MARGIN:
            excluded.append(int(g))
            continue
        p_row = np.ones(K)
        for k in range(K):
            design = np.hstack([base, C[:, k : k + 1]])
            try:
                p_row[k] = ols_masked(matrix.values[g], design, mask).p_values[-1]
            except MnarFactorError:
                p_row[k] = 1.0
        features.append(int(g))
        rows.append(p_row)

    if excluded:
        warnings.warn(
            f"{len(excluded)} features have fewer than K+{MIN_OBSERVED_MARGIN} observed "
            "cells and were excluded from instrument selection",
            SelectionWarning,
            stacklevel=2,
        )

    p_values = np.vstack(rows) if rows else np.zeros((0, K))
    q_values = np.zeros_like(p_values)
    if p_values.shape[0] > 0:
        for k in range(K):
            q_values[:, k] = storey_qvalues(p_values[:, k])

    return InstrumentTables(
        features=np.array(features, dtype=int),
        p_values=p_values,
        q_values=q_values,
        excluded=np.array(excluded, dtype=int),
    )


def select_instruments(tables: InstrumentTables, g: int) -> InstrumentAssignment:
    """Pick the two factor columns with smallest q-value for feature g.

    Ties are broken by the smaller p-value, then by the smaller column index.
    """
    i = tables.row(g)
    q_row = tables.q_values[i]
    p_row = tables.p_values[i]
    order = np.lexsort((np.arange(q_row.size), p_row, q_row))
    g1, g2 = int(order[0]), int(order[1])
    return InstrumentAssignment(
        feature=g,
        indices=(g1, g2),
        q_values=(float(q_row[g1]), float(q_row[g2])),
        p_value_row=p_row.copy(),
    )


def assignments_frame(
    assignments: list[InstrumentAssignment], feature_ids: tuple[str, ...]
) -> pd.DataFrame:
    """Tabulate assignments as (feature, g1, g2, q1, q2)."""
    return pd.DataFrame(
        {
            "feature": [feature_ids[a.feature] for a in assignments],
            "g1": [a.indices[0] for a in assignments],
            "g2": [a.indices[1] for a in assignments],
            "q1": [a.q_values[0] for a in assignments],
            "q2": [a.q_values[1] for a in assignments],
        }
    )
