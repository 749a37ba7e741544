"""Intensity matrices, design matrices and the feature partition.

Values are log-scale intensities and are taken as already transformed; the
loader never applies a log itself.
"""

import csv
import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

from mnar_factor.errors import InputError

# Cell encodings read as missing
MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan", "NAN"})

# Value stored in missing cells; arithmetic multiplies by the mask instead of branching
MISSING_SENTINEL = 0.0


class ParseError(InputError):
    """Raised when an intensity or design table cannot be parsed."""

    pass


class DuplicateIdError(InputError):
    """Raised when feature or sample identifiers repeat."""

    pass


class NoCompleteFeaturesError(InputError):
    """Raised when no feature is complete enough to estimate factors."""

    pass


class DesignError(InputError):
    """Raised when design matrices violate their rank or intercept rules."""

    pass


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class IntensityMatrix:
    """A p x n matrix of log intensities with its observation mask.

    Attributes:
        values: Float matrix (features x samples); missing cells hold MISSING_SENTINEL
        mask: Integer matrix with 1 where a value was observed, 0 where missing
        feature_ids: Feature labels (length p)
        sample_ids: Sample labels (length n)
    """

    values: np.ndarray
    mask: np.ndarray
    feature_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask)

        if values.ndim != 2 or mask.shape != values.shape:
            raise InputError(
                f"values and mask must be matrices of equal shape, got {values.shape} and {mask.shape}"
            )
        if not np.isin(mask, (0, 1)).all():
            raise InputError("mask must contain only 0 and 1")
        mask = mask.astype(np.int8)

        p, n = values.shape
        if p < 1:
            raise InputError("intensity matrix needs at least one feature")
        if n < 3:
            raise InputError(f"intensity matrix needs at least 3 samples, got {n}")
        if len(self.feature_ids) != p or len(self.sample_ids) != n:
            raise InputError("identifier counts do not match the matrix shape")

        observed = mask == 1
        if not np.isfinite(values[observed]).all():
            raise InputError("observed intensities must be finite")
        values[~observed] = MISSING_SENTINEL

        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))
        object.__setattr__(self, "feature_ids", tuple(str(f) for f in self.feature_ids))
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def missing_counts(self) -> np.ndarray:
        """Number of missing cells per feature."""
        return self.n_samples - self.mask.sum(axis=1).astype(int)

    def subset(self, rows: np.ndarray | list[int]) -> "IntensityMatrix":
        """Return the matrix restricted to the given feature rows."""
        rows = np.asarray(rows, dtype=int)
        return IntensityMatrix(
            values=self.values[rows],
            mask=self.mask[rows],
            feature_ids=tuple(self.feature_ids[i] for i in rows),
            sample_ids=self.sample_ids,
        )

    def content_hash(self) -> str:
        """SHA-256 over identifiers, mask and values.

        Used to tie estimated mechanisms to the matrix they came from.
        """
        digest = hashlib.sha256()
        digest.update("\x1f".join(self.feature_ids).encode())
        digest.update(b"\x1e")
        digest.update("\x1f".join(self.sample_ids).encode())
        digest.update(self.mask.tobytes())
        digest.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class DesignMatrices:
    """Observed sample-level covariates.

    Attributes:
        X_interest: n x d_i covariates of interest
        X_nuisance: n x d_n nuisance covariates; contains the all-ones column exactly once
        Z_instr: n x t observed instrument covariates (defaults to the all-ones column)
        interest_names: Column names of X_interest
        nuisance_names: Column names of X_nuisance
    """

    X_interest: np.ndarray
    X_nuisance: np.ndarray
    Z_instr: np.ndarray | None = None
    interest_names: tuple[str, ...] = ()
    nuisance_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        x_int = np.atleast_2d(np.asarray(self.X_interest, dtype=float))
        if x_int.shape[0] == 1 and np.asarray(self.X_interest).ndim == 1:
            x_int = x_int.T
        x_nuis = np.atleast_2d(np.asarray(self.X_nuisance, dtype=float))
        if x_nuis.shape[0] == 1 and np.asarray(self.X_nuisance).ndim == 1:
            x_nuis = x_nuis.T

        n = x_int.shape[0]
        if x_nuis.shape[0] != n:
            raise DesignError("X_interest and X_nuisance have different numbers of rows")

        ones_columns = [j for j in range(x_nuis.shape[1]) if np.all(x_nuis[:, j] == 1.0)]
        if len(ones_columns) != 1:
            raise DesignError(
                f"X_nuisance must contain the all-ones column exactly once, found {len(ones_columns)}"
            )

        full = np.hstack([x_int, x_nuis])
        if np.linalg.matrix_rank(full) != full.shape[1]:
            raise DesignError("(X_interest | X_nuisance) does not have full column rank")

        z = np.ones((n, 1)) if self.Z_instr is None else np.asarray(self.Z_instr, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != n:
            raise DesignError("Z_instr has the wrong number of rows")

        interest_names = self.interest_names or tuple(
            f"interest_{j + 1}" for j in range(x_int.shape[1])
        )
        nuisance_names = self.nuisance_names or tuple(
            "intercept" if j in ones_columns else f"nuisance_{j + 1}"
            for j in range(x_nuis.shape[1])
        )

        object.__setattr__(self, "X_interest", _readonly(x_int))
        object.__setattr__(self, "X_nuisance", _readonly(x_nuis))
        object.__setattr__(self, "Z_instr", _readonly(z))
        object.__setattr__(self, "interest_names", tuple(interest_names))
        object.__setattr__(self, "nuisance_names", tuple(nuisance_names))

    @property
    def X(self) -> np.ndarray:
        """The full observed design (X_interest | X_nuisance)."""
        return np.hstack([self.X_interest, self.X_nuisance])

    @property
    def n_interest(self) -> int:
        return self.X_interest.shape[1]


@dataclass(frozen=True)
class Partition:
    """Split of the features by their missing fraction.

    Attributes:
        observed_set: Features with missing fraction <= eps_miss
        missing_set: Features with eps_miss < missing fraction <= max_miss
        dropped_set: Features with missing fraction > max_miss
    """

    observed_set: np.ndarray
    missing_set: np.ndarray
    dropped_set: np.ndarray
    eps_miss: float = 0.05
    max_miss: float = 0.5
    missing_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def label(self, g: int) -> str:
        """Return 'observed', 'missing' or 'dropped' for feature index g."""
        if g in set(self.observed_set.tolist()):
            return "observed"
        if g in set(self.missing_set.tolist()):
            return "missing"
        return "dropped"


def _separator(delimiter: str | None) -> str | None:
    # None lets pandas sniff the separator from the header line
    if delimiter is None:
        return None
    return "\t" if delimiter in ("tab", "\\t") else delimiter


def _write_separator(path: Path, delimiter: str | None) -> str:
    sep = _separator(delimiter)
    if sep is not None:
        return sep
    return "," if path.suffix.lower() == ".csv" else "\t"


def _read_table(path: Path, delimiter: str | None, **kwargs) -> pd.DataFrame:
    try:
        return pd.read_csv(
            path, sep=_separator(delimiter), engine="python", index_col=0, **kwargs
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, csv.Error) as e:
        raise ParseError(f"{path}: {e}")


def load_intensity_matrix(
    path: str | Path, delimiter: str | None = None
) -> IntensityMatrix:
    """Load a features x samples table of log intensities.

    The first row holds sample ids (its first cell is ignored), the first
    column holds feature ids. Empty cells, "NA" and "NaN" are missing.

    Args:
        path: Path to a delimited text file
        delimiter: Field separator; sniffed from the header line when None

    Returns:
        The parsed intensity matrix

    Raises:
        ParseError: If rows are ragged or a present cell is not a finite number
        DuplicateIdError: If a feature or sample id repeats
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"Intensity file not found: {path}")

    # header=None keeps repeated sample ids intact; cells stay text so bad values are reported by position
    frame = _read_table(path, delimiter, header=None, dtype=str, keep_default_na=False)
    if frame.shape[0] < 2:
        raise ParseError(f"{path}: expected a header row and at least one feature row")

    sample_ids = [str(s).strip() for s in frame.iloc[0]]
    body = frame.iloc[1:]
    feature_ids = [str(g).strip() for g in body.index]
    _check_unique(feature_ids, "feature")
    _check_unique(sample_ids, "sample")

    present = body.map(lambda v: isinstance(v, str)).to_numpy()
    short = np.flatnonzero(~present.all(axis=1))
    if short.size:
        raise ParseError(
            f"{path}: line {short[0] + 2} has fewer fields than the header ({len(sample_ids) + 1})"
        )

    tokens = body.map(str.strip).to_numpy(dtype=object)
    missing = np.isin(tokens, list(MISSING_TOKENS))
    values = np.zeros(tokens.shape)
    for r, c in np.argwhere(~missing):
        try:
            value = float(tokens[r, c])
        except ValueError:
            raise ParseError(
                f"{path}: non-numeric value '{tokens[r, c]}' at line {r + 2}, column {c + 2} "
                f"(feature '{feature_ids[r]}', sample '{sample_ids[c]}')"
            )
        if not math.isfinite(value):
            raise ParseError(
                f"{path}: non-finite value '{tokens[r, c]}' at line {r + 2}, column {c + 2}"
            )
        values[r, c] = value

    return IntensityMatrix(
        values=values,
        mask=(~missing).astype(np.int8),
        feature_ids=tuple(feature_ids),
        sample_ids=tuple(sample_ids),
    )


def _check_unique(ids: list[str], kind: str) -> None:
    seen: set[str] = set()
    for identifier in ids:
        if identifier in seen:
            raise DuplicateIdError(f"Duplicate {kind} id: '{identifier}'")
        seen.add(identifier)


def write_intensity_matrix(
    matrix: IntensityMatrix, path: str | Path, delimiter: str | None = None
) -> None:
    """Write a matrix in the format read by load_intensity_matrix.

    Floats are written with repr() so that a reload is bit-exact; missing
    cells are written as "NA". Without a delimiter ".csv" files are comma
    separated and anything else tab separated.
    """
    path = Path(path)
    cells = [
        [repr(float(v)) if m else "NA" for v, m in zip(matrix.values[g], matrix.mask[g])]
        for g in range(matrix.n_features)
    ]
    frame = pd.DataFrame(
        cells,
        index=pd.Index(matrix.feature_ids, name="feature"),
        columns=list(matrix.sample_ids),
    )
    frame.to_csv(path, sep=_write_separator(path, delimiter), lineterminator="\n")


def load_design(
    path: str | Path,
    interest: list[str],
    sample_ids: tuple[str, ...],
    instruments: list[str] | None = None,
    delimiter: str | None = None,
) -> DesignMatrices:
    """Load a samples x covariates design table.

    The first column holds sample ids; rows are aligned to ``sample_ids``.
    Columns named in ``interest`` form X_interest, columns named in
    ``instruments`` form Z_instr (with an intercept), the rest are nuisance
    covariates. An intercept column is added to X_nuisance when absent.

    Raises:
        ParseError: If the file cannot be read or samples are missing
        DesignError: If the resulting matrices violate their invariants
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"Design file not found: {path}")

    frame = _read_table(path, delimiter)
    frame.index = frame.index.astype(str)
    if frame.index.duplicated().any():
        raise DuplicateIdError(
            f"Duplicate sample id in design: '{frame.index[frame.index.duplicated()][0]}'"
        )

    absent = [s for s in sample_ids if s not in frame.index]
    if absent:
        raise ParseError(f"{path}: design has no row for samples {absent[:5]}")
    frame = frame.loc[list(sample_ids)]

    unknown = [c for c in interest + (instruments or []) if c not in frame.columns]
    if unknown:
        raise ParseError(f"{path}: unknown design columns {unknown}")

    try:
        numeric = frame.astype(float)
    except ValueError as e:
        raise ParseError(f"{path}: design contains non-numeric values: {e}")
    if not np.isfinite(numeric.to_numpy()).all():
        raise ParseError(f"{path}: design contains missing or non-finite values")

    instruments = instruments or []
    nuisance_cols = [c for c in numeric.columns if c not in interest and c not in instruments]
    x_nuis = numeric[nuisance_cols]
    ones = [c for c in nuisance_cols if np.all(x_nuis[c].to_numpy() == 1.0)]
    if not ones:
        x_nuis = x_nuis.assign(intercept=1.0)
    nuisance_names = tuple(str(c) for c in x_nuis.columns)

    z = np.ones((len(sample_ids), 1))
    if instruments:
        z = np.hstack([z, numeric[instruments].to_numpy()])

    return DesignMatrices(
        X_interest=numeric[interest].to_numpy(),
        X_nuisance=x_nuis.to_numpy(),
        Z_instr=z,
        interest_names=tuple(interest),
        nuisance_names=nuisance_names,
    )


def _count_threshold(fraction: float, n: int) -> int:
    # floor(fraction * n) in exact rational arithmetic
    return math.floor(Fraction(repr(float(fraction))) * n)


def partition_metabolites(
    matrix: IntensityMatrix, eps_miss: float = 0.05, max_miss: float = 0.5
) -> Partition:
    """Assign every feature to the observed, missing or dropped set.

    A feature with m missing cells out of n is observed when m/n <= eps_miss,
    missing when eps_miss < m/n <= max_miss and dropped otherwise. Both
    comparisons are done on integer counts.

    Raises:
        InputError: If the thresholds are out of order
        NoCompleteFeaturesError: If no feature lands in the observed set
    """
    if not (0.0 <= eps_miss < max_miss <= 1.0):
        raise InputError(
            f"thresholds must satisfy 0 <= eps_miss < max_miss <= 1, got {eps_miss}, {max_miss}"
        )

    n = matrix.n_samples
    counts = matrix.missing_counts()
    observed_limit = _count_threshold(eps_miss, n)
    missing_limit = _count_threshold(max_miss, n)

    observed = np.flatnonzero(counts <= observed_limit)
    missing = np.flatnonzero((counts > observed_limit) & (counts <= missing_limit))
    dropped = np.flatnonzero(counts > missing_limit)

    if observed.size == 0:
        raise NoCompleteFeaturesError(
            f"No feature has at most {eps_miss:.0%} missing cells; factors cannot be estimated"
        )

    return Partition(
        observed_set=observed,
        missing_set=missing,
        dropped_set=dropped,
        eps_miss=eps_miss,
        max_miss=max_miss,
        missing_counts=counts,
    )
