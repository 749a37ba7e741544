"""Reading and writing mechanism artifacts.

Mechanisms are estimated once per intensity matrix and reused for any
number of designs. The manifest ties an artifact directory to the matrix it
was estimated from through the matrix content hash.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml
from packaging.version import InvalidVersion, Version

from mnar_factor.data_model import IntensityMatrix
from mnar_factor.errors import InputError
from mnar_factor.ipw import MechanismWeights

FORMAT_VERSION = "1.0"

MANIFEST = "manifest.yaml"
FACTORS = "factors.tsv"
INSTRUMENTS = "instruments.tsv"
GMM_FITS = "gmm_fits.tsv"
JTEST = "jtest.tsv"
MECHANISMS = "mechanisms.tsv"
WEIGHTS_W = "weights_w.tsv"
WEIGHTS_V = "weights_v.tsv"
WEIGHTS_GAMMA = "weights_gamma.tsv"
DIAGNOSTICS = "diagnostics.tsv"


class ArtifactVersionError(InputError):
    """Raised when an artifact directory was written by an incompatible format."""

    pass


class StaleArtifactError(InputError):
    """Raised when artifacts were estimated from a different intensity matrix."""

    pass


@dataclass
class Diagnostics:
    """Per-feature failures collected during a run."""

    records: list[dict[str, str]] = field(default_factory=list)

    def add(self, feature: str, stage: str, error: BaseException | str) -> None:
        if isinstance(error, BaseException):
            error_type, message = type(error).__name__, str(error)
        else:
            error_type, message = "Warning", error
        self.records.append(
            {"feature": feature, "stage": stage, "error_type": error_type, "message": message}
        )

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(
            self.records, columns=["feature", "stage", "error_type", "message"]
        )

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / DIAGNOSTICS
        write_table(self.to_frame(), path)
        return path


def write_table(frame: pd.DataFrame, path: str | Path, index: bool = False) -> None:
    frame.to_csv(path, sep="\t", index=index, na_rep="NA", float_format="%.17g")


def read_table(path: str | Path, index_col: int | None = None) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise InputError(f"Artifact file not found: {path}")
    return pd.read_csv(path, sep="\t", index_col=index_col, na_values=["NA"], keep_default_na=False)


def write_manifest(directory: str | Path, matrix: IntensityMatrix, details: dict[str, Any]) -> Path:
    """Write manifest.yaml with the format version and matrix hash."""
    manifest = {
        "format-version": FORMAT_VERSION,
        "matrix-hash": matrix.content_hash(),
        "features": matrix.n_features,
        "samples": matrix.n_samples,
        **details,
    }
    path = Path(directory) / MANIFEST
    with open(path, "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return path


def read_manifest(directory: str | Path, matrix: IntensityMatrix | None = None) -> dict[str, Any]:
    """Load the manifest and check it against this format version and matrix.

    Raises:
        InputError: If the manifest is missing or unreadable
        ArtifactVersionError: If the major format version differs
        StaleArtifactError: If ``matrix`` does not match the recorded hash
    """
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise InputError(f"No mechanism artifacts in {directory}: {MANIFEST} not found")
    with open(path) as f:
        try:
            manifest = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise InputError(f"{path} is not valid YAML: {e}")

    try:
        found = Version(str(manifest.get("format-version", "")))
    except InvalidVersion:
        raise ArtifactVersionError(f"{path} has no valid format-version")
    if found.major != Version(FORMAT_VERSION).major:
        raise ArtifactVersionError(
            f"artifacts use format {found}, this version reads {FORMAT_VERSION}"
        )

    if matrix is not None and manifest.get("matrix-hash") != matrix.content_hash():
        raise StaleArtifactError(
            f"artifacts in {directory} were estimated from a different intensity matrix"
        )
    return manifest


def write_weights(
    directory: str | Path, weights: MechanismWeights, matrix: IntensityMatrix
) -> None:
    """Write w_hat, v_hat and gamma_hat as features x samples tables."""
    ids = pd.Index([matrix.feature_ids[g] for g in weights.features], name="feature")
    samples = list(matrix.sample_ids)
    for name, values in ((WEIGHTS_W, weights.w_hat), (WEIGHTS_V, weights.v_hat), (WEIGHTS_GAMMA, weights.gamma_hat)):
        frame = pd.DataFrame(np.asarray(values).reshape(len(ids), len(samples)), index=ids, columns=samples)
        write_table(frame, Path(directory) / name, index=True)


def load_weights(directory: str | Path, matrix: IntensityMatrix) -> MechanismWeights:
    """Read the weight tables and J-test screen for ``matrix``.

    Raises:
        StaleArtifactError: If the tables do not line up with the matrix
    """
    directory = Path(directory)
    read_manifest(directory, matrix)
    tables = [read_table(directory / name, index_col=0) for name in (WEIGHTS_W, WEIGHTS_V, WEIGHTS_GAMMA)]
    jtest = read_table(directory / JTEST)

    index = {f: g for g, f in enumerate(matrix.feature_ids)}
    ids = [str(f) for f in tables[0].index]
    if any(f not in index for f in ids) or [str(c) for c in tables[0].columns] != list(matrix.sample_ids):
        raise StaleArtifactError(f"weight tables in {directory} do not match the intensity matrix")
    for table in tables[1:]:
        if [str(f) for f in table.index] != ids:
            raise StaleArtifactError(f"weight tables in {directory} list different features")

    subset = dict(zip(jtest["feature"].astype(str), jtest["in_subset"].astype(bool)))
    return MechanismWeights(
        features=np.array([index[f] for f in ids], dtype=int),
        w_hat=tables[0].to_numpy(dtype=float),
        v_hat=tables[1].to_numpy(dtype=float),
        gamma_hat=tables[2].to_numpy(dtype=float),
        in_subset=np.array([subset.get(f, False) for f in ids], dtype=bool),
    )
