"""Tests for intensity matrices, designs and the feature partition."""

import numpy as np
import pytest

from mnar_factor.data_model import (
    MISSING_SENTINEL,
    DesignError,
    DesignMatrices,
    DuplicateIdError,
    IntensityMatrix,
    NoCompleteFeaturesError,
    ParseError,
    load_design,
    load_intensity_matrix,
    partition_metabolites,
    write_intensity_matrix,
)
from mnar_factor.errors import InputError


def make_matrix(values, mask=None):
    values = np.asarray(values, dtype=float)
    mask = np.ones(values.shape, dtype=int) if mask is None else np.asarray(mask)
    return IntensityMatrix(
        values=values,
        mask=mask,
        feature_ids=tuple(f"F{i}" for i in range(values.shape[0])),
        sample_ids=tuple(f"S{j}" for j in range(values.shape[1])),
    )


class TestLoadIntensityMatrix:
    """Tests for load_intensity_matrix."""

    def test_missing_tokens(self, tmp_path):
        """Test that empty cells, NA and NaN are read as missing."""
        path = tmp_path / "data.tsv"
        path.write_text("id\tS1\tS2\tS3\nm1\t1.5\tNA\t2.0\nm2\t\tNaN\t3.25\n")

        matrix = load_intensity_matrix(path)

        assert matrix.feature_ids == ("m1", "m2")
        assert matrix.sample_ids == ("S1", "S2", "S3")
        assert matrix.mask.tolist() == [[1, 0, 1], [0, 0, 1]]
        assert matrix.values[0, 1] == MISSING_SENTINEL
        assert matrix.values[1, 2] == 3.25

    def test_comma_separator_is_detected(self, tmp_path):
        """Test that a comma-separated file is read without naming the separator."""
        path = tmp_path / "data.csv"
        path.write_text("id,S1,S2,S3\nm1,1,2,3\n")

        matrix = load_intensity_matrix(path)

        assert matrix.values.tolist() == [[1.0, 2.0, 3.0]]

    def test_non_numeric_cell_reports_position(self, tmp_path):
        """Test that a non-numeric cell names its line."""
        path = tmp_path / "data.tsv"
        path.write_text("id\tS1\tS2\tS3\nm1\t1\t2\t3\nm2\t1\tabc\t3\n")

        with pytest.raises(ParseError, match="line 3"):
            load_intensity_matrix(path)

    def test_ragged_row(self, tmp_path):
        """Test that rows with the wrong field count are rejected."""
        path = tmp_path / "data.tsv"
        path.write_text("id\tS1\tS2\tS3\nm1\t1\t2\n")

        with pytest.raises(ParseError):
            load_intensity_matrix(path)

    def test_separator_detected_whatever_the_extension(self, tmp_path):
        """Test that a comma-separated file with a .txt name is still read correctly."""
        path = tmp_path / "data.txt"
        path.write_text("id,S1,S2\nm1,1.5,NA\nm2,2.5,3.5\n")

        matrix = load_intensity_matrix(path)

        assert matrix.sample_ids == ("S1", "S2")
        assert matrix.mask.tolist() == [[1, 0], [1, 1]]

    def test_explicit_delimiter(self, tmp_path):
        """Test that a configured delimiter is used as given."""
        path = tmp_path / "data.txt"
        path.write_text("id;S1;S2\nm1;1;2\n")

        matrix = load_intensity_matrix(path, delimiter=";")

        assert matrix.values.tolist() == [[1.0, 2.0]]

    def test_duplicate_sample_id(self, tmp_path):
        """Test that repeated sample ids raise DuplicateIdError."""
        path = tmp_path / "data.tsv"
        path.write_text("id\tS1\tS1\tS3\nm1\t1\t2\t3\n")

        with pytest.raises(DuplicateIdError, match="sample"):
            load_intensity_matrix(path)

    def test_duplicate_feature_id(self, tmp_path):
        """Test that repeated feature ids raise DuplicateIdError."""
        path = tmp_path / "data.tsv"
        path.write_text("id\tS1\tS2\tS3\nm1\t1\t2\t3\nm1\t4\t5\t6\n")

        with pytest.raises(DuplicateIdError):
            load_intensity_matrix(path)

    def test_missing_file(self, tmp_path):
        """Test that a missing file raises ParseError."""
        with pytest.raises(ParseError):
            load_intensity_matrix(tmp_path / "absent.tsv")

    def test_write_then_load_is_exact(self, tmp_path):
        """Test that a written matrix reloads bit for bit."""
        rng = np.random.default_rng(0)
        mask = (rng.uniform(size=(4, 6)) > 0.3).astype(int)
        original = make_matrix(rng.normal(size=(4, 6)) * 1e3, mask)
        path = tmp_path / "roundtrip.tsv"

        write_intensity_matrix(original, path)
        reloaded = load_intensity_matrix(path)

        assert np.array_equal(reloaded.values, original.values)
        assert np.array_equal(reloaded.mask, original.mask)
        assert reloaded.content_hash() == original.content_hash()


class TestIntensityMatrix:
    """Tests for IntensityMatrix invariants."""

    def test_sentinel_fills_missing_cells(self):
        """Test that missing cells hold the sentinel whatever was passed in."""
        matrix = make_matrix([[1.0, np.nan, 3.0]], [[1, 0, 1]])
        assert matrix.values[0, 1] == MISSING_SENTINEL

    def test_arrays_are_read_only(self):
        """Test that values cannot be modified in place."""
        matrix = make_matrix(np.ones((2, 3)))
        with pytest.raises(ValueError):
            matrix.values[0, 0] = 5.0

    def test_rejects_nonfinite_observed_value(self):
        """Test that an observed NaN is rejected."""
        with pytest.raises(InputError):
            make_matrix([[1.0, np.nan, 3.0]])

    def test_rejects_too_few_samples(self):
        """Test that fewer than three samples are rejected."""
        with pytest.raises(InputError):
            make_matrix(np.ones((2, 2)))

    def test_content_hash_tracks_values(self):
        """Test that the hash changes with a single value."""
        values = np.arange(12, dtype=float).reshape(3, 4)
        changed = values.copy()
        changed[2, 3] += 1e-9

        assert make_matrix(values).content_hash() == make_matrix(values.copy()).content_hash()
        assert make_matrix(values).content_hash() != make_matrix(changed).content_hash()

    def test_subset_keeps_ids(self):
        """Test that subset keeps the selected rows and their ids."""
        matrix = make_matrix(np.arange(12, dtype=float).reshape(3, 4))
        sub = matrix.subset([2, 0])
        assert sub.feature_ids == ("F2", "F0")
        assert sub.values[0].tolist() == [8.0, 9.0, 10.0, 11.0]


class TestPartition:
    """Tests for partition_metabolites."""

    @pytest.fixture
    def matrix(self):
        """Six features over 100 samples with 0, 4, 5, 6, 50 and 51 missing cells."""
        counts = [0, 4, 5, 6, 50, 51]
        mask = np.ones((6, 100), dtype=int)
        for g, count in enumerate(counts):
            mask[g, :count] = 0
        return make_matrix(np.ones((6, 100)), mask)

    def test_boundaries(self, matrix):
        """Test that boundaries are inclusive on the lower set."""
        partition = partition_metabolites(matrix, eps_miss=0.05, max_miss=0.5)

        assert partition.observed_set.tolist() == [0, 1, 2]
        assert partition.missing_set.tolist() == [3, 4]
        assert partition.dropped_set.tolist() == [5]
        assert partition.label(1) == "observed"
        assert partition.label(4) == "missing"
        assert partition.label(5) == "dropped"

    def test_four_percent_missing_is_observed(self, matrix):
        """Test that a feature at 4% missing lands in the observed set."""
        partition = partition_metabolites(matrix, eps_miss=0.05)
        assert 1 in partition.observed_set

    def test_smaller_eps_moves_features(self, matrix):
        """Test that eps_miss = 0.03 sends the 4% feature to the missing set."""
        partition = partition_metabolites(matrix, eps_miss=0.03)
        assert 1 in partition.missing_set

    def test_no_complete_features(self):
        """Test that a matrix without complete features is rejected."""
        mask = np.ones((2, 10), dtype=int)
        mask[:, :5] = 0
        with pytest.raises(NoCompleteFeaturesError):
            partition_metabolites(make_matrix(np.ones((2, 10)), mask))

    def test_thresholds_out_of_order(self, matrix):
        """Test that eps_miss >= max_miss is rejected."""
        with pytest.raises(InputError):
            partition_metabolites(matrix, eps_miss=0.5, max_miss=0.4)


class TestDesign:
    """Tests for DesignMatrices and load_design."""

    def test_requires_single_intercept(self):
        """Test that a nuisance block without the ones column is rejected."""
        with pytest.raises(DesignError):
            DesignMatrices(X_interest=np.arange(6.0), X_nuisance=np.arange(6.0) ** 2)

    def test_rejects_rank_deficiency(self):
        """Test that collinear columns are rejected."""
        x = np.array([0.0, 1.0, 0.0, 1.0, 1.0, 0.0])
        with pytest.raises(DesignError):
            DesignMatrices(X_interest=x, X_nuisance=np.column_stack([np.ones(6), 2 * x]))

    def test_vector_interest_becomes_column(self):
        """Test that a 1-D interest vector is stored as one column."""
        design = DesignMatrices(X_interest=np.arange(6.0), X_nuisance=np.ones(6))
        assert design.X_interest.shape == (6, 1)
        assert design.X.shape == (6, 2)
        assert design.nuisance_names == ("intercept",)
        assert design.Z_instr.shape == (6, 1)

    def test_load_design_aligns_and_adds_intercept(self, tmp_path):
        """Test that rows follow the matrix samples and an intercept is added."""
        path = tmp_path / "design.tsv"
        path.write_text("sample\tcase\tage\nS2\t1\t40\nS0\t0\t30\nS1\t1\t35\nS3\t0\t50\n")

        design = load_design(path, ["case"], ("S0", "S1", "S2", "S3"))

        assert design.X_interest[:, 0].tolist() == [0.0, 1.0, 1.0, 0.0]
        assert design.nuisance_names == ("age", "intercept")
        assert design.X_nuisance[:, 0].tolist() == [30.0, 35.0, 40.0, 50.0]

    def test_load_design_missing_sample(self, tmp_path):
        """Test that a sample without a design row is reported."""
        path = tmp_path / "design.tsv"
        path.write_text("sample\tcase\nS0\t0\nS1\t1\n")

        with pytest.raises(ParseError):
            load_design(path, ["case"], ("S0", "S1", "S2"))

    def test_load_design_unknown_column(self, tmp_path):
        """Test that an unknown interest column is reported."""
        path = tmp_path / "design.tsv"
        path.write_text("sample\tcase\nS0\t0\nS1\t1\nS2\t1\n")

        with pytest.raises(ParseError):
            load_design(path, ["treatment"], ("S0", "S1", "S2"))
