import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patt.data import Dataset, VariableRoles, load_csv, split_by_treatment, write_csv
from patt.errors import ConfigurationError, ParseError, ValidationError

from conftest import make_dataset


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


ROLES = VariableRoles("y", "z", discrete_columns=("region",), continuous_columns=("age",))


def test_load_expands_factor_against_first_level(tmp_path):
    p = _write(tmp_path, "y,z,region,age\n1.5,1,north,30\n2,0,south,40\n3,0,centre,50\n4,1,north,60\n")
    d = load_csv(p, ROLES)
    assert d.n_units == 4
    assert d.discrete_names == ("region=north", "region=south")
    np.testing.assert_array_equal(d.covariates_discrete, [[1, 0], [0, 1], [0, 0], [1, 0]])
    np.testing.assert_array_equal(d.treatment, [1, 0, 0, 1])


def test_numeric_levels_sort_numerically(tmp_path):
    p = _write(tmp_path, "y,z,region,age\n1,1,10,1\n2,0,9,2\n3,0,2,3\n4,1,9,4\n")
    d = load_csv(p, ROLES)
    assert d.discrete_names == ("region=9", "region=10")


def test_missing_column_names_it(tmp_path):
    p = _write(tmp_path, "y,z,age\n1,1,2\n")
    with pytest.raises(ConfigurationError, match="region"):
        load_csv(p, ROLES)


def test_nonbinary_treatment_reports_line(tmp_path):
    p = _write(tmp_path, "y,z,region,age\n1,1,a,1\n2,2,b,2\n")
    with pytest.raises(ValidationError, match="line 3"):
        load_csv(p, ROLES)


def test_non_numeric_cell_reports_line(tmp_path):
    p = _write(tmp_path, "y,z,region,age\n1,1,a,1\n2,0,b,old\n")
    with pytest.raises(ParseError, match="line 3"):
        load_csv(p, ROLES)


def test_incomplete_rows_are_dropped(tmp_path, caplog):
    p = _write(tmp_path, "# note\ny,z,region,age\n1,1,a,1\n2,0,b,\n3,0,a,3\n4,1,b,4\n")
    d = load_csv(p, ROLES)
    assert d.n_units == 3
    assert "dropped 1" in caplog.text


def test_duplicate_roles_rejected():
    with pytest.raises(ConfigurationError):
        VariableRoles("y", "z", continuous_columns=("y",)).validate()


def test_dataset_requires_both_arms():
    with pytest.raises(ValidationError):
        Dataset(np.zeros(3), np.ones(3, int), np.zeros((3, 0)), np.zeros((3, 1)))


def test_dataset_rejects_non_finite():
    with pytest.raises(ValidationError):
        Dataset(np.array([0, np.nan, 1]), np.array([0, 1, 1]), np.zeros((3, 0)), np.zeros((3, 1)))


def test_arrays_are_read_only(small_data):
    with pytest.raises(ValueError):
        small_data.outcome[0] = 1.0


def test_split_preserves_ids_and_order(small_data):
    t, c = split_by_treatment(small_data)
    assert t.n_units + c.n_units == small_data.n_units
    assert t.single_arm and c.single_arm
    np.testing.assert_array_equal(t.unit_ids, small_data.unit_ids[small_data.treatment == 1])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), h=st.integers(0, 3), s=st.integers(1, 3),
       lagged=st.booleans())
def test_csv_round_trip_is_bitwise(tmp_path_factory, seed, h, s, lagged):
    d = make_dataset(n=30, seed=seed, h=h, s=s, lagged=lagged)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    roles = write_csv(d, path)
    back = load_csv(path, roles)
    assert back.equals(d)
