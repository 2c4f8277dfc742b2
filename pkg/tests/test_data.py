import numpy as np
import pytest

from surrokit import load_csv
from surrokit.data import write_csv
from surrokit.errors import DataError


def write(path, text):
    path.write_text(text)
    return path


def test_three_rows_two_inputs(tmp_path):
    p = write(tmp_path / "d.csv", "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
    s = load_csv(p, "a,b", "y")
    assert (s.n, s.d_in, s.d_out) == (3, 2, 1)
    np.testing.assert_array_equal(s.inputs[:, 1], [2, 5, 8])
    assert s.input_names == ["a", "b"] and s.output_names == ["y"]


def test_column_order_follows_request(tmp_path):
    p = write(tmp_path / "d.csv", "y, b ,a\n3,2,1\n")
    s = load_csv(p, ["a", "b"], ["y"])
    np.testing.assert_array_equal(s.inputs, [[1, 2]])


def test_missing_column_named(tmp_path):
    p = write(tmp_path / "d.csv", "a,b,y\n1,2,3\n")
    with pytest.raises(DataError, match="'z'"):
        load_csv(p, "a,z", "y")


def test_non_numeric_cell_cites_row(tmp_path):
    rows = ["a,y"] + [f"{i},{i}" for i in range(5)] + ["abc,1"]
    p = write(tmp_path / "d.csv", "\n".join(rows) + "\n")
    with pytest.raises(DataError, match="row 7") as err:
        load_csv(p, "a", "y")
    assert "'a'" in str(err.value) and "'abc'" in str(err.value)


@pytest.mark.parametrize("text", ["", "\n\n", "a,y\n"])
def test_empty_files_rejected(tmp_path, text):
    p = write(tmp_path / "d.csv", text)
    with pytest.raises(DataError):
        load_csv(p, "a", "y")


def test_unreadable_path(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        load_csv(tmp_path / "missing.csv", "a", "y")


def test_non_finite_rejected(tmp_path):
    p = write(tmp_path / "d.csv", "a,y\n1,nan\n")
    with pytest.raises(DataError, match="non-finite"):
        load_csv(p, "a", "y")


def test_categorical_codes(tmp_path):
    p = write(tmp_path / "d.csv", "mat,t,y\nsteel,1,2\nal,2,3\nsteel,3,4\n")
    s = load_csv(p, "mat,t", "y", categorical="mat")
    np.testing.assert_array_equal(s.inputs[:, 0], [1, 0, 1])
    assert s.categorical_mask == [True, False]
    assert s.categories == {0: ["al", "steel"]}
    again = load_csv(p, "mat,t", "y", categorical="mat", categories={0: ["steel", "al"]})
    np.testing.assert_array_equal(again.inputs[:, 0], [0, 1, 0])


def test_unknown_category_rejected(tmp_path):
    p = write(tmp_path / "d.csv", "mat,y\nwood,1\n")
    with pytest.raises(DataError, match="unknown category 'wood'"):
        load_csv(p, "mat", "y", categorical="mat", categories={0: ["al", "steel"]})


def test_inputs_only(tmp_path):
    p = write(tmp_path / "d.csv", "a\n1\n2\n")
    assert load_csv(p, "a").d_out == 0


def test_write_round_trip(tmp_path):
    vals = np.array([[0.1, 1 / 3], [1e-300, -2.5e10]])
    write_csv(tmp_path / "o.csv", ["p", "q"], vals)
    s = load_csv(tmp_path / "o.csv", "p,q")
    np.testing.assert_array_equal(s.inputs, vals)
