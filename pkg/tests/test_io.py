import hashlib
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moe_robust import io as mio
from moe_robust.exceptions import ChecksumError, CsvFormatError, DataNotFoundError


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_text_round_trips(v):
    assert float(mio.fmt(v)) == v


def test_fmt_cells():
    assert mio.fmt(None) == "" and mio.fmt(float("nan")) == ""
    assert mio.fmt(True) == "1" and mio.fmt(np.int64(3)) == "3"
    assert mio.fmt(np.float64(0.1)) == "0.1"


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x, y, r = rng.normal(size=(3, 40))
    path = tmp_path / "d.csv"
    mio.write_dataset(path, x, y, r)
    data = mio.read_dataset(path)
    assert data.y.tobytes() == y.tobytes()
    assert data.X[:, 1].tobytes() == x.tobytes() and data.R[:, 1].tobytes() == r.tobytes()


def test_blank_lines_skipped_and_ragged_rows_rejected(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x,y\n1,2\n\n3,4\n")
    assert mio.read_dataset(path).n == 2
    path.write_text("x,y\n1,2\n3\n")
    with pytest.raises(CsvFormatError, match=":3: expected 2 fields"):
        mio.read_dataset(path)


@pytest.mark.parametrize("cell", ["nan", "inf", "", "1e400"])
def test_non_finite_cells_rejected(tmp_path, cell):
    path = tmp_path / "d.csv"
    path.write_text(f"y,x\n1,2\n{cell},4\n")
    with pytest.raises(CsvFormatError, match=r":3: column 1 \('y'\)"):
        mio.read_dataset(path)


def test_empty_file(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("")
    with pytest.raises(CsvFormatError, match=":1:"):
        mio.read_dataset(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "sub" / "out.txt"
    mio.atomic_write_text(target, "a")
    mio.atomic_write_text(target, "b")
    assert target.read_text() == "b"
    assert [p.name for p in target.parent.iterdir()] == ["out.txt"]


class TestBundled:
    def test_missing_names_expected_path(self, tmp_path, monkeypatch):
        monkeypatch.setenv(mio.DATA_ENV, str(tmp_path))
        with pytest.raises(DataNotFoundError) as info:
            mio.load_bundled("tone")
        assert str(tmp_path / "tone.csv") in str(info.value)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            mio.load_bundled("iris")

    def test_override_dir_loads_unverified(self, tmp_path, monkeypatch, caplog):
        monkeypatch.setenv(mio.DATA_ENV, str(tmp_path))
        (tmp_path / "tone.csv").write_text("x,y\n1.5,1.6\n2.0,2.1\n")
        monkeypatch.setattr(mio, "recorded_checksums", lambda: {})
        data = mio.load_bundled("tone")
        assert data.n == 2
        assert "no recorded checksum" in caplog.text

    def test_checksum_mismatch(self, tmp_path, monkeypatch):
        monkeypatch.setenv(mio.DATA_ENV, str(tmp_path))
        (tmp_path / "temperature.csv").write_text("x,y\n1882,-0.1\n")
        monkeypatch.setattr(mio, "recorded_checksums", lambda: {"temperature.csv": "0" * 64})
        with pytest.raises(ChecksumError):
            mio.load_bundled("temperature")

    def test_checksum_match(self, tmp_path, monkeypatch):
        monkeypatch.setenv(mio.DATA_ENV, str(tmp_path))
        path = tmp_path / "temperature.csv"
        path.write_text("x,y\n1882,-0.1\n1883,-0.2\n")
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        monkeypatch.setattr(mio, "recorded_checksums", lambda: {"temperature.csv": digest})
        assert mio.load_bundled("temperature").n == 2

    def test_checksum_file_parses(self):
        sums = mio.recorded_checksums()
        assert all(len(v) == 64 for v in sums.values())
