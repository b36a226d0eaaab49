"""CSV and JSON input/output with atomic writes, and the bundled-data loader."""

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import ChecksumError, CsvFormatError, DataNotFoundError
from .model import Dataset

log = logging.getLogger(__name__)

DATA_ENV = "MOE_ROBUST_DATA_DIR"
BUNDLED = {"tone": "tone.csv", "temperature": "temperature.csv"}
CHECKSUM_FILE = "SHA256SUMS"


# ---------------------------------------------------------------------------
# writing


def fmt(value):
    """Cell text: shortest round-trip repr for floats, blank for missing."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "" if math.isnan(value) else repr(value)
    return str(value)


def atomic_write_text(path, text):
    """Write ``text`` to a temporary sibling and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def write_json(path, doc):
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=False) + "\n")


# ---------------------------------------------------------------------------
# reading


def _parse_number(text, path, line, col, name):
    stripped = text.strip()
    try:
        value = float(stripped)
    except ValueError:
        value = None
    if value is None or not math.isfinite(value) or stripped.lower() in ("nan", "inf", "-inf"):
        raise CsvFormatError(
            f"{path}:{line}: column {col} ({name!r}): cannot parse {text!r} as a finite number"
        )
    return value


def read_columns(path, required=("x", "y"), optional=("r",)):
    """Read named numeric columns from a headed CSV file.

    Returns a dict of column name -> float array; optional columns that are
    absent are left out. Errors name the 1-based line and column.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except UnicodeDecodeError as exc:
        raise CsvFormatError(f"{path}: not valid UTF-8 ({exc})") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CsvFormatError(f"{path}:1: empty file, expected a header row") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise CsvFormatError(f"{path}:1: header lacks column(s) {missing}; found {header}")
    wanted = [c for c in (*required, *optional) if c in header]
    index = {c: header.index(c) for c in wanted}
    cols = {c: [] for c in wanted}
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise CsvFormatError(
                f"{path}:{line}: expected {len(header)} fields, found {len(row)}"
            )
        for c in wanted:
            j = index[c]
            cols[c].append(_parse_number(row[j], path, line, j + 1, c))
    if not cols[wanted[0]]:
        raise CsvFormatError(f"{path}: no data rows")
    return {c: np.array(v) for c, v in cols.items()}


def read_dataset(path):
    """Dataset from a CSV with columns x, y and optional r (r defaults to x)."""
    cols = read_columns(path)
    return Dataset.from_covariates(cols["x"], cols["y"], cols.get("r"))


def read_covariates(path):
    cols = read_columns(path, required=("x",), optional=("r", "y"))
    x = cols["x"]
    r = cols.get("r", x)
    ones = np.ones((x.shape[0], 1))
    return np.hstack([ones, x[:, None]]), np.hstack([ones, r[:, None]])


def write_dataset(path, x, y, r=None, extra=None):
    """Inverse of :func:`read_dataset` with optional extra columns."""
    header = ["x", "y"] + (["r"] if r is not None else [])
    columns = [x, y] + ([r] if r is not None else [])
    for name, values in (extra or {}).items():
        header.append(name)
        columns.append(values)
    write_csv(path, header, zip(*columns))


# ---------------------------------------------------------------------------
# bundled data


def data_dir():
    override = os.environ.get(DATA_ENV)
    if override:
        return Path(override)
    return Path(str(resources.files("moe_robust") / "data"))


def recorded_checksums():
    """Checksums shipped with the package: file name -> sha256 hex digest."""
    path = Path(str(resources.files("moe_robust") / "data" / CHECKSUM_FILE))
    out = {}
    if not path.exists():
        return out
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        digest, name = line.split(maxsplit=1)
        out[name.lstrip("*")] = digest.lower()
    return out


def sha256_of(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def bundled_path(name):
    if name not in BUNDLED:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(BUNDLED)}")
    return data_dir() / BUNDLED[name]


def load_bundled(name):
    """Load the ``tone`` or ``temperature`` dataset.

    Looks in ``$MOE_ROBUST_DATA_DIR`` if set, else the package data
    directory, and checks the file against the recorded checksum when one
    is recorded.
    """
    path = bundled_path(name)
    if not path.is_file():
        raise DataNotFoundError(
            f"{name} data not found: expected a CSV with columns x,y at {path} "
            f"(set {DATA_ENV} to point at another directory)"
        )
    expected = recorded_checksums().get(BUNDLED[name])
    if expected is None:
        log.warning("no recorded checksum for %s; loading unverified", path)
    else:
        actual = sha256_of(path)
        if actual != expected:
            raise ChecksumError(f"{path}: sha256 {actual} does not match recorded {expected}")
    return read_dataset(path)
