"""CSV ingestion and the model file format.

A model file is a zip archive of ``.npy`` arrays (readable with
``numpy.load``) plus ``header.json`` holding the format version, the ranks
and the scalar fit metadata. Entries are written uncompressed, in a fixed
order and with a fixed timestamp, so equal models give equal bytes.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ModelFileError, NonNumericCell, RaggedRows
from .model import ModelParams, RankSpec

FORMAT_VERSION = 1
_MISSING = {"", "na", "nan", "null", "none"}
_THETA_FIELDS = (
    "W", "W_perp", "C", "C_perp", "B",
    "sigma_t2", "sigma_to2", "sigma_uo2", "sigma_h2", "sigma_e2", "sigma_f2",
)
_META_ARRAYS = ("x_mean", "y_mean", "x_scale", "y_scale")


# -- CSV ----------------------------------------------------------------------


def read_csv(path):
    """Read a numeric CSV with a header row.

    Returns ``(names, data)``. Rows of the wrong length raise
    :class:`RaggedRows`; empty, missing-value or non-finite cells raise
    :class:`NonNumericCell`. Line and column are 1-based, the header is line 1.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = [h.strip() for h in next(reader)]
        except StopIteration:
            raise RaggedRows(f"{path}: empty file") from None
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise RaggedRows(f"{path}:{line}: expected {len(names)} fields, found {len(row)}")
            vals = []
            for col, cell in enumerate(row, start=1):
                cell = cell.strip()
                if cell.lower() in _MISSING:
                    raise NonNumericCell(f"{path}:{line}: missing value in column {col} ({names[col - 1]!r})")
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumericCell(f"{path}:{line}: non-numeric cell {cell!r} in column {col}") from None
                if not np.isfinite(v):
                    raise NonNumericCell(f"{path}:{line}: non-finite value {cell!r} in column {col}")
                vals.append(v)
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return names, data


def write_csv(path, names, data) -> None:
    """Write a header and rows; floats use the shortest exact representation."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(names):
        raise DimensionMismatch(f"{len(names)} names for data of shape {data.shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def read_pair(x_path, y_path):
    """Read X and Y and check that the row counts agree."""
    xn, X = read_csv(x_path)
    yn, Y = read_csv(y_path)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    return xn, X, yn, Y


# -- model file -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelFile:
    """Fitted (or true) parameters with what is needed to apply them to raw data.

    ``meta`` holds JSON-serializable scalars (iterations, convergence flag,
    log-likelihood, training RMSEP, fit configuration, column names);
    ``arrays`` holds the centering means and scales of X and Y.
    """

    theta: ModelParams
    meta: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def ranks(self) -> RankSpec:
        return self.theta.ranks

    def transform_x(self, X):
        return (X - self.arrays["x_mean"]) / self.arrays["x_scale"]

    def transform_y(self, Y):
        return (Y - self.arrays["y_mean"]) / self.arrays["y_scale"]

    def untransform_y(self, Y):
        return Y * self.arrays["y_scale"] + self.arrays["y_mean"]


def plain_model(theta: ModelParams, meta=None) -> ModelFile:
    """A model file with zero means and unit scales."""
    R = theta.ranks
    arrays = dict(x_mean=np.zeros(R.p), y_mean=np.zeros(R.q), x_scale=np.ones(R.p), y_scale=np.ones(R.q))
    return ModelFile(theta=theta, meta=dict(meta or {}), arrays=arrays)


def _npy_bytes(a) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(a, order="C"), allow_pickle=False)
    return buf.getvalue()


def _put(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_model(path, model: ModelFile) -> None:
    header = dict(
        format_version=model.format_version,
        ranks=dict(p=model.ranks.p, q=model.ranks.q, r=model.ranks.r, r_x=model.ranks.r_x, r_y=model.ranks.r_y),
        meta=model.meta,
    )
    arrays = model.theta.arrays()
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in _THETA_FIELDS:
            _put(zf, f"theta.{name}.npy", _npy_bytes(np.asarray(arrays[name], dtype=float)))
        for name in _META_ARRAYS:
            _put(zf, f"meta.{name}.npy", _npy_bytes(np.asarray(model.arrays[name], dtype=float)))


def load_model(path) -> ModelFile:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))

            def arr(name):
                return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

            version = header.get("format_version")
            if version != FORMAT_VERSION:
                raise ModelFileError(f"{path}: unsupported format version {version!r}")
            theta_arrays = {n: arr(f"theta.{n}.npy") for n in _THETA_FIELDS}
            arrays = {n: arr(f"meta.{n}.npy") for n in _META_ARRAYS}
    except ModelFileError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise ModelFileError(f"{path}: not a readable model file ({exc})") from None
    for n in ("sigma_e2", "sigma_f2"):
        theta_arrays[n] = float(theta_arrays[n])
    try:
        theta = ModelParams(**theta_arrays)
        ranks = RankSpec(**header["ranks"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"{path}: inconsistent model file ({exc})") from None
    if theta.ranks != ranks:
        raise ModelFileError(f"{path}: header ranks {ranks} do not match the stored arrays")
    return ModelFile(theta=theta, meta=header.get("meta", {}), arrays=arrays, format_version=version)
