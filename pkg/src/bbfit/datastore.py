"""
Columnar data handling for out-of-core fitting.

A :class:`ColumnStore` holds named float64 columns of equal length, either in
memory or memory-mapped from a binary file with the layout::

    b"BBFC"                magic
    u32                    format version (1)
    u64                    n_rows
    u32                    n_cols
    n_cols x (u16 + bytes) column names, UTF-8, length-prefixed
    n_cols x n_rows f64    payload, column-major

All integers and floats are little-endian. Row batches are gathered with
:meth:`ColumnStore.gather`, so only the requested rows are materialized.
"""

import csv
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import CSVParseError, NonNumericColumnError, StoreError

MAGIC = b"BBFC"
VERSION = 1
_MISSING = {"", "na", "nan", "null", "none", "-nan", "+nan"}


class ColumnStore:
    """Immutable table of named float64 columns.

    Parameters
    ----------
    columns : dict of str -> array_like
        Equal-length columns, kept in insertion order.
    path : str, optional
        Backing file when opened with :meth:`open`.
    """

    def __init__(self, columns, path=None):
        cols = {}
        n = None
        for name, values in columns.items():
            arr = np.asarray(values, dtype="<f8")
            if arr.ndim != 1:
                raise StoreError(f"column {name!r} is not one-dimensional")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise StoreError(
                    f"column {name!r} has {arr.shape[0]} rows, expected {n}"
                )
            cols[str(name)] = arr
        self._columns = cols
        self._n_rows = 0 if n is None else int(n)
        self.path = path

    # -- basic accessors --------------------------------------------------
    @property
    def n_rows(self):
        return self._n_rows

    @property
    def names(self):
        return list(self._columns)

    @property
    def file_backed(self):
        return self.path is not None

    def __len__(self):
        return self._n_rows

    def __contains__(self, name):
        return name in self._columns

    def __repr__(self):
        where = f", path={self.path!r}" if self.path else ""
        return f"ColumnStore(n_rows={self.n_rows}, columns={self.names}{where})"

    def column(self, name):
        """Full column (a read-only memmap view for file-backed stores)."""
        self._check_names([name])
        return self._columns[name]

    def _check_names(self, names):
        missing = [c for c in names if c not in self._columns]
        if missing:
            raise KeyError(f"unknown column(s) {missing}; available: {self.names}")

    def gather(self, ids, columns=None):
        """Rows ``ids`` (in the given order) of ``columns`` as a dict of arrays."""
        columns = self.names if columns is None else list(columns)
        self._check_names(columns)
        ids = np.asarray(ids)
        if ids.dtype.kind not in "iu":
            raise IndexError("row ids must be integers")
        if ids.size and (ids.min() < 0 or ids.max() >= self._n_rows):
            raise IndexError(f"row ids out of range [0, {self._n_rows})")
        return {c: np.array(self._columns[c][ids], dtype=float) for c in columns}

    def read_slice(self, start, stop, columns=None):
        """Contiguous rows ``start:stop`` as a dict of arrays (copies)."""
        columns = self.names if columns is None else list(columns)
        self._check_names(columns)
        return {c: np.array(self._columns[c][start:stop], dtype=float) for c in columns}

    def to_dict(self):
        return {c: np.array(v) for c, v in self._columns.items()}

    def with_columns(self, extra):
        """New in-memory store with ``extra`` columns added or replaced."""
        cols = self.to_dict()
        cols.update(extra)
        return ColumnStore(cols)

    def select(self, columns):
        self._check_names(columns)
        return ColumnStore({c: np.array(self._columns[c]) for c in columns})

    # -- persistence --------------------------------------------------------
    def save(self, path):
        """Write the store in the binary column format; returns ``path``."""
        with open(path, "wb") as fh:
            fh.write(_header(self.names, self._n_rows))
            for c in self.names:
                fh.write(np.ascontiguousarray(self._columns[c], dtype="<f8").tobytes())
        return path

    @classmethod
    def open(cls, path):
        """Memory-map a store file written by :meth:`save` or :func:`ingest_csv`."""
        try:
            size = os.path.getsize(path)
            with open(path, "rb") as fh:
                names, n_rows, offset = _read_header(fh)
        except FileNotFoundError as exc:
            raise StoreError(f"no such store file: {path}") from exc
        expected = offset + 8 * n_rows * len(names)
        if size != expected:
            raise StoreError(f"{path}: file size {size} does not match header ({expected})")
        store = cls({}, path=str(path))
        if names and n_rows:
            mm = np.memmap(path, dtype="<f8", mode="r", offset=offset, shape=(len(names), n_rows))
            store._columns = {name: mm[j] for j, name in enumerate(names)}
        else:
            store._columns = {name: np.zeros(0) for name in names}
        store._n_rows = n_rows
        return store


def _header(names, n_rows):
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", n_rows), struct.pack("<I", len(names))]
    if len(set(names)) != len(names):
        raise StoreError("column names must be unique")
    for name in names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise StoreError(f"column name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(parts)


def _read_header(fh):
    def take(n):
        buf = fh.read(n)
        if len(buf) != n:
            raise StoreError("truncated store header")
        return buf

    if take(4) != MAGIC:
        raise StoreError("not a column store file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise StoreError(f"unsupported store version {version}")
    (n_rows,) = struct.unpack("<Q", take(8))
    (n_cols,) = struct.unpack("<I", take(4))
    names = []
    for _ in range(n_cols):
        (length,) = struct.unpack("<H", take(2))
        names.append(take(length).decode("utf-8"))
    return names, int(n_rows), fh.tell()


def as_store(data):
    """Wrap a mapping of arrays (or a DataFrame) as an in-memory store."""
    if isinstance(data, ColumnStore):
        return data
    if hasattr(data, "columns") and hasattr(data, "to_numpy"):
        return ColumnStore({str(c): data[c].to_numpy(dtype=float) for c in data.columns})
    return ColumnStore(dict(data))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_cell(text):
    value = float(text)
    if math.isnan(value):
        raise ValueError("nan")
    return value


def ingest_csv(csv_path, out_path=None, columns=None, chunk_rows=65536):
    """Read a headered numeric CSV into a column store.

    Two streaming passes: the first validates every cell and counts rows,
    the second fills the (memory-mapped) payload chunk by chunk.

    Parameters
    ----------
    csv_path : str
    out_path : str, optional
        Store file to create; without it the store is built in memory.
    columns : list of str, optional
        Subset of header columns to keep (default: all).

    Raises
    ------
    CSVParseError
        Empty file, ragged rows, missing values or unparseable cells; the
        message carries the 1-based data row and the column name.
    NonNumericColumnError
        A column without a single numeric cell (e.g. categorical data).
    """
    try:
        fh = open(csv_path, newline="", encoding="utf-8")
    except FileNotFoundError as exc:
        raise StoreError(f"no such CSV file: {csv_path}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CSVParseError(f"{csv_path}: empty file, no header row")
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise CSVParseError(f"{csv_path}: duplicate column names in header")
        keep = header if columns is None else list(columns)
        unknown = [c for c in keep if c not in header]
        if unknown:
            raise CSVParseError(f"{csv_path}: unknown column(s) {unknown}")
        idx = [header.index(c) for c in keep]

        n_rows = 0
        numeric_seen = [False] * len(keep)
        first_bad = [None] * len(keep)
        for row in reader:
            if not row:
                continue
            n_rows += 1
            if len(row) != len(header):
                raise CSVParseError(
                    f"expected {len(header)} fields, found {len(row)}", row=n_rows
                )
            for j, i in enumerate(idx):
                cell = row[i].strip()
                if cell.lower() in _MISSING:
                    raise CSVParseError("missing value", row=n_rows, column=keep[j])
                try:
                    _parse_cell(cell)
                    numeric_seen[j] = True
                except ValueError:
                    if first_bad[j] is None:
                        first_bad[j] = (n_rows, cell)
        for j, bad in enumerate(first_bad):
            if bad is None:
                continue
            if not numeric_seen[j]:
                raise NonNumericColumnError(
                    f"non-numeric column (first value {bad[1]!r}); only numeric data is supported",
                    row=bad[0], column=keep[j],
                )
            raise CSVParseError(f"cannot parse {bad[1]!r} as a number", row=bad[0], column=keep[j])

    if out_path is None:
        payload = np.empty((len(keep), n_rows), dtype="<f8")
    else:
        header_bytes = _header(keep, n_rows)
        with open(out_path, "wb") as out:
            out.write(header_bytes)
            out.truncate(len(header_bytes) + 8 * n_rows * len(keep))
        payload = (
            np.memmap(out_path, dtype="<f8", mode="r+", offset=len(header_bytes), shape=(len(keep), n_rows))
            if n_rows and keep else None
        )

    if payload is not None and n_rows:
        with open(csv_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            buf = np.empty((len(keep), chunk_rows))
            filled, start = 0, 0
            for row in reader:
                if not row:
                    continue
                for j, i in enumerate(idx):
                    buf[j, filled] = float(row[i])
                filled += 1
                if filled == chunk_rows:
                    payload[:, start:start + filled] = buf
                    start += filled
                    filled = 0
            if filled:
                payload[:, start:start + filled] = buf[:, :filled]
        if isinstance(payload, np.memmap):
            payload.flush()

    if out_path is None:
        return ColumnStore({c: payload[j] for j, c in enumerate(keep)} if n_rows else {c: [] for c in keep})
    del payload
    return ColumnStore.open(out_path)


def write_csv(store, path, columns=None):
    """Write columns of a store to CSV with round-trip exact float formatting."""
    columns = store.names if columns is None else list(columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for start in range(0, store.n_rows, 65536):
            block = store.read_slice(start, start + 65536, columns)
            for vals in zip(*(block[c] for c in columns)):
                w.writerow([repr(float(v)) for v in vals])
    return path


def read_batch(store, ids, columns):
    """Dense ``len(ids) x len(columns)`` block of the requested rows."""
    block = as_store(store).gather(ids, columns)
    return np.column_stack([block[c] for c in columns]) if columns else np.empty((len(ids), 0))


# ---------------------------------------------------------------------------
# batch plans
# ---------------------------------------------------------------------------

SAMPLING = ("with-replacement", "epoch")


@dataclass
class BatchPlan:
    """Sequence of row-index batches ``b_1, ..., b_T``."""

    batch_ids: list
    sampling: str = "with-replacement"
    seed: int = None
    n_rows: int = None
    batch_size: int = None

    def __len__(self):
        return len(self.batch_ids)

    def __iter__(self):
        return iter(self.batch_ids)

    def __getitem__(self, t):
        return self.batch_ids[t]


def make_batches(n_rows, T, batch_size, sampling="with-replacement", seed=None):
    """Draw a batch plan.

    ``with-replacement`` draws every batch independently as a uniform random
    subset of ``batch_size`` distinct rows; ``epoch`` chops a fresh random
    permutation per pass into ``ceil(n_rows / batch_size)`` batches (the last
    one possibly shorter). Row ids are sorted within each batch.
    """
    n_rows, T, batch_size = int(n_rows), int(T), int(batch_size)
    if sampling not in SAMPLING:
        raise ValueError(f"sampling must be one of {SAMPLING}, got {sampling!r}")
    if batch_size < 1 or batch_size > n_rows:
        raise ValueError(f"batch_size must lie in [1, n_rows={n_rows}], got {batch_size}")
    if T < 1:
        raise ValueError("T must be positive")
    rng = np.random.default_rng(seed)
    batches = []
    if sampling == "with-replacement":
        for _ in range(T):
            if batch_size == n_rows:
                batches.append(np.arange(n_rows))
            else:
                batches.append(np.sort(rng.choice(n_rows, size=batch_size, replace=False)))
    else:
        while len(batches) < T:
            perm = rng.permutation(n_rows)
            for start in range(0, n_rows, batch_size):
                batches.append(np.sort(perm[start:start + batch_size]))
                if len(batches) == T:
                    break
    return BatchPlan(batches, sampling=sampling, seed=seed, n_rows=n_rows, batch_size=batch_size)


# ---------------------------------------------------------------------------
# ECDF standardization
# ---------------------------------------------------------------------------


@dataclass
class ECDFTable:
    """Empirical CDF of one training column, ``F(v) = #{x_i <= v} / n``."""

    values: np.ndarray
    probs: np.ndarray
    n: int

    @classmethod
    def from_sample(cls, x):
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            raise ValueError("cannot build an ECDF from an empty column")
        values, counts = np.unique(x, return_counts=True)
        return cls(values=values, probs=np.cumsum(counts) / x.size, n=int(x.size))

    def __call__(self, x):
        """Interpolated ECDF, clamped to ``[1/(n+1), 1]``."""
        x = np.asarray(x, dtype=float)
        lo = 1.0 / (self.n + 1)
        if self.values.size == 1:
            out = np.where(x >= self.values[0], 1.0, lo)
        else:
            out = np.interp(x, self.values, self.probs, left=lo, right=1.0)
        return np.clip(out, lo, 1.0)

    def to_dict(self):
        return {"values": self.values.tolist(), "probs": self.probs.tolist(), "n": self.n}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["values"], float), np.asarray(d["probs"], float), int(d["n"]))


def ecdf_standardize(store, columns):
    """Replace ``columns`` by their training ECDF values.

    Returns the new in-memory store and a dict of :class:`ECDFTable` that
    transforms new data consistently. Tied values share the largest rank,
    so each output equals the fraction of training values ``<=`` it.
    """
    store = as_store(store)
    tables = {c: ECDFTable.from_sample(store.column(c)) for c in columns}
    return store.with_columns({c: tables[c](store.column(c)) for c in columns}), tables


class ECDFTransformer(TransformerMixin, BaseEstimator):
    """Column-wise ECDF standardization of a 2-D array to ``(0, 1]``.

    Examples
    --------
    >>> ECDFTransformer().fit_transform([[3.0], [1.0], [2.0]]).ravel().tolist()
    [1.0, 0.3333333333333333, 0.6666666666666666]
    """

    def fit(self, X, y=None):
        from ._validation import check_2d

        X = check_2d(X)
        self.tables_ = [ECDFTable.from_sample(X[:, j]) for j in range(X.shape[1])]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        from ._validation import check_2d

        check_is_fitted(self, "tables_")
        X = check_2d(X, n_features=self.n_features_in_)
        return np.column_stack([t(X[:, j]) for j, t in enumerate(self.tables_)])
