"""
Model terms: design and penalty matrices.

Supported kinds are ``intercept``, ``linear``, ``pspline`` (univariate
B-spline basis with a difference penalty) and ``tensor2d`` (row-wise
Kronecker product of two marginal P-spline bases with one smoothing
parameter per margin).

Knots and identifiability constraints are fixed once from a scan over the
full data (see :func:`prepare_terms`); afterwards a :class:`Term` builds
design rows for any batch, and rows built batchwise are identical to the
corresponding rows of a full-data build.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .exceptions import DegenerateRangeError, DimensionError

KINDS = ("intercept", "linear", "pspline", "tensor2d")
DEFAULT_KNOTS = {"pspline": 20, "tensor2d": 5}


@dataclass(frozen=True)
class TermSpec:
    """Declarative description of one additive model term.

    Parameters
    ----------
    kind : {"intercept", "linear", "pspline", "tensor2d"}
    covariates : tuple of str
        One column name (two for ``tensor2d``; none for the intercept).
    n_knots : int, optional
        Number of equidistant knots on the covariate range, per margin.
        Defaults to 20 for ``pspline`` and 5 for ``tensor2d``.
    degree : int
        B-spline degree.
    penalty_order : int
        Order of the difference penalty.
    center : bool, optional
        Apply a sum-to-zero constraint. Defaults to True for spline kinds.
    bounds : tuple, optional
        Fixed ``(lo, hi)`` covariate range per covariate, e.g. ``((0, 1),)``
        for ECDF-standardized inputs; otherwise taken from the data scan.
    """

    kind: str = "pspline"
    covariates: tuple = ()
    n_knots: int = None
    degree: int = 3
    penalty_order: int = 2
    center: bool = None
    bounds: tuple = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        want = {"intercept": 0, "linear": 1, "pspline": 1, "tensor2d": 2}[self.kind]
        if len(self.covariates) != want:
            raise DimensionError(
                f"{self.kind} term needs {want} covariate(s), got {self.covariates}"
            )
        if self.n_knots is None and self.kind in DEFAULT_KNOTS:
            object.__setattr__(self, "n_knots", DEFAULT_KNOTS[self.kind])
        if self.center is None or self.kind == "intercept":
            object.__setattr__(self, "center", self.is_smooth)
        if self.is_smooth:
            if self.degree < 0:
                raise ValueError("degree must be >= 0")
            if self.n_knots < self.penalty_order + 1:
                raise ValueError("n_knots must be >= penalty_order + 1")
            if self.n_knots + self.degree - 1 <= self.penalty_order:
                raise ValueError("too few basis functions for the penalty order")
        if self.bounds is not None:
            object.__setattr__(
                self, "bounds", tuple(tuple(map(float, b)) for b in self.bounds)
            )

    @property
    def is_smooth(self):
        return self.kind in ("pspline", "tensor2d")

    @property
    def label(self):
        if self.kind == "intercept":
            return "(Intercept)"
        if self.kind == "linear":
            return self.covariates[0]
        if self.kind == "pspline":
            return f"s({self.covariates[0]})"
        return f"te({','.join(self.covariates)})"

    def to_dict(self):
        out = {"kind": self.kind, "covariates": list(self.covariates)}
        if self.is_smooth:
            out.update(
                n_knots=self.n_knots,
                degree=self.degree,
                penalty_order=self.penalty_order,
            )
        out["center"] = self.center
        if self.bounds is not None:
            out["bounds"] = [list(b) for b in self.bounds]
        return out


def parse_term(term):
    """Build a :class:`TermSpec` from a spec, a dict, or shorthand text.

    Shorthand: ``"s(x1)"``, ``"te(lon,lat)"``, ``"lin(x1)"`` or a bare
    column name (linear), ``"1"`` for the intercept.
    """
    if isinstance(term, TermSpec):
        return term
    if isinstance(term, dict):
        d = dict(term)
        if "bounds" in d and d["bounds"] is not None:
            d["bounds"] = tuple(tuple(b) for b in d["bounds"])
        d["covariates"] = tuple(d.get("covariates", ()))
        return TermSpec(**d)
    text = str(term).replace(" ", "")
    if text in ("1", "(Intercept)", "intercept"):
        return TermSpec(kind="intercept")
    for prefix, kind in (("s(", "pspline"), ("te(", "tensor2d"), ("lin(", "linear")):
        if text.startswith(prefix) and text.endswith(")"):
            covs = tuple(c for c in text[len(prefix):-1].split(",") if c)
            return TermSpec(kind=kind, covariates=covs)
    return TermSpec(kind="linear", covariates=(text,))


# ---------------------------------------------------------------------------
# B-spline machinery
# ---------------------------------------------------------------------------


def build_knots(x_min, x_max, n_knots, degree):
    """Equidistant knots on ``[x_min, x_max]`` extended by ``degree`` knots per side.

    >>> build_knots(0.0, 1.0, 4, 1)
    array([-0.33333333,  0.        ,  0.33333333,  0.66666667,  1.        ,
            1.33333333])
    """
    x_min, x_max = float(x_min), float(x_max)
    if not (np.isfinite(x_min) and np.isfinite(x_max)) or x_max <= x_min:
        raise DegenerateRangeError(f"degenerate covariate range [{x_min}, {x_max}]")
    if n_knots < 2:
        raise ValueError("need at least two knots")
    h = (x_max - x_min) / (n_knots - 1)
    idx = np.arange(-degree, n_knots + degree)
    knots = x_min + idx * h
    # pin the range ends exactly
    knots[degree] = x_min
    knots[degree + n_knots - 1] = x_max
    return knots


def n_basis(knots, degree):
    return len(knots) - degree - 1


def local_basis(knots, x, degree=3):
    """Nonzero B-spline values per row.

    Returns
    -------
    first : ndarray of int, shape (n,)
        Index of the first basis function that is nonzero at ``x``.
    values : ndarray, shape (n, degree + 1)
        Values of basis functions ``first, ..., first + degree``.
    """
    knots = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    if n_basis(knots, degree) < 1:
        raise DimensionError("knot vector too short for the degree")
    lo, hi = knots[degree], knots[len(knots) - degree - 1]
    x = np.clip(x, lo, hi)
    # interval index i with knots[i] <= x < knots[i+1]; the right end goes
    # into the last interval
    i = np.searchsorted(knots, x, side="right") - 1
    i = np.clip(i, degree, len(knots) - degree - 2)

    n = x.shape[0]
    N = np.zeros((degree + 1, n))
    N[0] = 1.0
    left = np.empty((degree + 1, n))
    right = np.empty((degree + 1, n))
    for j in range(1, degree + 1):
        left[j] = x - knots[i + 1 - j]
        right[j] = knots[i + j] - x
        saved = np.zeros(n)
        for r in range(j):
            temp = N[r] / (right[r + 1] + left[j - r])
            N[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        N[j] = saved
    return i - degree, N.T


def eval_basis(knots, x, degree=3):
    """B-spline design matrix by the Cox--de Boor recursion.

    Rows sum to one on ``[knots[degree], knots[-degree-1]]``. Inputs
    outside that range are clamped to it, so the boundary basis values are
    carried forward (constant extrapolation).
    """
    first, N = local_basis(knots, x, degree)
    n = first.shape[0]
    B = np.zeros((n, n_basis(np.asarray(knots), degree)))
    rows = np.arange(n)
    for r in range(degree + 1):
        B[rows, first + r] = N[:, r]
    return B


def difference_penalty(p, order):
    """``D^T D`` for the ``order``-th difference operator on ``p`` coefficients."""
    p, order = int(p), int(order)
    if order < 1 or p <= order:
        raise DimensionError(f"need p > order >= 1, got p={p}, order={order}")
    D = np.diff(np.eye(p), n=order, axis=0)
    return D.T @ D


def row_kronecker(A, B):
    """Row-wise Kronecker product: row i is ``kron(A[i], B[i])``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[0] != B.shape[0]:
        raise DimensionError("row counts differ")
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


# ---------------------------------------------------------------------------
# constraints and term matrices
# ---------------------------------------------------------------------------


@dataclass
class Constraint:
    """Sum-to-zero reparameterization ``beta_raw = Z @ beta``.

    ``Z`` spans the null space of the reference column means, so every
    column of ``design @ Z`` has zero mean on the reference data.  Linear
    terms use ``mode="subtract"`` instead: the reference mean is subtracted
    from the covariate and ``Z`` is the identity.
    """

    means: np.ndarray
    Z: np.ndarray
    mode: str = "nullspace"

    @classmethod
    def from_means(cls, means):
        means = np.asarray(means, dtype=float).ravel()
        p = means.size
        scale = max(1.0, float(np.max(np.abs(means)))) if p else 1.0
        if p == 0 or np.max(np.abs(means)) <= 1e-10 * scale:
            # already centered: nothing to remove
            return cls(means=means, Z=np.eye(p))
        Q, _ = np.linalg.qr(means.reshape(-1, 1), mode="complete")
        return cls(means=means, Z=Q[:, 1:])

    @classmethod
    def subtract(cls, means):
        means = np.asarray(means, dtype=float).ravel()
        return cls(means=means, Z=np.eye(means.size), mode="subtract")

    @property
    def is_identity(self):
        return self.mode == "nullspace" and self.Z.shape[0] == self.Z.shape[1]


class DenseDesign:
    """Dense design rows with the products the fitting engine needs."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)

    @property
    def shape(self):
        return self.A.shape

    def __matmul__(self, v):
        return self.A @ v

    def rmatvec(self, v):
        """``X' v``."""
        return self.A.T @ v

    def gram(self, W):
        """``X' diag(W) X``."""
        return (self.A.T * W) @ self.A


class FactoredDesign:
    """Design ``B @ Z`` kept as a sparse local basis ``B`` and a dense ``Z``.

    Products are taken through ``B`` and ``Z`` in turn; each output row
    still depends only on its own row of ``B``.
    """

    def __init__(self, B, Z):
        self.B = B
        self.Z = Z

    @property
    def shape(self):
        return (self.B.shape[0], self.Z.shape[1])

    def __matmul__(self, v):
        return self.B @ (self.Z @ v)

    def rmatvec(self, v):
        """``X' v``."""
        return self.Z.T @ (self.B.T @ v)

    def gram(self, W):
        """``X' diag(W) X``."""
        # a transient dense copy of B is much faster than a sparse product
        B = self.B.toarray()
        return self.Z.T @ ((B.T * W) @ B) @ self.Z


def apply_centering(design, penalties, means=None):
    """Absorb a sum-to-zero constraint into ``design`` and ``penalties``.

    Parameters
    ----------
    design : ndarray (n, p)
    penalties : ndarray (p, p) or list of them
    means : ndarray (p,), optional
        Reference column means; computed from ``design`` when omitted.

    Returns
    -------
    design_c, penalties_c, constraint
        ``penalties_c`` mirrors the input (single matrix or list).
    """
    design = np.asarray(design, dtype=float)
    single = not isinstance(penalties, (list, tuple))
    pens = [penalties] if single else list(penalties)
    if means is None:
        means = design.mean(axis=0)
    con = Constraint.from_means(means)
    if con.is_identity:
        out = [np.asarray(K, dtype=float) for K in pens]
        return design, (out[0] if single else out), con
    Z = con.Z
    out = [Z.T @ np.asarray(K, dtype=float) @ Z for K in pens]
    return design @ Z, (out[0] if single else out), con


@dataclass
class TermMatrices:
    """Design rows plus penalty components of a term for one batch.

    The penalty for smoothing parameters ``tau`` is
    ``sum(tau[l] * penalties[l])``.
    """

    design: np.ndarray
    penalties: list
    knots: list = field(default_factory=list)
    constraint: Constraint = None

    def penalty(self, tau):
        p = self.design.shape[1]
        K = np.zeros((p, p))
        for t, Kl in zip(np.atleast_1d(tau), self.penalties):
            K += t * Kl
        return K


def tensor_design(spec, knots_1, knots_2, x1, x2):
    """Tensor-product P-spline matrices (uncentered) for two covariates."""
    spec = parse_term(spec)
    if spec.kind != "tensor2d":
        raise DimensionError("tensor_design needs a tensor2d spec")
    B1 = eval_basis(knots_1, x1, spec.degree)
    B2 = eval_basis(knots_2, x2, spec.degree)
    p1, p2 = B1.shape[1], B2.shape[1]
    K1 = difference_penalty(p1, spec.penalty_order)
    K2 = difference_penalty(p2, spec.penalty_order)
    penalties = [np.kron(K1, np.eye(p2)), np.kron(np.eye(p1), K2)]
    return TermMatrices(
        design=row_kronecker(B1, B2),
        penalties=penalties,
        knots=[np.asarray(knots_1), np.asarray(knots_2)],
    )


class Term:
    """A model term with knots and constraint fixed.

    Build with :func:`prepare_terms` (data scan) or :meth:`from_dict`.
    """

    def __init__(self, spec, knots=None, constraint=None):
        self.spec = parse_term(spec)
        self.knots = [np.asarray(k, dtype=float) for k in (knots or [])]
        self.constraint = constraint
        self._penalties = self._build_penalties()

    def __repr__(self):
        return f"Term({self.spec.label}, n_coef={self.n_coef})"

    @property
    def label(self):
        return self.spec.label

    @property
    def covariates(self):
        return self.spec.covariates

    @property
    def n_raw(self):
        kind = self.spec.kind
        if kind in ("intercept", "linear"):
            return 1
        sizes = [n_basis(k, self.spec.degree) for k in self.knots]
        return int(np.prod(sizes))

    @property
    def n_coef(self):
        if self.constraint is not None:
            return self.constraint.Z.shape[1]
        return self.n_raw

    @property
    def n_tau(self):
        return len(self._penalties)

    @property
    def penalties(self):
        return self._penalties

    def _build_penalties(self):
        spec = self.spec
        if spec.kind == "pspline":
            raw = [difference_penalty(n_basis(self.knots[0], spec.degree), spec.penalty_order)]
        elif spec.kind == "tensor2d":
            p1, p2 = (n_basis(k, spec.degree) for k in self.knots)
            K1 = difference_penalty(p1, spec.penalty_order)
            K2 = difference_penalty(p2, spec.penalty_order)
            raw = [np.kron(K1, np.eye(p2)), np.kron(np.eye(p1), K2)]
        else:
            return []
        if self.constraint is None or self.constraint.is_identity or self.constraint.mode == "subtract":
            return raw
        Z = self.constraint.Z
        return [Z.T @ K @ Z for K in raw]

    def raw_design(self, data):
        """Unconstrained design rows; ``data`` maps covariate names to arrays."""
        spec = self.spec
        if spec.kind == "intercept":
            n = _n_rows(data)
            return np.ones((n, 1))
        if spec.kind == "linear":
            return np.asarray(data[spec.covariates[0]], dtype=float).reshape(-1, 1)
        if spec.kind == "pspline":
            return eval_basis(self.knots[0], data[spec.covariates[0]], spec.degree)
        B1 = eval_basis(self.knots[0], data[spec.covariates[0]], spec.degree)
        B2 = eval_basis(self.knots[1], data[spec.covariates[1]], spec.degree)
        return row_kronecker(B1, B2)

    def _local(self, data):
        """Column indices and values of the nonzero raw design entries."""
        spec = self.spec
        f1, N1 = local_basis(self.knots[0], data[spec.covariates[0]], spec.degree)
        if spec.kind == "pspline":
            return [f1 + r for r in range(N1.shape[1])], [N1[:, r] for r in range(N1.shape[1])]
        f2, N2 = local_basis(self.knots[1], data[spec.covariates[1]], spec.degree)
        p2 = n_basis(self.knots[1], spec.degree)
        idx, val = [], []
        for r in range(N1.shape[1]):
            for q in range(N2.shape[1]):
                idx.append((f1 + r) * p2 + f2 + q)
                val.append(N1[:, r] * N2[:, q])
        return idx, val

    def design(self, data):
        """Constrained design rows.

        Rows depend only on their own covariate values (no cross-row
        reductions), so a batch's rows equal the matching full-data rows
        bit for bit.
        """
        X = self.batch_design(data)
        return X.A if isinstance(X, DenseDesign) else X @ np.eye(self.n_coef)

    def batch_design(self, data):
        """Design rows as a :class:`DenseDesign` or :class:`FactoredDesign`.

        Smooth terms keep the sparse local basis and the constraint apart,
        so a batch costs ``degree + 1`` (or its square for tensors) stored
        values per row instead of one per coefficient.
        """
        con = self.constraint
        if con is None or con.is_identity or self.spec.kind in ("intercept", "linear"):
            X = self.raw_design(data)
            if con is not None and con.mode == "subtract" and not con.is_identity:
                X = X - con.means
            return DenseDesign(X)
        idx, val = self._local(data)
        n, k = idx[0].shape[0], len(idx)
        B = sparse.csr_matrix(
            (np.column_stack(val).ravel(), np.column_stack(idx).ravel(), np.arange(0, n * k + 1, k)),
            shape=(n, self.n_raw),
        )
        return FactoredDesign(B, con.Z)

    def penalty(self, tau):
        p = self.n_coef
        K = np.zeros((p, p))
        for t, Kl in zip(np.atleast_1d(tau), self._penalties):
            K += t * Kl
        return K

    def matrices(self, data):
        return TermMatrices(
            design=self.design(data),
            penalties=list(self._penalties),
            knots=list(self.knots),
            constraint=self.constraint,
        )

    def raw_coefficients(self, beta):
        """Coefficients on the unconstrained B-spline basis."""
        beta = np.asarray(beta, dtype=float)
        if self.constraint is None or self.constraint.is_identity or self.constraint.mode == "subtract":
            return beta
        return self.constraint.Z @ beta

    def to_dict(self):
        out = {"spec": self.spec.to_dict(), "knots": [k.tolist() for k in self.knots]}
        if self.constraint is not None:
            out["constraint"] = {
                "means": self.constraint.means.tolist(),
                "Z": self.constraint.Z.tolist(),
                "mode": self.constraint.mode,
            }
        return out

    @classmethod
    def from_dict(cls, d):
        con = None
        if d.get("constraint") is not None:
            con = Constraint(
                means=np.asarray(d["constraint"]["means"], dtype=float),
                Z=np.asarray(d["constraint"]["Z"], dtype=float).reshape(
                    len(d["constraint"]["means"]), -1
                ),
                mode=d["constraint"].get("mode", "nullspace"),
            )
        return cls(parse_term(d["spec"]), knots=d.get("knots") or [], constraint=con)


def _n_rows(data):
    for v in data.values():
        return len(v)
    raise DimensionError("cannot infer the number of rows of an empty batch")


def _iter_chunks(data, columns, chunk_size):
    """Yield column dicts over row chunks of a store or an in-memory mapping."""
    if hasattr(data, "read_slice"):
        n = data.n_rows
        for start in range(0, n, chunk_size):
            yield data.read_slice(start, min(n, start + chunk_size), columns)
    else:
        n = _n_rows(data)
        for start in range(0, n, chunk_size):
            yield {c: np.asarray(data[c], dtype=float)[start:start + chunk_size] for c in columns}


def prepare_terms(specs, data, chunk_size=100_000):
    """Fix knots and centering constraints from streaming passes over ``data``.

    ``data`` is a column store (anything with ``n_rows`` and
    ``read_slice(start, stop, columns)``) or a mapping of column arrays.
    Only ``chunk_size`` rows are materialized at a time.
    """
    specs = [parse_term(s) for s in specs]
    covs = sorted({c for s in specs for c in s.covariates if s.is_smooth})
    lo = {c: np.inf for c in covs}
    hi = {c: -np.inf for c in covs}
    if covs:
        for chunk in _iter_chunks(data, covs, chunk_size):
            for c in covs:
                if len(chunk[c]):
                    lo[c] = min(lo[c], float(np.min(chunk[c])))
                    hi[c] = max(hi[c], float(np.max(chunk[c])))

    terms = []
    for s in specs:
        knots = []
        if s.is_smooth:
            for idx, c in enumerate(s.covariates):
                a, b = s.bounds[idx] if s.bounds is not None else (lo[c], hi[c])
                knots.append(build_knots(a, b, s.n_knots, s.degree))
        terms.append(Term(s, knots=knots))

    centered = [t for t in terms if t.spec.center]
    if centered:
        sums = [np.zeros(t.n_raw) for t in centered]
        n = 0
        need = sorted({c for t in centered for c in t.covariates})
        for chunk in _iter_chunks(data, need, chunk_size):
            m = _n_rows(chunk) if chunk else 0
            if m == 0:
                continue
            n += m
            for t, acc in zip(centered, sums):
                acc += t.raw_design(chunk).sum(axis=0)
        if n == 0:
            raise DimensionError("cannot center terms on an empty dataset")
        for t, acc in zip(centered, sums):
            if t.spec.kind == "linear":
                t.constraint = Constraint.subtract(acc / n)
            else:
                t.constraint = Constraint.from_means(acc / n)
            t._penalties = t._build_penalties()
    return terms
