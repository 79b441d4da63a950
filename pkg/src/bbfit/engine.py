"""
Batchwise backfitting.

Every iteration ``t`` pairs the batch ``b_t`` with the next batch
``b_{t+1}`` (wrapping around at the end of the plan).  Terms are visited in
declaration order within parameters in declaration order.  A term update

1. solves the penalized IWLS system on ``b_t``,
2. optionally re-selects its smoothing parameters by minimizing an
   information criterion evaluated on ``b_{t+1}`` (golden-section search)
   or by one slice-sampling sweep,
3. blends with the current coefficients, ``beta + nu * (b - beta)``, and
4. is kept only if the next-batch log-likelihood improves enough.

Three policies are available: ``plain`` (every term, ``nu`` as given),
``boost`` (only the best term per iteration; variable selection) and
``resample`` (``nu = 1``, always accept; the estimate is the average of the
path after burn-in).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .datastore import BatchPlan, as_store
from .exceptions import DimensionError, FitError, SingularSystemError
from .families import WEIGHT_FLOOR, get_family
from .terms import Term, TermMatrices, parse_term, prepare_terms

POLICIES = ("plain", "boost", "resample")
CRITERIA = ("AIC", "BIC", "loglik")
TAU_MIN, TAU_MAX = 1e-10, 1e10
TAU_UPDATES = ("search", "slice", "fixed")


# ---------------------------------------------------------------------------
# model specification
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Family plus prepared terms for each distribution parameter.

    Attributes
    ----------
    family : Family
    terms : dict
        Parameter name -> list of :class:`~bbfit.terms.Term`, in update order.
    response : str
        Name of the response column.
    """

    family: object
    terms: dict
    response: str = "y"

    def __post_init__(self):
        self.family = get_family(self.family)
        for name in self.terms:
            if name not in self.family.param_names:
                raise KeyError(f"{self.family.name} has no parameter {name!r}")
        # parameters in the family's declaration order
        self.terms = {p: list(self.terms.get(p, [])) for p in self.family.param_names}

    @property
    def blocks(self):
        """List of ``(param, term)`` pairs in update order."""
        return [(p, t) for p in self.terms for t in self.terms[p]]

    @property
    def labels(self):
        return [f"{p}:{t.label}" for p, t in self.blocks]

    @property
    def block_sizes(self):
        return [t.n_coef for _, t in self.blocks]

    @property
    def n_coef(self):
        return int(sum(self.block_sizes))

    @property
    def covariates(self):
        return sorted({c for _, t in self.blocks for c in t.covariates})

    def split(self, flat):
        """Split a flat coefficient vector into per-block arrays."""
        flat = np.asarray(flat, dtype=float)
        if flat.shape[-1] != self.n_coef:
            raise DimensionError(f"expected {self.n_coef} coefficients, got {flat.shape[-1]}")
        return np.split(flat, np.cumsum(self.block_sizes)[:-1], axis=-1)

    def effects(self, data, beta):
        """Per-block fitted values ``X_jk beta_jk`` as a list of arrays."""
        blocks = self.split(beta) if not isinstance(beta, list) else beta
        return [t.design(data) @ b for (_, t), b in zip(self.blocks, blocks)]

    def predict_eta(self, data, beta):
        """Additive predictors per parameter for a mapping of columns."""
        n = _n_rows(data, self)
        eta = {p: np.zeros(n) for p in self.terms}
        for (p, _), f in zip(self.blocks, self.effects(data, beta)):
            eta[p] = eta[p] + f
        return eta

    def to_dict(self):
        return {
            "family": self.family.name,
            "response": self.response,
            "terms": {p: [t.to_dict() for t in ts] for p, ts in self.terms.items()},
        }

    @classmethod
    def from_dict(cls, d):
        terms = {p: [Term.from_dict(t) for t in ts] for p, ts in d["terms"].items()}
        return cls(d["family"], terms, d.get("response", "y"))

    def subset(self, keep):
        """Model restricted to the blocks whose label is in ``keep``."""
        keep = set(keep)
        terms = {p: [t for t in ts if f"{p}:{t.label}" in keep] for p, ts in self.terms.items()}
        return ModelSpec(self.family, terms, self.response)


def _n_rows(data, model=None):
    if hasattr(data, "n_rows"):
        return data.n_rows
    for v in data.values():
        return len(v)
    return 0


def build_model(family, formula, data, response="y", intercept=True, chunk_size=100_000):
    """Prepare a :class:`ModelSpec` from term shorthands.

    Parameters
    ----------
    family : str or Family
    formula : dict
        Parameter name -> list of term specs (``"s(x1)"``, ``"te(lon,lat)"``,
        ``"x2"``, dicts or :class:`~bbfit.terms.TermSpec`). Parameters that
        are not listed get an intercept only.
    data : ColumnStore or mapping
        Used for the knot/centering pre-pass.
    intercept : bool
        Prepend an intercept to every parameter that lacks one.
    """
    family = get_family(family)
    terms = {}
    for p in family.param_names:
        specs = [parse_term(s) for s in formula.get(p, [])]
        if intercept and not any(s.kind == "intercept" for s in specs):
            specs.insert(0, parse_term("1"))
        terms[p] = prepare_terms(specs, data, chunk_size=chunk_size)
    unknown = set(formula) - set(family.param_names)
    if unknown:
        raise KeyError(f"{family.name} has no parameter(s) {sorted(unknown)}")
    return ModelSpec(family, terms, response)


# ---------------------------------------------------------------------------
# options, state, result
# ---------------------------------------------------------------------------


@dataclass
class FitOptions:
    """Settings of one batchwise backfitting run.

    Parameters
    ----------
    nu : float
        Step length in ``[0, 1]``; forced to 1 by the ``resample`` policy.
    policy : {"plain", "boost", "resample"}
    criterion : {"AIC", "BIC", "loglik"}
        Out-of-sample criterion for smoothing-parameter selection.
    eps_loglik : float, optional
        Minimum relative next-batch log-likelihood improvement for an
        update to be kept. Defaults to 1e-4 for ``boost`` and ``-inf``
        otherwise; ``resample`` always accepts.
    accept_scale : float
        Multiplier ``c`` of the raw rule ``l_new > c * l_old``; it enters
        as an extra ``1 - c`` on the relative threshold.
    slice : bool
        Slice-sample the smoothing parameters instead of searching.
    tau_update : {"search", "slice", "fixed"}, optional
        Overrides ``slice`` when given.
    burn_in : int, optional
        Iterations discarded by the ``resample`` summary (default ``T // 2``).
    summary : {"mean", "median"}
    tau_init : float
    tau_search_factor : float
        Search interval ``[tau / f, tau * f]``.
    n_search : int
        Criterion evaluations per golden-section search.
    intercept_init : {"mean", "zero"}, optional
        Start intercepts at the link of the first batch's moment estimates
        (default for ``plain``/``resample``) or at zero (default for
        ``boost``, where intercepts compete for selection).
    seed : int, optional
        Seeds the slice sampler.
    record_solutions : bool
        Keep every accepted batch solution ``b`` (diagnostics only).
    """

    nu: float = 0.1
    policy: str = "plain"
    criterion: str = "AIC"
    eps_loglik: float = None
    accept_scale: float = 1.0
    slice: bool = False
    tau_update: str = None
    burn_in: int = None
    summary: str = "mean"
    tau_init: float = 0.001
    tau_search_factor: float = 10.0
    n_search: int = 20
    intercept_init: str = None
    seed: int = None
    record_solutions: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        crit = {"aic": "AIC", "bic": "BIC", "loglik": "loglik", "ll": "loglik"}.get(
            str(self.criterion).lower()
        )
        if crit is None:
            raise ValueError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        self.criterion = crit
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu must lie in [0, 1], got {self.nu}")
        if self.tau_update is None:
            self.tau_update = "slice" if self.slice else "search"
        if self.tau_update not in TAU_UPDATES:
            raise ValueError(f"tau_update must be one of {TAU_UPDATES}")
        if self.summary not in ("mean", "median"):
            raise ValueError("summary must be 'mean' or 'median'")
        if self.intercept_init not in (None, "mean", "zero"):
            raise ValueError("intercept_init must be 'mean' or 'zero'")
        if self.tau_init <= 0 or self.tau_search_factor <= 1:
            raise ValueError("tau_init must be > 0 and tau_search_factor > 1")
        if self.n_search < 3:
            raise ValueError("n_search must be at least 3")

    @property
    def step(self):
        return 1.0 if self.policy == "resample" else float(self.nu)

    @property
    def threshold(self):
        """Effective relative-improvement threshold for accept_update."""
        if self.policy == "resample":
            return -np.inf
        eps = self.eps_loglik
        if eps is None:
            eps = 1e-4 if self.policy == "boost" else -np.inf
        return eps + (1.0 - self.accept_scale)

    @property
    def init_mode(self):
        if self.intercept_init is not None:
            return self.intercept_init
        return "zero" if self.policy == "boost" else "mean"


@dataclass
class FitState:
    """Mutable per-block coefficients, smoothing parameters and edfs."""

    beta: list
    tau: list
    edf: list
    iteration: int = 0

    def copy(self):
        return FitState(
            [b.copy() for b in self.beta], [t.copy() for t in self.tau], list(self.edf), self.iteration
        )

    def flat_beta(self):
        return np.concatenate(self.beta) if self.beta else np.zeros(0)

    def flat_tau(self):
        return np.concatenate(self.tau) if self.tau else np.zeros(0)


@dataclass
class FitResult:
    """Output of :func:`fit`.

    ``beta_paths[t]`` and ``tau_paths[t]`` hold the state after iteration
    ``t``; ``contrib[t, m]`` is the next-batch log-likelihood gain of block
    ``m`` in iteration ``t`` (zero when it was not updated).
    """

    model: ModelSpec
    options: FitOptions
    beta_final: np.ndarray
    tau_final: np.ndarray
    beta_init: np.ndarray
    beta_paths: np.ndarray
    tau_paths: np.ndarray
    contrib: np.ndarray
    updated: np.ndarray
    criterion_path: np.ndarray
    loglik_path: np.ndarray
    edf_final: np.ndarray
    n_numeric_rejects: int = 0
    solutions: list = field(default_factory=list)

    @property
    def labels(self):
        return self.model.labels

    @property
    def selected(self):
        """Per-block flag: updated in at least one iteration."""
        return self.updated.any(axis=0)

    @property
    def selection_freq(self):
        return self.updated.mean(axis=0) if len(self.updated) else np.zeros(len(self.labels))

    @property
    def beta_blocks(self):
        return self.model.split(self.beta_final)

    @property
    def tau_blocks(self):
        sizes = [t.n_tau for _, t in self.model.blocks]
        return np.split(self.tau_final, np.cumsum(sizes)[:-1])

    def selected_labels(self):
        return [lab for lab, s in zip(self.labels, self.selected) if s]

    def predict_eta(self, data):
        return self.model.predict_eta(data, self.beta_final)

    def predict_theta(self, data):
        return self.model.family.theta(self.predict_eta(data))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _penalty(term, tau):
    if isinstance(term, (Term, TermMatrices)):
        return term.penalty(tau) if len(np.atleast_1d(tau)) else 0.0
    raise TypeError("term must be a Term or TermMatrices")


def _factor(A):
    """Cholesky factor of a symmetric PD matrix with one jittered retry."""
    if not np.isfinite(A).all():
        raise SingularSystemError("non-finite penalized system")
    try:
        return linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError:
        p = A.shape[0]
        tr = np.trace(A)
        if not np.isfinite(tr):
            raise SingularSystemError("non-finite penalized system") from None
        jitter = 1e-10 * (tr / p if tr > 0 else 1.0)
        try:
            return linalg.cho_factor(A + jitter * np.eye(p), lower=True)
        except linalg.LinAlgError:
            raise SingularSystemError(
                "penalized normal equations are singular even after jitter"
            ) from None


def iwls_term_update(term, tau, W, z, eta_minus_j):
    """Penalized IWLS solution for one term on one batch.

    Solves ``(X'WX + K(tau)) b = X'W (z - eta_minus_j)``.

    Parameters
    ----------
    term : TermMatrices
        Design rows of the batch and penalty components.
    tau : array_like
        Smoothing parameters (empty for unpenalized terms).
    W, z, eta_minus_j : ndarray
        Working weights, working response and the predictor without this
        term, all on the batch.
    """
    X = np.asarray(term.design, dtype=float)
    W = np.asarray(W, dtype=float)
    if np.any(W <= 0):
        raise ValueError("working weights must be positive")
    r = np.asarray(z, dtype=float) - np.asarray(eta_minus_j, dtype=float)
    if not (X.shape[0] == W.shape[0] == r.shape[0]):
        raise DimensionError("design, weights and working response differ in length")
    XtW = X.T * W
    A = XtW @ X + _penalty(term, tau)
    return linalg.cho_solve(_factor(A), XtW @ r)


def blend(beta_old, beta_batch, nu):
    """Step of length ``nu`` from ``beta_old`` towards ``beta_batch``."""
    beta_old = np.asarray(beta_old, dtype=float)
    beta_batch = np.asarray(beta_batch, dtype=float)
    if beta_old.shape != beta_batch.shape:
        raise DimensionError("coefficient vectors differ in length")
    if nu == 1:
        return beta_batch.copy()
    if nu == 0:
        return beta_old.copy()
    return beta_old + nu * (beta_batch - beta_old)


def criterion_value(C, loglik, edf, n_next):
    """Information criterion of a next-batch log-likelihood.

    >>> criterion_value("AIC", -100.0, 5.0, 100)
    210.0
    """
    if n_next <= 0:
        raise ValueError("n_next must be positive")
    C = {"aic": "AIC", "bic": "BIC", "loglik": "loglik", "ll": "loglik"}.get(str(C).lower(), C)
    if C == "AIC":
        return -2.0 * loglik + 2.0 * edf
    if C == "BIC":
        return -2.0 * loglik + math.log(n_next) * edf
    if C == "loglik":
        return -loglik
    raise ValueError(f"unknown criterion {C!r}")


def _edf_from(factor, XtWX):
    return float(np.trace(linalg.cho_solve(factor, XtWX, check_finite=False)))


def term_edf(term, tau, W):
    """Effective degrees of freedom ``tr[(X'WX + K)^-1 X'WX]`` on a batch."""
    X = np.asarray(term.design, dtype=float)
    W = np.asarray(W, dtype=float)
    XtWX = (X.T * W) @ X
    return _edf_from(_factor(XtWX + _penalty(term, tau)), XtWX)


def accept_update(loglik_new, loglik_old, c=1.0, eps_loglik=-np.inf):
    """Keep an update when the relative log-likelihood gain exceeds the threshold.

    The threshold is ``eps_loglik + (1 - c)``; with ``loglik_old == 0`` the
    rule falls back to ``loglik_new > loglik_old``. Non-finite new values
    are always rejected.
    """
    if not np.isfinite(loglik_new):
        return False
    thr = eps_loglik + (1.0 - c)
    if thr == -np.inf:
        return True
    if loglik_old == 0:
        return bool(loglik_new > loglik_old)
    if not np.isfinite(loglik_old):
        return True
    return bool((loglik_new - loglik_old) / abs(loglik_old) > thr)


def _clamp_tau(tau):
    return float(np.clip(tau, TAU_MIN, TAU_MAX))


def _golden_1d(f, a, b, n_eval):
    """Golden-section minimization of ``f`` on ``[a, b]``.

    Uses exactly ``n_eval`` evaluations, both endpoints included, and
    returns the best evaluated point and its value.
    """
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0

    def g(x):
        v = f(x)
        return v if np.isfinite(v) else np.inf

    pts = [(a, g(a)), (b, g(b))]
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = g(c), g(d)
    pts += [(c, fc), (d, fd)]
    for _ in range(n_eval - 4):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = g(c)
            pts.append((c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = g(d)
            pts.append((d, fd))
    return min(pts, key=lambda p: p[1])


def _along(evaluate, tau, l):
    """``evaluate`` as a function of component ``l`` alone, others fixed at ``tau``.

    Criteria may supply a specialised ``evaluate.along(l, tau)``.
    """
    along = getattr(evaluate, "along", None)
    if along is not None:
        return along(l, tau.copy())

    def f(t):
        cand = tau.copy()
        cand[l] = t
        return evaluate(cand)

    return f


def tau_search(tau_old, evaluate, factor=10.0, n_eval=20):
    """Coordinate-wise golden-section search for smoothing parameters.

    Each component ``l`` is searched in turn on ``[tau_l / factor,
    tau_l * factor]`` (log scale) with the other components held at their
    current values.

    Parameters
    ----------
    tau_old : array_like
        Current smoothing parameters (all > 0).
    evaluate : callable
        Maps a smoothing vector to a criterion value (lower is better).

    Returns
    -------
    ndarray
        New smoothing parameters, clamped to ``[1e-10, 1e10]``. Components
        whose candidates were all non-finite keep their old value.
    """
    tau = np.array(np.atleast_1d(tau_old), dtype=float)
    if np.any(tau <= 0):
        raise ValueError("smoothing parameters must be positive")
    lf = math.log(factor)
    for l in range(tau.size):
        center = math.log(tau[l])
        lo = max(center - lf, math.log(TAU_MIN))
        hi = min(center + lf, math.log(TAU_MAX))
        # interval ends exactly, without exp/log roundoff
        ends = {lo: _clamp_tau(tau[l] / factor), hi: _clamp_tau(tau[l] * factor)}

        def to_tau(x):
            return ends[x] if x in ends else math.exp(x)

        f_l = _along(evaluate, tau, l)

        def f(x):
            return f_l(to_tau(x))

        x, val = _golden_1d(f, lo, hi, n_eval)
        if np.isfinite(val):
            tau[l] = _clamp_tau(to_tau(x))
    return tau


def slice_sample_tau(tau_old, evaluate, rng, width=1.0, max_steps=10, max_shrink=100):
    """One slice-sampling sweep over ``log(tau)`` targeting ``exp(-C/2)``.

    Uses stepping out (initial width ``width``, at most ``max_steps``
    expansions split randomly between the two sides) and shrinkage. A
    component whose shrinkage fails ``max_shrink`` times keeps its value.
    """
    tau = np.array(np.atleast_1d(tau_old), dtype=float)
    if np.any(tau <= 0):
        raise ValueError("smoothing parameters must be positive")
    log_lo, log_hi = math.log(TAU_MIN), math.log(TAU_MAX)
    for l in range(tau.size):

        f_l = _along(evaluate, tau, l)

        def logg(x):
            v = f_l(math.exp(x))
            return -0.5 * v if np.isfinite(v) else -np.inf

        x0 = math.log(tau[l])
        g0 = logg(x0)
        if not np.isfinite(g0):
            continue
        level = g0 - rng.exponential()
        left = x0 - width * rng.random()
        right = left + width
        j = int(math.floor(max_steps * rng.random()))
        k = max_steps - 1 - j
        while j > 0 and left > log_lo and logg(left) > level:
            left -= width
            j -= 1
        while k > 0 and right < log_hi and logg(right) > level:
            right += width
            k -= 1
        left, right = max(left, log_lo), min(right, log_hi)
        for _ in range(max_shrink):
            x1 = left + rng.random() * (right - left)
            if logg(x1) > level:
                tau[l] = _clamp_tau(math.exp(x1))
                break
            if x1 < x0:
                left = x1
            else:
                right = x1
    return tau


# ---------------------------------------------------------------------------
# batch bookkeeping
# ---------------------------------------------------------------------------


def _spectral_form(M, K, rhs, Xn, XtWX=None, min_ratio=1e-6):
    """Joint diagonalization of ``M`` and one penalty ``K``.

    ``M`` is ``X'WX`` plus any penalties held fixed. With ``M = R'R`` and
    ``R^-T K R^-1 = U diag(lam) U'``, the solution of ``(M + tau K) b = rhs``
    is ``T diag(1 / (1 + tau lam)) c`` with ``T = R^-1 U`` and ``c = T' rhs``,
    and its edf is ``sum h / (1 + tau lam)`` with ``h = diag(T' X'WX T)``
    (all ones when ``M = X'WX``). Returns ``(Xn T, c, lam, h)`` or ``None``
    when ``M`` is too ill-conditioned.
    """
    try:
        R = linalg.cholesky(M, lower=False, check_finite=False)
    except linalg.LinAlgError:
        return None
    d = np.abs(np.diag(R))
    if not np.all(np.isfinite(R)) or d.min() <= min_ratio * d.max():
        return None
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]), lower=False, check_finite=False)
    lam, U = linalg.eigh(Rinv.T @ K @ Rinv, check_finite=False)
    T = Rinv @ U
    h = np.ones(lam.size) if XtWX is None else np.einsum("ij,ij->j", T, XtWX @ T)
    return Xn @ T, T.T @ rhs, np.maximum(lam, 0.0), h


def _design_key(term):
    con = term.constraint
    return (
        term.spec,
        tuple(k.tobytes() for k in term.knots),
        None if con is None else (con.mode, con.means.tobytes(), con.Z.tobytes()),
    )


class _Batch:
    """Designs, per-block fits and predictors of one batch."""

    def __init__(self, model, store, ids, state):
        cols = [model.response] + model.covariates
        data = store.gather(ids, cols)
        self.y = model.family.check_y(data[model.response])
        self.n = self.y.shape[0]
        if self.n == 0:
            raise DimensionError("empty batch")
        # the same term in several parameters shares one design
        designs = {}
        self.X = []
        for _, t in model.blocks:
            key = _design_key(t)
            if key not in designs:
                designs[key] = t.batch_design(data)
            self.X.append(designs[key])
        self.fit = [X @ b for X, b in zip(self.X, state.beta)]
        self.params = [p for p, _ in model.blocks]
        self.family = model.family
        self.refresh()

    def refresh(self):
        self.eta = {p: np.zeros(self.n) for p in self.family.param_names}
        for p, f in zip(self.params, self.fit):
            self.eta[p] = self.eta[p] + f
        self.ll = _loglik(self.family, self.y, self.eta)

    def set_fit(self, m, values):
        p = self.params[m]
        self.eta[p] = self.eta[p] - self.fit[m] + values
        self.fit[m] = values


def _loglik(family, y, eta, check=True):
    """Log-likelihood, ``-inf`` for invalid parameters.

    ``check=False`` skips the parameter-space test and relies on the sum
    being non-finite (used inside smoothing-parameter searches, whose
    final candidate is re-evaluated with the check).
    """
    with np.errstate(all="ignore"):
        theta = family.theta(eta)
        if check and not family.valid_theta(theta):
            return -np.inf
        ll = float(family._logpdf(y, theta).sum())
    return ll if math.isfinite(ll) or ll == -np.inf else -np.inf


def _working(family, y, eta, param):
    """Score, floored weights and the working-response increment ``u / W``."""
    with np.errstate(all="ignore"):
        theta = family.theta(eta)
        if not family.valid_theta(theta):
            return None
        u = np.broadcast_to(family._score(y, theta, param), y.shape)
        W = np.maximum(np.broadcast_to(family._weights(y, theta, param), y.shape), WEIGHT_FLOOR)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(W))):
        return None
    return u, W


class _Proposal:
    __slots__ = ("m", "b", "beta", "tau", "edf", "ll", "fit_next", "numeric")

    def __init__(self, m, numeric=False):
        self.m = m
        self.numeric = numeric
        self.b = self.beta = self.tau = self.fit_next = None
        self.edf = 0.0
        self.ll = -np.inf


class _Engine:
    def __init__(self, model, store, batches, opts):
        self.model = model
        self.family = model.family
        self.store = store
        self.batches = batches
        self.opts = opts
        self.rng = np.random.default_rng(opts.seed)
        self.blocks = model.blocks
        self._cache = {}

    # -- batches --------------------------------------------------------
    def batch(self, ids, state):
        key = id(ids)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        b = _Batch(self.model, self.store, ids, state)
        # keep only the batches of the current pair
        if len(self._cache) >= 2:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = b
        return b

    # -- one term ------------------------------------------------------
    def propose(self, m, state, cur, nxt, work, tau_mode):
        """Candidate update of block ``m`` from the current state."""
        param, term = self.blocks[m]
        prop = _Proposal(m)
        if work is None:
            prop.numeric = True
            return prop
        u, W = work
        X = cur.X[m]
        r = cur.fit[m] + u / W  # z - eta_{-j}
        XtWX = X.gram(W)
        rhs = X.rmatvec(W * r)
        Xn = nxt.X[m]
        base_next = nxt.eta[param] - nxt.fit[m]
        eta_next = dict(nxt.eta)
        edf_other = sum(state.edf) - state.edf[m]
        tau = state.tau[m]

        penalties = term.penalties
        crit = self.opts.criterion
        edf_weight = 2.0 if crit == "AIC" else math.log(nxt.n)

        def solve(tau_vec):
            A = XtWX.copy()
            for t_l, K_l in zip(tau_vec, penalties):
                A += t_l * K_l
            fac = _factor(A)
            return linalg.cho_solve(fac, rhs, check_finite=False), fac

        # only ``param`` changes during the search: map the others once
        link = self.family.links[self.family.param_names.index(param)]
        with np.errstate(all="ignore"):
            theta_next = self.family.theta(nxt.eta)

        def score(eta_term, edf):
            theta_next[param] = link.inverse(base_next + eta_term)
            ll = float(self.family._logpdf(nxt.y, theta_next).sum())
            if not math.isfinite(ll):
                return np.inf
            if crit == "loglik":
                return -ll
            return -2.0 * ll + edf_weight * (edf + edf_other)

        def direct(tau_vec):
            try:
                b, fac = solve(tau_vec)
            except SingularSystemError:
                return np.inf
            return score(Xn @ b, _edf_from(fac, XtWX))

        def criterion(tau_vec):
            return direct(tau_vec)

        # ``along`` must not refer to ``criterion``: a cycle would keep the
        # batches alive until the next garbage collection
        def along(l, tau_fixed):
            # one component varies: diagonalize against the fixed part once
            M = XtWX.copy()
            for j, (t_j, K_j) in enumerate(zip(tau_fixed, penalties)):
                if j != l:
                    M += t_j * K_j
            spectral = _spectral_form(M, penalties[l], rhs, Xn,
                                      XtWX=XtWX if len(penalties) > 1 else None)
            if spectral is None:
                def f(t):
                    cand = tau_fixed.copy()
                    cand[l] = t
                    return direct(cand)
                return f
            G, c, lam, h = spectral

            def f(t):
                shrink = 1.0 / (1.0 + t * lam)
                return score(G @ (c * shrink), float(h @ shrink))
            return f

        criterion.along = along

        with np.errstate(all="ignore"):
            if term.n_tau and tau_mode == "search":
                tau = tau_search(tau, criterion, self.opts.tau_search_factor, self.opts.n_search)
            elif term.n_tau and tau_mode == "slice":
                tau = slice_sample_tau(tau, criterion, self.rng)
        try:
            b, fac = solve(tau)
        except SingularSystemError as exc:
            raise FitError(str(exc), term=self.model.labels[m]) from None
        if not np.all(np.isfinite(b)):
            prop.numeric = True
            return prop
        nu = self.opts.step
        beta = blend(state.beta[m], b, nu)
        if np.max(np.abs(beta), initial=0.0) > 1e6:
            beta = blend(state.beta[m], b, nu / 2)
            if np.max(np.abs(beta), initial=0.0) > 1e6:
                prop.numeric = True
                return prop
        prop.b, prop.beta, prop.tau = b, beta, tau
        prop.edf = _edf_from(fac, XtWX) if term.n_tau else float(term.n_coef)
        prop.fit_next = Xn @ beta
        eta_next[param] = base_next + prop.fit_next
        prop.ll = _loglik(self.family, nxt.y, eta_next)
        if not np.isfinite(prop.ll):
            prop.numeric = True
        return prop

    def apply(self, prop, state, cur, nxt):
        m = prop.m
        state.beta[m] = prop.beta
        state.tau[m] = np.asarray(prop.tau, dtype=float)
        state.edf[m] = prop.edf
        nxt.set_fit(m, prop.fit_next)
        nxt.ll = prop.ll
        if cur is not nxt:
            cur.set_fit(m, cur.X[m] @ prop.beta)
            cur.ll = _loglik(self.family, cur.y, cur.eta)


def _initial_state(model, store, first_ids, opts):
    beta = [np.zeros(t.n_coef) for _, t in model.blocks]
    tau = [np.full(t.n_tau, opts.tau_init) for _, t in model.blocks]
    edf = [0.0 for _ in model.blocks]
    if opts.init_mode == "mean":
        y = model.family.check_y(store.gather(first_ids, [model.response])[model.response])
        theta0 = model.family.initial_theta(y)
        for m, (p, t) in enumerate(model.blocks):
            if t.spec.kind == "intercept":
                beta[m] = np.array([float(model.family.link(p, theta0[p]))])
                edf[m] = 1.0
    return FitState(beta, tau, edf)


def _warm_state(model, warm, opts, base):
    """Overlay coefficients/smoothing parameters from a previous fit."""
    prev_model = warm.model
    prev_beta = dict(zip(prev_model.labels, prev_model.split(warm.beta_final)))
    prev_tau = dict(zip(prev_model.labels, warm.tau_blocks))
    prev_edf = dict(zip(prev_model.labels, warm.edf_final))
    for m, label in enumerate(model.labels):
        if label in prev_beta and prev_beta[label].shape == base.beta[m].shape:
            base.beta[m] = prev_beta[label].copy()
            base.tau[m] = np.maximum(prev_tau[label].copy(), TAU_MIN)
            base.edf[m] = float(prev_edf[label])
    return base


def fit(model, data, batches, opts=None, warm_start=None):
    """Run batchwise backfitting.

    Parameters
    ----------
    model : ModelSpec
        Terms prepared on the same data (see :func:`build_model`).
    data : ColumnStore or mapping of columns
    batches : BatchPlan or sequence of index arrays
        ``T >= 2`` batches; iteration ``t`` updates on ``batches[t]`` and
        evaluates on ``batches[(t + 1) % T]``.
    opts : FitOptions, optional
    warm_start : FitResult, optional
        Start from the coefficients and smoothing parameters of matching
        blocks of an earlier fit.

    Returns
    -------
    FitResult
    """
    opts = opts or FitOptions()
    store = as_store(data)
    ids_list = list(batches.batch_ids if isinstance(batches, BatchPlan) else batches)
    ids_list = [np.asarray(b) for b in ids_list]
    T = len(ids_list)
    if T < 2:
        raise ValueError("need at least two batches")
    if store.n_rows == 0:
        raise DimensionError("cannot fit on an empty dataset")
    burn_in = opts.burn_in if opts.burn_in is not None else T // 2
    if opts.policy == "resample" and not 0 <= burn_in < T:
        raise ValueError(f"burn_in must lie in [0, T={T})")

    state = _initial_state(model, store, ids_list[0], opts)
    if warm_start is not None:
        state = _warm_state(model, warm_start, opts, state)
    engine = _Engine(model, store, ids_list, opts)
    n_blocks = len(model.blocks)

    beta_init = state.flat_beta()
    beta_paths = np.empty((T, model.n_coef))
    tau_paths = np.empty((T, state.flat_tau().size))
    contrib = np.zeros((T, n_blocks))
    updated = np.zeros((T, n_blocks), dtype=bool)
    crit_path = np.empty(T)
    ll_path = np.empty(T)
    numeric_iters = 0
    solutions = []
    thr = opts.threshold
    tau_mode = opts.tau_update

    for t in range(T):
        cur = engine.batch(ids_list[t], state)
        nxt = engine.batch(ids_list[(t + 1) % T], state)
        numeric = False
        last_bad = None

        if opts.nu == 0 and opts.policy != "resample":
            pass
        elif opts.policy == "boost":
            props = []
            work = {}
            for m, (p, _) in enumerate(model.blocks):
                if p not in work:
                    work[p] = _working(engine.family, cur.y, cur.eta, p)
                props.append(engine.propose(m, state, cur, nxt, work[p], tau_mode))
            ok = [pr for pr in props if not pr.numeric]
            if len(ok) < len(props):
                numeric = True
                last_bad = model.labels[next(pr.m for pr in props if pr.numeric)]
            if ok:
                best = max(ok, key=lambda pr: pr.ll)
                ll_old = nxt.ll
                if not best.numeric and accept_update(best.ll, ll_old, 1.0, thr):
                    contrib[t, best.m] = best.ll - ll_old
                    updated[t, best.m] = True
                    if opts.record_solutions:
                        solutions.append((t, best.m, best.b.copy(), state.beta[best.m].copy()))
                    engine.apply(best, state, cur, nxt)
                    # candidates keep their re-selected smoothing parameters so
                    # the search interval of unselected terms can move too
                    for pr in ok:
                        if pr is not best and pr.tau is not None and len(pr.tau):
                            state.tau[pr.m] = np.asarray(pr.tau, dtype=float)
        else:
            for m, (p, _) in enumerate(model.blocks):
                work = _working(engine.family, cur.y, cur.eta, p)
                prop = engine.propose(m, state, cur, nxt, work, tau_mode)
                if prop.numeric:
                    numeric = True
                    last_bad = model.labels[m]
                    continue
                ll_old = nxt.ll
                if accept_update(prop.ll, ll_old, 1.0, thr):
                    contrib[t, m] = prop.ll - ll_old
                    updated[t, m] = bool(np.any(prop.beta != state.beta[m]))
                    if opts.record_solutions:
                        solutions.append((t, m, prop.b.copy(), state.beta[m].copy()))
                    engine.apply(prop, state, cur, nxt)

        numeric_iters += numeric
        if t + 1 >= 10 and numeric_iters > 0.5 * (t + 1):
            raise FitError(
                f"{numeric_iters} of {t + 1} iterations hit non-finite updates; giving up",
                term=last_bad,
            )
        state.iteration = t + 1
        beta_paths[t] = state.flat_beta()
        tau_paths[t] = state.flat_tau()
        ll_path[t] = nxt.ll
        crit_path[t] = criterion_value(opts.criterion, nxt.ll, sum(state.edf), nxt.n)

    if opts.policy == "resample":
        post = beta_paths[burn_in:]
        beta_final = post.mean(axis=0) if opts.summary == "mean" else np.median(post, axis=0)
    else:
        beta_final = state.flat_beta()

    return FitResult(
        model=model,
        options=opts,
        beta_final=beta_final,
        tau_final=state.flat_tau(),
        beta_init=beta_init,
        beta_paths=beta_paths,
        tau_paths=tau_paths,
        contrib=contrib,
        updated=updated,
        criterion_path=crit_path,
        loglik_path=ll_path,
        edf_final=np.asarray(state.edf, dtype=float),
        n_numeric_rejects=int(numeric_iters),
        solutions=solutions,
    )


def batch_score(model, data, ids, beta, param):
    """Log-likelihood gradient ``X_k' u_k`` for parameter ``param`` on a batch.

    Returns one array per block of ``param``; summing batch scores over a
    partition of the rows gives the full-data score.
    """
    store = as_store(data)
    cols = store.gather(np.asarray(ids), [model.response] + model.covariates)
    y = model.family.check_y(cols[model.response])
    eta = model.predict_eta(cols, beta)
    theta = model.family.check_theta(model.family.theta(eta))
    u = np.broadcast_to(model.family._score(y, theta, param), y.shape)
    return [t.design(cols).T @ u for p, t in model.blocks if p == param]


@dataclass
class TwoStageResult:
    """Boosting stage, the resampling refit on its selected terms, and the labels kept."""

    boost: FitResult
    resample: FitResult
    kept: list

    @property
    def model(self):
        return self.resample.model

    @property
    def beta_final(self):
        return self.resample.beta_final


def fit_two_stage(model, data, boost_batches, resample_batches, boost_opts=None,
                  resample_opts=None):
    """Select terms with the boosting policy, then refit them by resampling.

    Intercepts and every term updated at least once in the boosting stage
    are kept. The resampling stage starts from the boosting coefficients.
    """
    boost_opts = boost_opts or FitOptions(policy="boost")
    resample_opts = resample_opts or FitOptions(policy="resample")
    if boost_opts.policy != "boost" or resample_opts.policy != "resample":
        raise ValueError("stage policies must be 'boost' then 'resample'")
    stage1 = fit(model, data, boost_batches, boost_opts)
    kept = [
        lab for lab, (_, t), sel in zip(model.labels, model.blocks, stage1.selected)
        if sel or t.spec.kind == "intercept"
    ]
    reduced = model.subset(kept)
    stage2 = fit(reduced, data, resample_batches, resample_opts, warm_start=stage1)
    return TwoStageResult(stage1, stage2, kept)
