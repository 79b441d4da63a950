"""
Performance measures and diagnostics for fitted distributional models.

Predictor and effect mean squared errors, the continuous ranked probability
score (CRPS), false/true-positive selection rates, PIT histograms and
worm-plot (detrended Q-Q) points, collected in an :class:`EvalReport`.
"""

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, special

from .datastore import as_store
from .families import get_family, quantile_residuals

QUANTILE_CLIP = 1e-6
COUNT_TAIL = 1e-8
SELECTION_THRESHOLD = 0.1
_CHUNK = 1000


def _pair(a, b, names=("a", "b")):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} and {names[1]} differ in length: {a.size} != {b.size}")
    return a, b


def mse_predictor(eta_hat, eta_true):
    """Mean squared difference of two predictor vectors."""
    eta_hat, eta_true = _pair(eta_hat, eta_true, ("eta_hat", "eta_true"))
    return float(np.mean((eta_hat - eta_true) ** 2))


def mse_effect(f_hat, f_true):
    """Mean squared difference of two effects after centering both.

    Levels are not identified separately from the intercept, so each
    curve is shifted to mean zero before comparison.
    """
    f_hat, f_true = _pair(f_hat, f_true, ("f_hat", "f_true"))
    d = (f_hat - f_hat.mean()) - (f_true - f_true.mean())
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# CRPS
# ---------------------------------------------------------------------------


def _theta_slice(theta, sl, n):
    return {k: np.broadcast_to(np.asarray(v, dtype=float), (n,))[sl] for k, v in theta.items()}


def _crps_continuous(family, theta, y):
    lo = family.ppf(QUANTILE_CLIP, theta)
    hi = family.ppf(1.0 - QUANTILE_CLIP, theta)
    a = np.minimum(lo, y)
    b = np.maximum(hi, y)
    left, right = y - a, b - y
    m = y.size

    def integrand(s):
        F = family._cdf(np.concatenate([a + s * left, y + s * right]), theta2)
        return np.concatenate([F[:m] ** 2 * left, (1.0 - F[m:]) ** 2 * right])

    theta2 = {k: np.concatenate([v, v]) for k, v in theta.items()}
    val, _ = integrate.quad_vec(integrand, 0.0, 1.0, epsabs=1e-11, epsrel=1e-10, norm="max")
    return val[:m] + val[m:]


def _crps_count(family, theta, y):
    upper = np.maximum(family.ppf(1.0 - COUNT_TAIL, theta), y)
    out = np.zeros(y.size)
    t_max = int(np.max(upper))
    block = 512
    for start in range(0, t_max + 1, block):
        t = np.arange(start, min(start + block, t_max + 1), dtype=float)
        active = np.flatnonzero(upper >= start)
        if active.size == 0:
            break
        th = {k: v[active, None] for k, v in theta.items()}
        F = family._cdf(t[None, :], th)
        d = F - (t[None, :] >= y[active, None])
        sq = np.where(t[None, :] <= upper[active, None], d * d, 0.0)
        out[active] += sq.sum(axis=1)
    return out


def crps_values(family, theta, y):
    """Per-observation CRPS ``int (F(t) - 1{t >= y})^2 dt``.

    Continuous families integrate adaptively over a range covering the
    ``1e-6`` and ``1 - 1e-6`` quantiles (extended to include ``y``). Count
    families sum over integers up to the point where ``1 - F < 1e-8``.
    """
    family = get_family(family)
    y = family.check_y(y)
    theta = family.check_theta(theta)
    n = y.size
    out = np.empty(n)
    fn = _crps_count if family.discrete else _crps_continuous
    for start in range(0, n, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n))
        out[sl] = fn(family, _theta_slice(theta, sl, n), y[sl])
    return out


def crps(family, theta, y):
    """Mean CRPS over observations (lower is better)."""
    return float(np.mean(crps_values(family, theta, y)))


# ---------------------------------------------------------------------------
# selection rates
# ---------------------------------------------------------------------------


def effect_range(f):
    f = np.asarray(f, dtype=float)
    return float(f.max() - f.min()) if f.size else 0.0


def _share_large(effects, threshold):
    effects = list(effects.values()) if isinstance(effects, dict) else list(effects)
    if not effects:
        return 0.0
    return float(np.mean([effect_range(f) > threshold for f in effects]))


def fp_rate(effects, threshold=SELECTION_THRESHOLD):
    """Fraction of non-informative terms whose fitted range exceeds ``threshold``.

    Parameters
    ----------
    effects : dict or sequence of array_like
        Fitted effects of the noise terms on validation rows.
    """
    return _share_large(effects, threshold)


def tp_rate(effects, threshold=SELECTION_THRESHOLD):
    """Fraction of informative terms whose fitted range exceeds ``threshold``."""
    return _share_large(effects, threshold)


# ---------------------------------------------------------------------------
# calibration diagnostics
# ---------------------------------------------------------------------------


def pit_values(family, theta, y, seed=None):
    """Probability integral transform; randomized on ``[F(y-1), F(y)]`` for counts."""
    family = get_family(family)
    y = family.check_y(y)
    upper = family.cdf(y, theta)
    if not family.discrete:
        return upper
    lower = family.cdf(y - 1.0, theta)
    rng = np.random.default_rng(seed)
    return lower + rng.random(y.shape) * (upper - lower)


def pit_histogram(family, theta, y, bins=10, seed=None):
    """PIT bin counts and edges on ``[0, 1]``."""
    counts, edges = np.histogram(pit_values(family, theta, y, seed), bins=bins, range=(0.0, 1.0))
    return counts, edges


def worm_points(family, theta, y, seed=None):
    """Detrended normal Q-Q points of the quantile residuals.

    Returns
    -------
    z : ndarray
        Theoretical standard-normal quantiles at plotting positions
        ``(i - 0.5) / n``.
    deviation : ndarray
        Sorted residual minus ``z``.
    """
    r = np.sort(quantile_residuals(family, y, theta, seed))
    n = r.size
    z = special.ndtri((np.arange(1, n + 1) - 0.5) / n)
    return z, r - z


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Collected performance measures.

    ``mse_effect`` is keyed by ``"param:label"``; it is ``None`` when no
    true effects were available.
    """

    mse_predictor: dict
    crps: float
    mse_effect: dict = None
    fp_rate: dict = None
    tp_rate: dict = None
    pit: dict = field(default_factory=dict)
    worm: dict = field(default_factory=dict)
    n: int = 0

    def __post_init__(self):
        values = list(self.mse_predictor.values()) + [self.crps]
        values += list((self.mse_effect or {}).values())
        rates = list((self.fp_rate or {}).values()) + list((self.tp_rate or {}).values())
        for v in values + rates:
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"metric value {v!r} is not finite and non-negative")
        if any(r > 1 for r in rates):
            raise ValueError("rates must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None, indent=2):
        text = json.dumps(self.to_dict(), indent=indent, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _truth_name(param, covariates):
    return f"true_f_{param}_{'_'.join(covariates)}"


def evaluate(model, beta, data, truth_columns=True, informative=None, bins=10, seed=None,
             threshold=SELECTION_THRESHOLD):
    """Evaluate coefficients ``beta`` of ``model`` on validation ``data``.

    Parameters
    ----------
    model : ModelSpec
    beta : ndarray
        Flat coefficient vector.
    data : mapping or ColumnStore
        Validation columns with the response; ``true_eta_<param>`` and
        ``true_f_<param>_<covariates>`` columns are used when present.
    informative : dict, optional
        ``param -> list of covariate tuples`` carrying a true effect. By
        default it is inferred from the available truth columns.
    seed : int, optional
        Seed for randomized PIT / quantile residuals of count families.
    """
    store = as_store(data)
    cols = {c: store.column(c) for c in store.names}
    family = model.family
    y = cols[model.response]
    eta = model.predict_eta(cols, beta)
    theta = family.theta(eta)

    mse_p = {}
    for p in family.param_names:
        if f"true_eta_{p}" in cols:
            mse_p[p] = mse_predictor(eta[p], cols[f"true_eta_{p}"])

    fitted = dict(zip(model.labels, model.effects(cols, beta)))
    mse_e = None
    if truth_columns:
        mse_e = {}
        for (p, term), label in zip(model.blocks, model.labels):
            name = _truth_name(p, term.covariates)
            if term.covariates and name in cols:
                mse_e[label] = mse_effect(fitted[label], cols[name])
        if not mse_e:
            warnings.warn("no true effect columns found; effect MSE omitted", stacklevel=2)
            mse_e = None

    fp = tp = None
    if informative is None and any(c.startswith("true_f_") for c in cols):
        informative = {
            p: [t.covariates for _, t in model.blocks
                if _truth_name(p, t.covariates) in cols]
            for p in family.param_names
        }
    if informative is not None:
        fp, tp = {}, {}
        for p in family.param_names:
            inf = {tuple(c) for c in informative.get(p, [])}
            noise, signal = [], []
            for (q, term), label in zip(model.blocks, model.labels):
                if q != p or not term.covariates:
                    continue
                (signal if tuple(term.covariates) in inf else noise).append(fitted[label])
            fp[p] = fp_rate(noise, threshold)
            tp[p] = tp_rate(signal, threshold)

    counts, edges = pit_histogram(family, theta, y, bins=bins, seed=seed)
    z, dev = worm_points(family, theta, y, seed=seed)
    return EvalReport(
        mse_predictor=mse_p,
        crps=crps(family, theta, y),
        mse_effect=mse_e,
        fp_rate=fp,
        tp_rate=tp,
        pit={"edges": edges.tolist(), "counts": counts.tolist()},
        worm={"z": z.tolist(), "deviation": dev.tolist()},
        n=int(y.size),
    )
