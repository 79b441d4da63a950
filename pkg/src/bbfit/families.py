"""
Response distributions for distributional regression.

Each family maps per-parameter additive predictors ``eta`` to distribution
parameters ``theta`` through a link function and provides the
predictor-scale derivatives that drive IWLS updates:

* ``score_eta``   -- d loglik / d eta_k, elementwise
* ``weights_eta`` -- working weights, i.e. the (expected) negative second
  derivative of the log-likelihood w.r.t. eta_k, floored at ``WEIGHT_FLOOR``

Parameter values are passed around as plain ``dict`` objects keyed by the
family's ``param_names``.

Parameterizations follow the gamlss.dist conventions:

========  ==========================  =================================
family    parameters                  links
========  ==========================  =================================
NO        mu (mean), sigma (sd)       mu = eta, log(sigma^2) = eta
GA        mu (mean), sigma (cv)       log(mu) = eta, log(sigma^2) = eta
ZAP       mu (Poisson), sigma (P0)    log(mu^2) = eta, logit(sigma) = eta
DGP       xi (shape), sigma (scale)   log(xi) = eta, log(sigma) = eta
========  ==========================  =================================
"""

import numpy as np
from scipy import special, stats
from scipy.optimize import brentq

from .exceptions import InvalidParameterError, SupportError

WEIGHT_FLOOR = 1e-8
_LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# links
# ---------------------------------------------------------------------------


class Link:
    """Monotone map between a parameter ``theta`` and its predictor ``eta``."""

    name = "link"

    def link(self, theta):
        raise NotImplementedError

    def inverse(self, eta):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class IdentityLink(Link):
    name = "identity"

    def link(self, theta):
        return np.asarray(theta, dtype=float)

    def inverse(self, eta):
        return np.asarray(eta, dtype=float)


class LogLink(Link):
    name = "log"

    def link(self, theta):
        return np.log(theta)

    def inverse(self, eta):
        return np.exp(eta)


class LogSquareLink(Link):
    """``eta = log(theta**2)`` for a positive parameter."""

    name = "log2"

    def link(self, theta):
        return 2.0 * np.log(theta)

    def inverse(self, eta):
        return np.exp(0.5 * np.asarray(eta, dtype=float))


class LogitLink(Link):
    name = "logit"

    def link(self, theta):
        return special.logit(theta)

    def inverse(self, eta):
        return special.expit(eta)


# ---------------------------------------------------------------------------
# family base class
# ---------------------------------------------------------------------------


class Family:
    """Base class of a K-parameter response distribution.

    Subclasses implement ``_logpdf``, ``_cdf``, ``_score``, ``_weights`` and
    ``rvs`` on already-validated inputs; the public methods add the
    parameter/support checks.
    """

    name = "family"
    param_names = ()
    links = ()
    support = "real"  # one of "real", "positive", "count"

    @property
    def n_params(self):
        return len(self.param_names)

    @property
    def discrete(self):
        return self.support == "count"

    def __repr__(self):
        return f"{type(self).__name__}()"

    def _index(self, k):
        if isinstance(k, str):
            try:
                return self.param_names.index(k)
            except ValueError:
                raise KeyError(f"{self.name} has no parameter {k!r}") from None
        k = int(k)
        if not 0 <= k < self.n_params:
            raise KeyError(f"{self.name} has no parameter index {k}")
        return k

    def param_name(self, k):
        return self.param_names[self._index(k)]

    # -- links ------------------------------------------------------------

    def link(self, k, theta):
        return self.links[self._index(k)].link(theta)

    def link_inverse(self, k, eta):
        return self.links[self._index(k)].inverse(eta)

    def theta(self, eta):
        """Map a dict of predictors to a dict of parameters."""
        return {
            name: link.inverse(eta[name])
            for name, link in zip(self.param_names, self.links)
        }

    def eta(self, theta):
        return {
            name: link.link(theta[name])
            for name, link in zip(self.param_names, self.links)
        }

    # -- validation -------------------------------------------------------

    def _param_ok(self, name, value):
        raise NotImplementedError

    def check_theta(self, theta):
        out = {}
        for name in self.param_names:
            if name not in theta:
                raise InvalidParameterError(f"{self.name}: missing parameter {name!r}")
            value = np.asarray(theta[name], dtype=float)
            if not np.all(np.isfinite(value)) or not np.all(self._param_ok(name, value)):
                raise InvalidParameterError(
                    f"{self.name}: parameter {name!r} outside its parameter space"
                )
            out[name] = value
        return out

    def check_y(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise SupportError(f"{self.name}: non-finite response values")
        if self.support == "positive" and np.any(y <= 0):
            raise SupportError(f"{self.name}: response must be strictly positive")
        if self.support == "count" and (np.any(y < 0) or np.any(y != np.floor(y))):
            raise SupportError(f"{self.name}: response must be a nonnegative integer")
        return y

    def valid_theta(self, theta):
        """True when every parameter value is finite and inside its space."""
        for name in self.param_names:
            value = theta[name]
            if not (np.all(np.isfinite(value)) and np.all(self._param_ok(name, value))):
                return False
        return True

    # -- public API -------------------------------------------------------

    def logpdf(self, y, theta):
        """Per-observation log density (log probability for count families)."""
        theta = self.check_theta(theta)
        return self._logpdf(self.check_y(y), theta)

    def loglik(self, y, theta):
        return float(np.sum(self.logpdf(y, theta)))

    def cdf(self, y, theta):
        """Distribution function; defined on the whole real line."""
        theta = self.check_theta(theta)
        y = np.asarray(y, dtype=float)
        return self._cdf(y, theta)

    def score_eta(self, y, theta, k):
        """d log d_Y / d eta_k for every observation."""
        theta = self.check_theta(theta)
        return self._score(self.check_y(y), theta, self.param_name(k))

    def weights_eta(self, y, theta, k):
        """Working weights for parameter ``k``, floored at ``WEIGHT_FLOOR``."""
        theta = self.check_theta(theta)
        y = self.check_y(y)
        w = self._weights(y, theta, self.param_name(k))
        shape = np.broadcast(y, *theta.values()).shape
        return np.maximum(np.broadcast_to(w, shape), WEIGHT_FLOOR)

    def rvs(self, theta, rng):
        raise NotImplementedError

    def initial_theta(self, y):
        """Crude moment estimates used to start the intercepts."""
        raise NotImplementedError

    def ppf(self, q, theta):
        raise NotImplementedError

    def mean(self, theta):
        """Expected response ``E(Y)``."""
        return self._mean(self.check_theta(theta))

    def _mean(self, theta):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# concrete families
# ---------------------------------------------------------------------------


class Gaussian(Family):
    """``NO(mu, sigma)`` with ``sigma`` the standard deviation."""

    name = "NO"
    param_names = ("mu", "sigma")
    links = (IdentityLink(), LogSquareLink())
    support = "real"

    def _param_ok(self, name, value):
        return value > 0 if name == "sigma" else np.ones_like(value, dtype=bool)

    def _logpdf(self, y, theta):
        mu, sigma = theta["mu"], theta["sigma"]
        return -0.5 * _LOG_2PI - np.log(sigma) - 0.5 * ((y - mu) / sigma) ** 2

    def _cdf(self, y, theta):
        return special.ndtr((y - theta["mu"]) / theta["sigma"])

    def ppf(self, q, theta):
        return theta["mu"] + theta["sigma"] * special.ndtri(q)

    def _mean(self, theta):
        return np.asarray(theta["mu"], dtype=float)

    def _score(self, y, theta, name):
        mu, sigma = theta["mu"], theta["sigma"]
        if name == "mu":
            return (y - mu) / sigma**2
        return -0.5 + 0.5 * ((y - mu) / sigma) ** 2

    def _weights(self, y, theta, name):
        mu, sigma = np.broadcast_arrays(theta["mu"], theta["sigma"])
        if name == "mu":
            return 1.0 / sigma**2
        return np.full(np.broadcast(y, sigma).shape, 0.5)

    def rvs(self, theta, rng):
        return rng.normal(theta["mu"], theta["sigma"])

    def initial_theta(self, y):
        y = np.asarray(y, dtype=float)
        sd = float(np.std(y))
        return {"mu": float(np.mean(y)), "sigma": sd if sd > 0 else 1.0}


class GammaFamily(Family):
    """``GA(mu, sigma)``: shape ``1/sigma^2``, scale ``mu*sigma^2``."""

    name = "GA"
    param_names = ("mu", "sigma")
    links = (LogLink(), LogSquareLink())
    support = "positive"

    def _param_ok(self, name, value):
        return value > 0

    def _logpdf(self, y, theta):
        mu, sigma = theta["mu"], theta["sigma"]
        a = 1.0 / sigma**2
        return (
            a * np.log(a) - a * np.log(mu) + (a - 1.0) * np.log(y) - a * y / mu
            - special.gammaln(a)
        )

    def _cdf(self, y, theta):
        a = 1.0 / theta["sigma"] ** 2
        x = np.maximum(y, 0.0) * a / theta["mu"]
        return special.gammainc(a, x)

    def ppf(self, q, theta):
        a = 1.0 / theta["sigma"] ** 2
        return special.gammaincinv(a, q) * theta["mu"] / a

    def _mean(self, theta):
        return np.asarray(theta["mu"], dtype=float)

    def _score(self, y, theta, name):
        mu, sigma = theta["mu"], theta["sigma"]
        a = 1.0 / sigma**2
        if name == "mu":
            return a * (y / mu - 1.0)
        return -a * (np.log(a) + 1.0 - np.log(mu) + np.log(y) - y / mu - special.digamma(a))

    def _weights(self, y, theta, name):
        mu, sigma = np.broadcast_arrays(theta["mu"], theta["sigma"])
        a = 1.0 / sigma**2
        if name == "mu":
            return a
        return a * a * special.polygamma(1, a) - a

    def rvs(self, theta, rng):
        a = 1.0 / theta["sigma"] ** 2
        return rng.gamma(a, theta["mu"] / a)

    def initial_theta(self, y):
        y = np.asarray(y, dtype=float)
        m = float(np.mean(y))
        cv = float(np.std(y)) / m
        return {"mu": m, "sigma": cv if cv > 0 else 1.0}


class ZAP(Family):
    """Zero-adjusted Poisson: ``P(Y=0) = sigma``, else zero-truncated Poisson(mu)."""

    name = "ZAP"
    param_names = ("mu", "sigma")
    links = (LogSquareLink(), LogitLink())
    support = "count"

    def _param_ok(self, name, value):
        if name == "mu":
            return value > 0
        return (value > 0) & (value < 1)

    def _logpdf(self, y, theta):
        shape = np.broadcast(y, theta["mu"], theta["sigma"]).shape
        y = np.broadcast_to(y, shape)
        mu = np.broadcast_to(theta["mu"], shape)
        sigma = np.broadcast_to(theta["sigma"], shape)
        pos = y > 0
        out = np.log(sigma)
        yp, mp = y[pos], mu[pos]
        out[pos] = (
            np.log1p(-sigma[pos]) + yp * np.log(mp) - mp - special.gammaln(yp + 1.0)
            - np.log(-np.expm1(-mp))
        )
        return out

    def _cdf(self, y, theta):
        mu, sigma = theta["mu"], theta["sigma"]
        yf = np.floor(y)
        p0 = np.exp(-mu)
        trunc = (special.pdtr(np.maximum(yf, 0.0), mu) - p0) / (-np.expm1(-mu))
        out = sigma + (1.0 - sigma) * trunc
        return np.where(y < 0, 0.0, np.clip(out, 0.0, 1.0))

    def _mean(self, theta):
        mu, sigma = theta["mu"], theta["sigma"]
        return (1.0 - sigma) * mu / (-np.expm1(-mu))

    def ppf(self, q, theta):
        mu, sigma = theta["mu"], theta["sigma"]
        q, mu, sigma = np.broadcast_arrays(np.asarray(q, dtype=float), mu, sigma)
        p0 = np.exp(-mu)
        # map q onto the zero-truncated Poisson part
        r = np.clip((q - sigma) / (1.0 - sigma), 0.0, 1.0)
        pos = np.maximum(stats.poisson.ppf(p0 + r * (1.0 - p0), mu), 1.0)
        return np.where(q <= sigma, 0.0, pos)

    def _score(self, y, theta, name):
        mu, sigma = theta["mu"], theta["sigma"]
        pos = y > 0
        if name == "sigma":
            return np.where(pos, -sigma, 1.0 - sigma)
        # d/d mu of the truncated part, chained through mu = exp(eta / 2)
        d_mu = y / mu - 1.0 / (-np.expm1(-mu))
        return np.where(pos, 0.5 * mu * d_mu, 0.0)

    def _weights(self, y, theta, name):
        mu, sigma = np.broadcast_arrays(theta["mu"], theta["sigma"])
        if name == "sigma":
            return sigma * (1.0 - sigma)
        m = mu / (-np.expm1(-mu))  # mean of the zero-truncated Poisson
        return 0.25 * (1.0 - sigma) * m * (1.0 + mu - m)

    def rvs(self, theta, rng):
        mu, sigma = np.broadcast_arrays(
            np.asarray(theta["mu"], dtype=float), np.asarray(theta["sigma"], dtype=float)
        )
        zero = rng.random(mu.shape) < sigma
        p0 = np.exp(-mu)
        u = p0 + rng.random(mu.shape) * (1.0 - p0)
        draws = stats.poisson.ppf(u, mu)
        # guard the measure-zero case u == p0
        draws = np.maximum(draws, 1.0)
        return np.where(zero, 0.0, draws)

    def initial_theta(self, y):
        y = np.asarray(y, dtype=float)
        p0 = float(np.clip(np.mean(y == 0), 0.01, 0.99))
        pos = y[y > 0]
        m = float(np.mean(pos)) if pos.size else 1.5
        if m <= 1.0 + 1e-6:
            mu = 1e-3
        else:
            mu = brentq(lambda t: t / (-np.expm1(-t)) - m, 1e-8, m + 1.0)
        return {"mu": mu, "sigma": p0}


class DGP(Family):
    """Discretized generalized Pareto distribution for counts.

    ``P(Y=y) = S(y) - S(y+1)`` with survival ``S(x) = (1 + xi*x/sigma)^(-1/xi)``
    and ``xi > 0``.  Working weights use the observed information.
    """

    name = "DGP"
    param_names = ("xi", "sigma")
    links = (LogLink(), LogLink())
    support = "count"

    def _param_ok(self, name, value):
        return value > 0

    @staticmethod
    def _log_survival(x, xi, sigma):
        return -np.log1p(xi * x / sigma) / xi

    def _logpdf(self, y, theta):
        xi, sigma = theta["xi"], theta["sigma"]
        l0 = self._log_survival(y, xi, sigma)
        l1 = self._log_survival(y + 1.0, xi, sigma)
        return l0 + np.log(-np.expm1(l1 - l0))

    def _cdf(self, y, theta):
        xi, sigma = theta["xi"], theta["sigma"]
        yf = np.floor(np.maximum(y, 0.0))
        out = -np.expm1(self._log_survival(yf + 1.0, xi, sigma))
        return np.where(y < 0, 0.0, out)

    def ppf(self, q, theta):
        xi, sigma = theta["xi"], theta["sigma"]
        # smallest y with 1 - S(y+1) >= q
        x = sigma / xi * ((1.0 - q) ** (-xi) - 1.0)
        return np.maximum(np.ceil(x - 1.0 - 1e-12), 0.0)

    def _mean(self, theta):
        # sum_{k>=1} S(k) = (sigma/xi)^(1/xi) * zeta(1/xi, 1 + sigma/xi); infinite for xi >= 1
        xi, sigma = np.broadcast_arrays(theta["xi"], theta["sigma"])
        with np.errstate(over="ignore"):
            out = (sigma / xi) ** (1.0 / xi) * special.zeta(1.0 / xi, 1.0 + sigma / xi)
        return np.where(xi < 1.0, out, np.inf)

    @staticmethod
    def _dlog_survival(x, xi, sigma, name):
        """First and second derivative of log S(x) w.r.t. the predictor."""
        a = xi * x / sigma
        if name == "sigma":
            d1 = a / (xi * (1.0 + a))
            d2 = -a / (xi * (1.0 + a) ** 2)
        else:
            lg = np.log1p(a)
            d1 = lg / xi - a / (xi * (1.0 + a))
            d2 = 2.0 * a / (xi * (1.0 + a)) - a / (xi * (1.0 + a) ** 2) - lg / xi
        return d1, d2

    def _derivs(self, y, theta, name):
        xi, sigma = theta["xi"], theta["sigma"]
        l0 = self._log_survival(y, xi, sigma)
        l1 = self._log_survival(y + 1.0, xi, sigma)
        r = np.exp(l1 - l0)
        one_minus_r = -np.expm1(l1 - l0)
        a0, b0 = self._dlog_survival(y, xi, sigma, name)
        a1, b1 = self._dlog_survival(y + 1.0, xi, sigma, name)
        d1 = (a0 - r * a1) / one_minus_r
        d2 = ((a0 * a0 + b0) - r * (a1 * a1 + b1)) / one_minus_r - d1 * d1
        return d1, d2

    def _score(self, y, theta, name):
        return self._derivs(y, theta, name)[0]

    def _weights(self, y, theta, name):
        return -self._derivs(y, theta, name)[1]

    def rvs(self, theta, rng):
        xi = np.asarray(theta["xi"], dtype=float)
        sigma = np.asarray(theta["sigma"], dtype=float)
        shape = np.broadcast(xi, sigma).shape
        u = 1.0 - rng.random(shape)  # in (0, 1]
        return np.floor(sigma / xi * np.expm1(-xi * np.log(u)))

    def initial_theta(self, y):
        y = np.asarray(y, dtype=float)
        p0 = float(np.clip(np.mean(y == 0), 0.01, 0.99))
        xi = 0.5
        # P(Y=0) = 1 - (1 + xi/sigma)^(-1/xi) solved for sigma
        sigma = xi / ((1.0 - p0) ** (-xi) - 1.0)
        return {"xi": xi, "sigma": sigma}


FAMILIES = {
    "NO": Gaussian,
    "GA": GammaFamily,
    "ZAP": ZAP,
    "DGP": DGP,
}
_ALIASES = {"gaussian": "NO", "normal": "NO", "gamma": "GA"}


def get_family(family):
    """Return a family instance from a name or pass an instance through."""
    if isinstance(family, Family):
        return family
    key = _ALIASES.get(str(family).lower(), str(family).upper())
    try:
        return FAMILIES[key]()
    except KeyError:
        raise ValueError(
            f"unknown family {family!r}; choose from {sorted(FAMILIES)}"
        ) from None


def quantile_residuals(family, y, theta, seed=None):
    """Randomized quantile residuals ``Phi^-1(u)``.

    Continuous families use ``u = F(y)``; count families draw ``u`` uniformly
    on ``[F(y-1), F(y)]`` with a generator seeded by ``seed``.
    """
    family = get_family(family)
    y = family.check_y(y)
    upper = family.cdf(y, theta)
    if family.discrete:
        lower = family.cdf(y - 1.0, theta)
        rng = np.random.default_rng(seed)
        u = lower + rng.random(y.shape) * (upper - lower)
    else:
        u = upper
    eps = 1e-15
    return special.ndtri(np.clip(u, eps, 1.0 - eps))
