"""
Synthetic distributional-regression data.

Covariates ``x1..x4``, ``lon``, ``lat`` and ``nnoise`` noise variables are
drawn from U(-2, 2), optionally correlated through the Cholesky factor of an
AR(1) correlation matrix. The predictors are

    eta_mu    = b_mu    + f1(x1) + f3(x3) + f2d(lon, lat)
    eta_sigma = b_sigma + f2(x2) + f3(x3) + f4(x4)

with every effect centered on the generated sample and ``f2, f3, f4, f2d``
rescaled to a sample range of 2. The constants are kept in a
:class:`TrueModel` so validation data share the same truth.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .datastore import ColumnStore
from .families import get_family

INTERCEPTS = {"NO": (0.0, 0.0), "GA": (1.0, -1.0), "ZAP": (1.0, -1.5)}
ASSIGNMENTS = {
    "mu": (("f1", ("x1",)), ("f3", ("x3",)), ("f2d", ("lon", "lat"))),
    "sigma": (("f2", ("x2",)), ("f3", ("x3",)), ("f4", ("x4",))),
}
# appendix-style Gaussian example: two noise covariates x5, x6
APPENDIX_ASSIGNMENTS = {
    "mu": (("f1", ("x1",)), ("f2", ("x3",)), ("f2d", ("lon", "lat"))),
    "sigma": (("f3", ("x2",)), ("f2", ("x3",)), ("f4", ("x4",))),
}
APPENDIX_INTERCEPTS = (1.0, -1.0)
SCALED = ("f2", "f3", "f4", "f2d")
TARGET_RANGE = 2.0
BASE_COVARIATES = ("x1", "x2", "x3", "x4", "lon", "lat")

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def effect_fns(name, x, x2=None):
    """Raw (unscaled) simulation effects.

    >>> float(effect_fns("f3", 1.0))
    -1.0
    """
    x = np.asarray(x, dtype=float)
    if name == "f1":
        return x.copy()
    if name == "f2":
        return x + (2.0 * x - 2.0) ** 2 / 5.5
    if name == "f3":
        return -x + np.pi * np.sin(np.pi * x)
    if name == "f4":
        return (
            0.5 * x
            + 15.0 * np.exp(-2.0 * (x - 0.2) ** 2) / _SQRT_2PI
            - np.exp(-((x + 0.4) ** 2) / 2.0) / _SQRT_2PI
        )
    if name == "f2d":
        if x2 is None:
            raise ValueError("f2d needs two inputs")
        return np.sin(x) * np.cos(0.5 * np.asarray(x2, dtype=float))
    raise ValueError(f"unknown effect {name!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    Parameters
    ----------
    distribution : {"NO", "GA", "ZAP"}
    n : int
        Training observations.
    nnoise : int
        Number of non-informative covariates ``noise1..noiseK``.
    rho : float
        AR(1) correlation in ``[0, 1)``.
    seed : int, optional
    n_validation : int
        Size of an independent validation sample (0 for none).
    """

    distribution: str = "NO"
    n: int = 1000
    nnoise: int = 0
    rho: float = 0.0
    seed: int = None
    n_validation: int = 0

    def __post_init__(self):
        if self.distribution not in INTERCEPTS:
            raise ValueError(f"distribution must be one of {sorted(INTERCEPTS)}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.nnoise < 0 or self.n_validation < 0:
            raise ValueError("nnoise and n_validation must be >= 0")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")

    @property
    def covariates(self):
        return covariate_names(self.nnoise)


def covariate_names(nnoise):
    return list(BASE_COVARIATES) + [f"noise{i + 1}" for i in range(nnoise)]


def ar1_cholesky(l, rho):
    """Lower Cholesky factor of the ``l x l`` matrix ``rho ** |i - j|``."""
    idx = np.arange(l)
    sigma = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(sigma)


def gen_covariates(config, rng=None, n=None, names=None):
    """Uniform(-2, 2) covariates, correlated as ``X L'`` when ``rho > 0``.

    Returns a dict of columns in the order of ``names`` (default: the
    scenario's covariates).
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = config.n if n is None else n
    names = config.covariates if names is None else list(names)
    X = rng.uniform(-2.0, 2.0, size=(n, len(names)))
    if config.rho > 0:
        X = X @ ar1_cholesky(len(names), config.rho).T
    return {c: X[:, j].copy() for j, c in enumerate(names)}


def truth_column(param, covariates):
    """Name of the column holding the true effect of ``covariates`` on ``param``."""
    return f"true_f_{param}_{'_'.join(covariates)}"


@dataclass
class TrueModel:
    """Data-generating model with its centering/scaling constants.

    ``constants[(effect, covariates)] = (center, scale)`` so that the
    stored effect is ``scale * (f(x) - center)``.
    """

    distribution: str
    intercepts: dict
    assignments: dict
    constants: dict = field(default_factory=dict)

    @classmethod
    def from_sample(cls, distribution, covariates, assignments=ASSIGNMENTS, intercepts=None):
        if intercepts is None:
            intercepts = INTERCEPTS[distribution]
        model = cls(distribution, dict(zip(("mu", "sigma"), intercepts)), assignments)
        for effects in assignments.values():
            for name, covs in effects:
                raw = effect_fns(name, *(covariates[c] for c in covs))
                center = float(np.mean(raw))
                scale = 1.0
                if name in SCALED:
                    width = float(np.max(raw) - np.min(raw))
                    scale = TARGET_RANGE / width if width > 0 else 1.0
                model.constants[(name, tuple(covs))] = (center, scale)
        return model

    def effects(self, covariates):
        """True effect values keyed by ``(param, covariates)``."""
        out = {}
        for param, effects in self.assignments.items():
            for name, covs in effects:
                center, scale = self.constants[(name, tuple(covs))]
                raw = effect_fns(name, *(covariates[c] for c in covs))
                out[(param, tuple(covs))] = scale * (raw - center)
        return out

    def eta(self, covariates, effects=None):
        effects = self.effects(covariates) if effects is None else effects
        n = len(next(iter(covariates.values())))
        eta = {p: np.full(n, float(b)) for p, b in self.intercepts.items()}
        for (param, _), f in effects.items():
            eta[param] = eta[param] + f
        return eta

    def informative(self, param):
        return [tuple(covs) for _, covs in self.assignments[param]]

    def to_dict(self):
        return {
            "distribution": self.distribution,
            "intercepts": self.intercepts,
            "assignments": {p: [[n, list(c)] for n, c in e] for p, e in self.assignments.items()},
            "constants": [
                {"effect": n, "covariates": list(c), "center": v[0], "scale": v[1]}
                for (n, c), v in self.constants.items()
            ],
        }

    @classmethod
    def from_dict(cls, d):
        model = cls(
            d["distribution"],
            dict(d["intercepts"]),
            {p: tuple((n, tuple(c)) for n, c in e) for p, e in d["assignments"].items()},
        )
        for item in d["constants"]:
            model.constants[(item["effect"], tuple(item["covariates"]))] = (item["center"], item["scale"])
        return model


def gen_response(config, covariates, true_model=None, rng=None):
    """Draw responses and assemble the dataset with truth columns.

    Columns: ``y``, the covariates, ``true_eta_<param>`` and one
    ``true_f_<param>_<covariates>`` column per true effect.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if true_model is None:
        true_model = TrueModel.from_sample(config.distribution, covariates)
    family = get_family(true_model.distribution)
    effects = true_model.effects(covariates)
    eta = true_model.eta(covariates, effects)
    theta = family.check_theta(family.theta(eta))
    y = np.asarray(family.rvs(theta, rng), dtype=float)
    cols = {"y": y}
    cols.update(covariates)
    for p in family.param_names:
        cols[f"true_eta_{p}"] = eta[p]
    for (param, covs), f in effects.items():
        cols[truth_column(param, covs)] = f
    return ColumnStore(cols)


def simulate(config):
    """Training store, optional validation store and the true model.

    The validation sample reuses the training sample's effect constants.
    """
    ss = np.random.SeedSequence(config.seed)
    rng_train, rng_val = (np.random.default_rng(s) for s in ss.spawn(2))
    cov = gen_covariates(config, rng_train)
    truth = TrueModel.from_sample(config.distribution, cov)
    train = gen_response(config, cov, truth, rng_train)
    val = None
    if config.n_validation:
        cov_v = gen_covariates(config, rng_val, n=config.n_validation)
        val = gen_response(config, cov_v, truth, rng_val)
    return train, val, truth


def candidate_formula(covariates, params=("mu", "sigma")):
    """Full candidate model: a P-spline per covariate, tensor for (lon, lat)."""
    terms = []
    for c in covariates:
        if c in ("lon", "lat"):
            continue
        terms.append(f"s({c})")
    if "lon" in covariates and "lat" in covariates:
        terms.append("te(lon,lat)")
    return {p: list(terms) for p in params}


def appendix_scenario(n, seed=None, n_validation=0):
    """Gaussian example with candidates x1..x6 and (lon, lat); x5, x6 are noise."""
    config = ScenarioConfig("NO", n=n, nnoise=0, seed=seed, n_validation=n_validation)
    names = ["x1", "x2", "x3", "x4", "x5", "x6", "lon", "lat"]
    ss = np.random.SeedSequence(seed)
    rng_train, rng_val = (np.random.default_rng(s) for s in ss.spawn(2))
    cov = gen_covariates(config, rng_train, names=names)
    truth = TrueModel.from_sample("NO", cov, APPENDIX_ASSIGNMENTS, APPENDIX_INTERCEPTS)
    train = gen_response(config, cov, truth, rng_train)
    val = None
    if n_validation:
        cov_v = gen_covariates(config, rng_val, n=n_validation, names=names)
        val = gen_response(config, cov_v, truth, rng_val)
    return train, val, truth


def dgp_sigma_for_zero_prob(p_zero, xi):
    """Scale giving ``P(Y = 0) = p_zero`` under the discretized GP."""
    return xi / ((1.0 - p_zero) ** (-xi) - 1.0)


def dgp_intercept_data(n, p_zero=0.974, xi=0.5, seed=None):
    """Counts from an intercept-only discretized GP with a given zero share."""
    rng = np.random.default_rng(seed)
    fam = get_family("DGP")
    sigma = dgp_sigma_for_zero_prob(p_zero, xi)
    y = fam.rvs({"xi": np.full(n, xi), "sigma": np.full(n, sigma)}, rng)
    return ColumnStore({"y": np.asarray(y, dtype=float)})
