"""
Scikit-learn style front end for batchwise backfitting.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_1d, check_2d, check_scalar_in
from .datastore import ColumnStore, make_batches
from .engine import POLICIES, FitOptions, build_model, fit, fit_two_stage
from .families import get_family

ESTIMATOR_POLICIES = POLICIES + ("two-stage",)


def _seeds(random_state, k):
    """``k`` independent integer seeds derived from one seed."""
    ss = np.random.SeedSequence(random_state)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(k)]


class BatchwiseBackfittingRegressor(RegressorMixin, BaseEstimator):
    """Distributional regression fitted by batchwise backfitting.

    Parameters
    ----------
    family : {"NO", "GA", "ZAP", "DGP"}
        Response distribution.
    terms : dict, optional
        Parameter name -> list of term shorthands (``"s(x1)"``,
        ``"te(lon,lat)"``, ``"lin(x2)"``). Covariate names refer to
        ``feature_names`` or to DataFrame columns. By default every
        parameter gets a P-spline of every feature.
    policy : {"plain", "boost", "resample", "two-stage"}
        ``"two-stage"`` selects terms by boosting and refits the selected
        terms by resampling.
    nu : float
        Step length (ignored by the resampling stage).
    criterion : {"AIC", "BIC", "loglik"}
    n_iter : int
        Number of batches ``T`` (per stage).
    batch_size : int
    sampling : {"with-replacement", "epoch"}
    eps_loglik : float, optional
        Relative improvement threshold for accepting an update.
    slice : bool
        Slice-sample smoothing parameters instead of searching.
    burn_in : int, optional
        Discarded iterations of the resampling summary.
    feature_names : sequence of str, optional
        Names of the columns of a plain array ``X``; default ``x0, x1, ...``.
    random_state : int, optional

    Attributes
    ----------
    model_ : ModelSpec
        Final model (the reduced model after two-stage selection).
    result_ : FitResult
        Result of the final stage.
    selection_result_ : FitResult or None
        Boosting-stage result of a two-stage fit.
    coef_ : ndarray
        Flat coefficient vector of ``model_``.
    selected_terms_ : list of str
        Labels ``"param:term"`` updated at least once (all kept terms for
        two-stage fits).
    n_features_in_ : int
    feature_names_in_ : ndarray of str
    """

    def __init__(self, family="NO", terms=None, policy="plain", nu=0.1, criterion="AIC",
                 n_iter=200, batch_size=1000, sampling="with-replacement", eps_loglik=None,
                 slice=False, burn_in=None, feature_names=None, random_state=None):
        self.family = family
        self.terms = terms
        self.policy = policy
        self.nu = nu
        self.criterion = criterion
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.sampling = sampling
        self.eps_loglik = eps_loglik
        self.slice = slice
        self.burn_in = burn_in
        self.feature_names = feature_names
        self.random_state = random_state

    # -- helpers ------------------------------------------------------------
    def _names_from(self, X, n_features):
        if hasattr(X, "columns"):
            return [str(c) for c in X.columns]
        if self.feature_names is not None:
            names = [str(c) for c in self.feature_names]
            if len(names) != n_features:
                raise ValueError(f"feature_names has {len(names)} entries for {n_features} columns")
            return names
        return [f"x{j}" for j in range(n_features)]

    def _columns(self, X, fitting=False):
        A = check_2d(X, None if fitting else self.n_features_in_)
        if fitting or hasattr(X, "columns"):
            names = self._names_from(X, A.shape[1])
        else:
            names = list(self.feature_names_in_)
        if not fitting and list(names) != list(self.feature_names_in_):
            raise ValueError("feature names differ from those seen in fit")
        return names, {c: A[:, j] for j, c in enumerate(names)}

    def _options(self, policy, seed):
        return FitOptions(
            nu=self.nu, policy=policy, criterion=self.criterion, eps_loglik=self.eps_loglik,
            slice=self.slice, burn_in=self.burn_in, seed=seed,
        )

    # -- API ------------------------------------------------------------------
    def fit(self, X, y):
        """Fit the model to features ``X`` and response ``y``."""
        if self.policy not in ESTIMATOR_POLICIES:
            raise ValueError(f"policy must be one of {ESTIMATOR_POLICIES}, got {self.policy!r}")
        check_scalar_in(self.n_iter, "n_iter", 2, np.inf, integer=True)
        check_scalar_in(self.batch_size, "batch_size", 1, np.inf, integer=True)
        family = get_family(self.family)
        names, cols = self._columns(X, fitting=True)
        y = check_1d(y, n=len(next(iter(cols.values()))) if cols else None)
        family.check_y(y)
        if "y" in cols:
            raise ValueError("'y' is reserved for the response; rename that feature")
        store = ColumnStore({"y": y, **cols})
        terms = self.terms
        if terms is None:
            terms = {p: [f"s({c})" for c in names] for p in family.param_names}
        model = build_model(family, terms, store)

        seed_batches, seed_engine, seed_stage2 = _seeds(self.random_state, 3)
        size = min(self.batch_size, store.n_rows)
        plan = make_batches(store.n_rows, self.n_iter, size, self.sampling, seed_batches)
        self.selection_result_ = None
        if self.policy == "two-stage":
            plan2 = make_batches(store.n_rows, self.n_iter, size, self.sampling, seed_stage2)
            res = fit_two_stage(model, store, plan, plan2, self._options("boost", seed_engine),
                                self._options("resample", seed_engine))
            self.selection_result_ = res.boost
            self.result_ = res.resample
            self.selected_terms_ = list(res.kept)
        else:
            self.result_ = fit(model, store, plan, self._options(self.policy, seed_engine))
            self.selected_terms_ = self.result_.selected_labels()
        self.model_ = self.result_.model
        self.coef_ = self.result_.beta_final
        self.n_features_in_ = len(names)
        self.feature_names_in_ = np.asarray(names, dtype=object)
        return self

    def predict_eta(self, X):
        """Additive predictors per distribution parameter."""
        check_is_fitted(self, "result_")
        _, cols = self._columns(X)
        return self.model_.predict_eta(cols, self.coef_)

    def predict_params(self, X):
        """Distribution parameters per observation, as a dict of arrays."""
        check_is_fitted(self, "result_")
        return self.model_.family.theta(self.predict_eta(X))

    def predict(self, X):
        """Expected response ``E(Y | X)``."""
        check_is_fitted(self, "result_")
        return self.model_.family.mean(self.predict_params(X))

    def log_likelihood(self, X, y):
        """Total log-likelihood of ``y`` under the fitted distribution."""
        theta = self.predict_params(X)
        return self.model_.family.loglik(check_1d(y, n=len(theta[self.model_.family.param_names[0]])), theta)

    @property
    def selection_frequencies_(self):
        """Per-term share of boosting iterations that updated the term."""
        check_is_fitted(self, "result_")
        res = self.selection_result_ or self.result_
        return dict(zip(res.labels, res.selection_freq.tolist()))
