import numpy as np
import pytest

from bbfit.families import get_family

# predictor ranges used for randomized derivative checks
ETA_RANGES = {
    "NO": {"mu": (-3.0, 3.0), "sigma": (-2.0, 2.0)},
    "GA": {"mu": (-1.0, 2.0), "sigma": (-3.0, 0.5)},
    "ZAP": {"mu": (-2.0, 3.0), "sigma": (-2.0, 2.0)},
    "DGP": {"xi": (-2.0, 0.3), "sigma": (-1.0, 2.0)},
}


def random_points(name, n, seed):
    """Random (y, eta) pairs drawn from the family at random predictors."""
    fam = get_family(name)
    rng = np.random.default_rng(seed)
    eta = {
        p: rng.uniform(lo, hi, size=n) for p, (lo, hi) in ETA_RANGES[name].items()
    }
    y = fam.rvs(fam.theta(eta), rng)
    return y, eta


def fd_score(fam, y, eta, k, step=1e-6):
    """Central finite difference of logpdf w.r.t. eta_k."""
    h = step * np.maximum(1.0, np.abs(eta[k]))
    up = dict(eta, **{k: eta[k] + h})
    dn = dict(eta, **{k: eta[k] - h})
    return (fam.logpdf(y, fam.theta(up)) - fam.logpdf(y, fam.theta(dn))) / (2 * h)


def fd_hessian(fam, y, eta, k, step=1e-3):
    """Central second difference of logpdf w.r.t. eta_k."""
    h = step * np.maximum(1.0, np.abs(eta[k]))
    up = dict(eta, **{k: eta[k] + h})
    dn = dict(eta, **{k: eta[k] - h})
    f0 = fam.logpdf(y, fam.theta(eta))
    return (fam.logpdf(y, fam.theta(up)) - 2 * f0 + fam.logpdf(y, fam.theta(dn))) / h**2


@pytest.fixture(params=["NO", "GA", "ZAP", "DGP"])
def family_name(request):
    return request.param


def reference_penalized_fit(family, y, designs, penalties, tol=1e-10, max_iter=500):
    """Penalized IWLS on full per-parameter designs (all terms jointly).

    ``designs`` and ``penalties`` map each parameter to its full design
    matrix and block-diagonal penalty. Each sweep solves the complete
    normal equations of one parameter at a time; iteration stops when no
    coefficient moves by more than ``tol``.
    """
    fam = get_family(family)
    beta = {p: np.zeros(X.shape[1]) for p, X in designs.items()}
    init = fam.initial_theta(y)
    for p in designs:
        beta[p][0] = fam.link(p, init[p])  # first column is the intercept
    for _ in range(max_iter):
        delta = 0.0
        for p, X in designs.items():
            eta = {q: designs[q] @ beta[q] for q in designs}
            theta = fam.theta(eta)
            u = fam.score_eta(y, theta, p)
            W = fam.weights_eta(y, theta, p)
            z = eta[p] + u / W
            A = (X.T * W) @ X + penalties[p]
            new = np.linalg.solve(A, (X.T * W) @ z)
            delta = max(delta, float(np.max(np.abs(new - beta[p]))))
            beta[p] = new
        if delta < tol:
            break
    return beta
