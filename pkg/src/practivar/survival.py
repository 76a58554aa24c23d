"""Cox partial-likelihood machinery.

Fixed-effects fitting (Newton-Raphson, Breslow tie handling), the Breslow
baseline hazard, practice-level random-intercept and random-slope models by
penalized partial likelihood with a Laplace-approximate marginal likelihood
over the variance components, risk prediction and frailty adjustment, the
cluster bootstrap, and Monte Carlo propagation of random effects.

Random effects are log-normal frailties: Gaussian effects on the log-hazard
scale, so a fitted intercept b maps to a hazard multiplier exp(b) and the
adjusted 10-year risk obeys risk_z = 1 - (1 - base_risk) ** z exactly.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from sklearn.base import BaseEstimator

from .cohort import Cohort
from .errors import BootstrapError, ContractError, ConvergenceError, FitError
from .imputation import StepFunction
from .validation import check_positive, check_same_length

VAR_FLOOR = 1e-8  # lower search bound for variance components
VAR_CEIL = 4.0

PERCENTILE_GRID = (0.5, 2.5, 25.0, 50.0, 75.0, 97.5, 99.5)


# ---------------------------------------------------------------------------
# shared partial-likelihood plumbing
# ---------------------------------------------------------------------------

def _sort_survival(time, event):
    time = check_positive(np.asarray(time, dtype=float), "time")
    event = np.asarray(event, dtype=bool)
    check_same_length("time", time, "event", event)
    if not event.any():
        raise ContractError("at least one event is required")
    order = np.argsort(time, kind="stable")
    return order, time[order], event[order]


def _event_grid(t, e):
    """Unique event times (ascending), their multiplicities, and for each
    subject the number of event times at or before its exit."""
    event_times, d = np.unique(t[e], return_counts=True)
    m = np.searchsorted(event_times, t, side="right")
    return event_times, d.astype(float), m


# ---------------------------------------------------------------------------
# fixed-effects Cox model
# ---------------------------------------------------------------------------

class CoxPH(BaseEstimator):
    """Cox proportional hazards model (Breslow ties, optional offset).

    Newton-Raphson on the log partial likelihood until the relative
    log-likelihood change falls below ``ll_tol`` or the gradient max-norm
    below ``grad_tol``.  Monotone likelihood (separation) is detected and
    reported as a fit error.
    """

    def __init__(self, max_iter=100, ll_tol=1e-9, grad_tol=1e-6):
        self.max_iter = max_iter
        self.ll_tol = ll_tol
        self.grad_tol = grad_tol

    def fit(self, X, time, event, offset=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] != len(np.atleast_1d(time)):
            X = X.T
        n, p = X.shape
        offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
        if not np.all(np.isfinite(offset)):
            raise ContractError("offsets must be finite")
        order, t, e = _sort_survival(time, event)
        xs, off = X[order], offset[order]
        event_times, d, m = _event_grid(t, e)

        beta = np.zeros(p)
        ll = -np.inf
        for iteration in range(1, self.max_iter + 1):
            ll_new, grad, hess = _cox_ll_grad_hess(beta, xs, off, t, e, event_times, d, m)
            if np.max(np.abs(beta)) > 50:
                raise FitError("monotone likelihood")
            try:
                step = np.linalg.solve(-hess, grad)
            except np.linalg.LinAlgError:
                bad = int(np.argmin(np.abs(np.linalg.eigvalsh(-hess))))
                raise FitError(f"singular information matrix (covariate {bad})") from None
            # step halving keeps the likelihood monotone
            scale = 1.0
            while True:
                candidate = beta + scale * step
                ll_cand = _cox_ll(candidate, xs, off, t, e, event_times, d, m)
                if ll_cand >= ll_new - 1e-12 or scale < 1e-4:
                    break
                scale *= 0.5
            beta = candidate
            if np.max(np.abs(grad)) < self.grad_tol:
                ll = ll_cand
                break
            if np.isfinite(ll) and abs(ll_cand - ll) <= self.ll_tol * (abs(ll) + 1.0):
                ll = ll_cand
                break
            ll = ll_cand
        else:
            raise ConvergenceError("Cox fit did not converge",
                                   {"beta": beta.tolist(), "loglik": ll})

        if np.max(np.abs(beta)) > 15:
            # the likelihood is monotone in beta: Newton stalls at a huge
            # estimate with a vanishing gradient instead of diverging
            raise FitError("monotone likelihood")
        ll, grad, hess = _cox_ll_grad_hess(beta, xs, off, t, e, event_times, d, m)
        cov = np.linalg.inv(-hess)
        self.coef_ = beta
        self.se_ = np.sqrt(np.diag(cov))
        self.loglik_ = float(ll)
        self.n_iter_ = iteration
        self.baseline_cumhaz_ = breslow_baseline(t, e, xs @ beta + off, presorted=True)
        return self

    def predict_lp(self, X):
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.coef_


def _cox_ll(beta, xs, off, t, e, event_times, d, m):
    eta = xs @ beta + off
    w = np.exp(eta)
    T = len(event_times)
    buf = np.zeros(T)
    active = m > 0
    np.add.at(buf, m[active] - 1, w[active])
    s0 = np.cumsum(buf[::-1])[::-1]
    return float(eta[e].sum() - d @ np.log(s0))


def _cox_ll_grad_hess(beta, xs, off, t, e, event_times, d, m):
    n, p = xs.shape
    eta = xs @ beta + off
    w = np.exp(eta)
    T = len(event_times)
    active = m > 0
    idx = m[active] - 1

    s0 = np.zeros(T)
    np.add.at(s0, idx, w[active])
    s0 = np.cumsum(s0[::-1])[::-1]

    s1 = np.zeros((T, p))
    np.add.at(s1, idx, (w[:, None] * xs)[active])
    s1 = np.cumsum(s1[::-1], axis=0)[::-1]

    s2 = np.zeros((T, p, p))
    wxx = w[:, None, None] * (xs[:, :, None] * xs[:, None, :])
    np.add.at(s2, idx, wxx[active])
    s2 = np.cumsum(s2[::-1], axis=0)[::-1]

    xbar = s1 / s0[:, None]
    ll = float(eta[e].sum() - d @ np.log(s0))
    grad = xs[e].sum(axis=0) - d @ xbar
    hess = -(np.einsum("j,jab->ab", d / s0, s2)
             - np.einsum("j,ja,jb->ab", d, xbar, xbar))
    return ll, grad, hess


def breslow_baseline(time, event, eta, presorted=False) -> StepFunction:
    """Breslow cumulative baseline hazard H0(t) = sum d_j / sum_{risk} exp(eta)."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    eta = np.asarray(eta, dtype=float)
    if not event.any():
        return StepFunction(np.array([]), np.array([]))
    if not presorted:
        order = np.argsort(time, kind="stable")
        time, event, eta = time[order], event[order], eta[order]
    event_times, d, m = _event_grid(time, event)
    w = np.exp(eta)
    T = len(event_times)
    buf = np.zeros(T)
    active = m > 0
    np.add.at(buf, m[active] - 1, w[active])
    s0 = np.cumsum(buf[::-1])[::-1]
    return StepFunction(event_times, np.cumsum(d / s0))


def baseline_survival(cumhaz: StepFunction, t):
    return np.exp(-cumhaz(t))


# ---------------------------------------------------------------------------
# practice-structured penalized fits (random intercept / random slope)
# ---------------------------------------------------------------------------

@dataclass
class _PracticeData:
    t: np.ndarray
    e: np.ndarray
    lp: np.ndarray
    g: np.ndarray            # practice codes 0..P-1, sorted by time
    practice_ids: list
    event_times: np.ndarray
    d: np.ndarray
    m: np.ndarray
    n_practices: int
    nev: np.ndarray          # events per practice
    sev_lp: np.ndarray       # sum of lp over events per practice


def _prepare_grouped(time, event, lp, groups):
    lp = np.asarray(lp, dtype=float)
    if not np.all(np.isfinite(lp)):
        raise ContractError("offsets must be finite")
    groups = np.asarray(groups)
    check_same_length("time", np.atleast_1d(time), "groups", groups)
    practice_ids = sorted(pd.unique(groups).tolist())
    if len(practice_ids) < 2:
        raise ContractError(">=2 practices required")
    code = {pid: k for k, pid in enumerate(practice_ids)}
    g_all = np.array([code[p] for p in groups])
    order, t, e = _sort_survival(time, event)
    lp_s, g = lp[order], g_all[order]
    event_times, d, m = _event_grid(t, e)
    P = len(practice_ids)
    nev = np.bincount(g[e], minlength=P).astype(float)
    sev_lp = np.bincount(g[e], weights=lp_s[e], minlength=P)
    if (nev > 0).sum() <= 1:
        warnings.warn("events concentrated in a single practice; "
                      "variance estimate may be degenerate")
    return _PracticeData(t, e, lp_s, g, practice_ids, event_times, d, m, P, nev, sev_lp)


def _bucket_suffix_sums(data: _PracticeData, w, with_lp=False):
    """Per-practice risk-set sums at each event time.

    Returns A[p, j] = sum of w over practice-p subjects at risk at event
    time j (and B, C with extra lp / lp^2 factors when requested).
    """
    P, T = data.n_practices, len(data.event_times)
    active = data.m > 0
    flat = data.g[active] * T + (data.m[active] - 1)

    def scatter(values):
        buf = np.bincount(flat, weights=values[active], minlength=P * T).reshape(P, T)
        return np.cumsum(buf[:, ::-1], axis=1)[:, ::-1]
    A = scatter(w)
    if not with_lp:
        return A, None, None
    B = scatter(w * data.lp)
    C = scatter(w * data.lp * data.lp)
    return A, B, C


def _intercept_inner(data: _PracticeData, sigma2, b0=None, grad_tol=1e-6, max_iter=50):
    """Penalized Newton solve for the practice intercepts at fixed sigma^2.

    Maximizes logPL(lp + b[g]) - ||b||^2 / (2 sigma^2).  Returns the
    optimum, the unpenalized logPL, and the negative penalized Hessian.
    """
    P = data.n_practices
    b = np.zeros(P) if b0 is None else b0.copy()

    def objective(bvec):
        eta = data.lp + bvec[data.g]
        w = np.exp(eta)
        A, _, _ = _bucket_suffix_sums(data, w)
        D = A.sum(axis=0)
        lpl = float(eta[data.e].sum() - data.d @ np.log(D))
        return lpl, A, D

    lpl, A, D = objective(b)
    pen = lpl - b @ b / (2 * sigma2)
    H_pen = None
    for _ in range(max_iter):
        R = A / D
        wA = R @ data.d
        grad = data.nev - wA - b / sigma2
        if np.max(np.abs(grad)) < grad_tol:
            break
        G = R * np.sqrt(data.d)
        K = np.diag(wA) - G @ G.T
        H_pen = K + np.eye(P) / sigma2
        try:
            step = np.linalg.solve(H_pen, grad)
        except np.linalg.LinAlgError as exc:
            raise FitError("singular penalized information matrix") from exc
        scale = 1.0
        while True:
            cand = b + scale * step
            lpl_c, A_c, D_c = objective(cand)
            pen_c = lpl_c - cand @ cand / (2 * sigma2)
            if pen_c >= pen - 1e-10 or scale < 1e-4:
                break
            scale *= 0.5
        b, lpl, A, D, pen = cand, lpl_c, A_c, D_c, pen_c
    else:
        raise ConvergenceError("random-intercept inner solve did not converge",
                               {"sigma2": sigma2, "max_abs_grad": float(np.max(np.abs(grad)))})
    # final Hessian at the optimum (for Laplace and standard errors)
    R = A / D
    wA = R @ data.d
    G = R * np.sqrt(data.d)
    K = np.diag(wA) - G @ G.T
    H_pen = K + np.eye(P) / sigma2
    return b, lpl, H_pen


def _laplace_marginal(lpl, penalty, H_pen, log_sigma_terms):
    sign, logdet = np.linalg.slogdet(H_pen)
    if sign <= 0:
        return -np.inf
    return lpl - penalty - 0.5 * log_sigma_terms - 0.5 * logdet


class RandomInterceptCox(BaseEstimator):
    """Random-intercept (log-normal frailty) Cox model with an offset lp.

    The linear predictor enters as an offset with coefficient fixed at one;
    the model estimates one Gaussian intercept per practice.  The variance
    is found by bracketed one-dimensional search on the Laplace-approximate
    integrated likelihood over log sigma^2; the inner solve is a penalized
    Newton iteration.
    """

    def __init__(self, var_floor=VAR_FLOOR, var_ceil=VAR_CEIL,
                 inner_grad_tol=1e-6, outer_rel_tol=1e-4, max_inner_iter=50):
        self.var_floor = var_floor
        self.var_ceil = var_ceil
        self.inner_grad_tol = inner_grad_tol
        self.outer_rel_tol = outer_rel_tol
        self.max_inner_iter = max_inner_iter

    def fit(self, time, event, offset, groups):
        data = _prepare_grouped(time, event, offset, groups)
        P = data.n_practices
        state = {"b": None}

        def neg_marginal(log_s2):
            s2 = np.exp(log_s2)
            b, lpl, H_pen = _intercept_inner(data, s2, b0=state["b"],
                                             grad_tol=self.inner_grad_tol,
                                             max_iter=self.max_inner_iter)
            state["b"] = b
            lm = _laplace_marginal(lpl, b @ b / (2 * s2), H_pen, P * np.log(s2))
            return -lm

        lo, hi = np.log(self.var_floor), np.log(self.var_ceil)
        res = minimize_scalar(neg_marginal, bounds=(lo, hi), method="bounded",
                              options={"xatol": self.outer_rel_tol})
        s2 = float(np.exp(res.x))
        boundary = res.x < lo + 10 * self.outer_rel_tol
        if boundary:
            s2 = self.var_floor
        b, lpl, H_pen = _intercept_inner(data, s2, b0=state["b"],
                                         grad_tol=self.inner_grad_tol,
                                         max_iter=self.max_inner_iter)
        self.sigma_b2_ = s2
        self.sigma_b_ = float(np.sqrt(s2))
        self.boundary_ = bool(boundary)
        self.loglik_ = float(lpl)
        self.marginal_loglik_ = float(-res.fun)
        self.converged_ = bool(res.success)
        self.practice_ids_ = data.practice_ids
        self.b_ = pd.Series(b, index=data.practice_ids, name="b")
        self.frailty_ = np.exp(self.b_).rename("exp_b")
        cov = np.linalg.inv(H_pen)
        self.b_se_ = pd.Series(np.sqrt(np.diag(cov)), index=data.practice_ids,
                               name="shrinkage_se")
        eta = data.lp + b[data.g]
        self.baseline_cumhaz_ = breslow_baseline(data.t, data.e, eta, presorted=True)
        return self

    def baseline_survival(self, t):
        return baseline_survival(self.baseline_cumhaz_, t)

    def frailty_frame(self):
        return pd.DataFrame({
            "practice_id": self.practice_ids_,
            "b": self.b_.to_numpy(),
            "exp_b": self.frailty_.to_numpy(),
            "shrinkage_se": self.b_se_.to_numpy(),
        })


def _slope_inner(data: _PracticeData, sigma_b2, sigma_u2, theta0=None,
                 grad_tol=1e-6, max_iter=60):
    """Penalized Newton solve for (gamma, b, u) at fixed variances.

    eta_i = gamma * lp_i + b_p(i) + u_p(i) * lp_i with penalties
    ||b||^2/(2 sigma_b^2) + ||u||^2/(2 sigma_u^2); gamma is unpenalized.
    """
    P = data.n_practices
    dim = 1 + 2 * P
    theta = np.zeros(dim) if theta0 is None else theta0.copy()
    theta[0] = 1.0 if theta0 is None else theta[0]
    pen_diag = np.concatenate([[0.0], np.full(P, 1.0 / sigma_b2), np.full(P, 1.0 / sigma_u2)])

    def split(th):
        return th[0], th[1:P + 1], th[P + 1:]

    def objective(th):
        gamma, b, u = split(th)
        eta = gamma * data.lp + b[data.g] + u[data.g] * data.lp
        w = np.exp(eta)
        A, B, C = _bucket_suffix_sums(data, w, with_lp=True)
        D = A.sum(axis=0)
        lpl = float(eta[data.e].sum() - data.d @ np.log(D))
        pen = lpl - b @ b / (2 * sigma_b2) - u @ u / (2 * sigma_u2)
        return lpl, pen, A, B, C, D

    lpl, pen, A, B, C, D = objective(theta)
    for _ in range(max_iter):
        gamma, b, u = split(theta)
        # weighted risk-set means per event time
        wd = data.d / D
        sumB = B.sum(axis=0)
        sumC = C.sum(axis=0)
        wA = (A / D) @ data.d      # per practice
        wB = (B / D) @ data.d
        wC = (C / D) @ data.d
        grad = np.empty(dim)
        grad[0] = data.sev_lp.sum() - wd @ sumB
        grad[1:P + 1] = data.nev - wA - b / sigma_b2
        grad[P + 1:] = data.sev_lp - wB - u / sigma_u2
        if np.max(np.abs(grad)) < grad_tol:
            break

        # second-moment part sum_j d_j Sxx_j / D_j
        H1 = np.zeros((dim, dim))
        H1[0, 0] = wd @ sumC
        H1[0, 1:P + 1] = H1[1:P + 1, 0] = wB
        H1[0, P + 1:] = H1[P + 1:, 0] = wC
        H1[np.arange(1, P + 1), np.arange(1, P + 1)] = wA
        H1[np.arange(P + 1, dim), np.arange(P + 1, dim)] = wC
        H1[np.arange(1, P + 1), np.arange(P + 1, dim)] = wB
        H1[np.arange(P + 1, dim), np.arange(1, P + 1)] = wB
        # mean outer-product part: Xbar^T diag(d) Xbar
        T = len(data.event_times)
        xbar = np.empty((T, dim))
        xbar[:, 0] = sumB / D
        xbar[:, 1:P + 1] = (A / D).T
        xbar[:, P + 1:] = (B / D).T
        sq = xbar * np.sqrt(data.d)[:, None]
        H_pen = H1 - sq.T @ sq + np.diag(pen_diag)
        try:
            step = np.linalg.solve(H_pen, grad)
        except np.linalg.LinAlgError as exc:
            raise FitError("singular penalized information matrix") from exc
        scale = 1.0
        while True:
            cand = theta + scale * step
            lpl_c, pen_c, A_c, B_c, C_c, D_c = objective(cand)
            if pen_c >= pen - 1e-10 or scale < 1e-4:
                break
            scale *= 0.5
        theta, lpl, pen, A, B, C, D = cand, lpl_c, pen_c, A_c, B_c, C_c, D_c
    else:
        raise ConvergenceError("random-slope inner solve did not converge",
                               {"sigma_b2": sigma_b2, "sigma_u2": sigma_u2,
                                "max_abs_grad": float(np.max(np.abs(grad)))})

    # recompute Hessian at the optimum
    gamma, b, u = split(theta)
    wd = data.d / D
    sumB, sumC = B.sum(axis=0), C.sum(axis=0)
    wA, wB, wC = (A / D) @ data.d, (B / D) @ data.d, (C / D) @ data.d
    H1 = np.zeros((dim, dim))
    H1[0, 0] = wd @ sumC
    H1[0, 1:P + 1] = H1[1:P + 1, 0] = wB
    H1[0, P + 1:] = H1[P + 1:, 0] = wC
    H1[np.arange(1, P + 1), np.arange(1, P + 1)] = wA
    H1[np.arange(P + 1, dim), np.arange(P + 1, dim)] = wC
    H1[np.arange(1, P + 1), np.arange(P + 1, dim)] = wB
    H1[np.arange(P + 1, dim), np.arange(1, P + 1)] = wB
    T = len(data.event_times)
    xbar = np.empty((T, dim))
    xbar[:, 0] = sumB / D
    xbar[:, 1:P + 1] = (A / D).T
    xbar[:, P + 1:] = (B / D).T
    sq = xbar * np.sqrt(data.d)[:, None]
    H_pen = H1 - sq.T @ sq + np.diag(pen_diag)
    return theta, lpl, H_pen


class RandomSlopeCox(BaseEstimator):
    """Mixed-effects Cox model: random intercept plus a random slope on the
    linear predictor, with the fixed lp coefficient estimated (expected near
    one).  Variances are optimized on a 2-D log-variance grid then polished
    by coordinate ascent; with ``subsample_frac < 1`` the model is fitted on
    ``repeats`` practice subsamples and the variance estimates averaged.
    """

    def __init__(self, subsample_frac=1.0, repeats=1, seed=0,
                 var_floor=VAR_FLOOR, var_ceil=VAR_CEIL,
                 grid_points=5, inner_grad_tol=1e-6, outer_rel_tol=1e-4):
        self.subsample_frac = subsample_frac
        self.repeats = repeats
        self.seed = seed
        self.var_floor = var_floor
        self.var_ceil = var_ceil
        self.grid_points = grid_points
        self.inner_grad_tol = inner_grad_tol
        self.outer_rel_tol = outer_rel_tol

    def fit(self, time, event, lp, groups):
        time = np.asarray(time, dtype=float)
        event = np.asarray(event, dtype=bool)
        lp = np.asarray(lp, dtype=float)
        groups = np.asarray(groups)
        practice_ids = sorted(pd.unique(groups).tolist())
        if len(practice_ids) < 2:
            raise ContractError(">=2 practices required")

        rng = np.random.default_rng(np.random.SeedSequence((int(self.seed), 0x510E)))
        estimates = []
        if self.subsample_frac >= 1.0:
            draws = [practice_ids]
        else:
            k = max(2, int(round(self.subsample_frac * len(practice_ids))))
            draws = [list(rng.choice(practice_ids, size=k, replace=False))
                     for _ in range(self.repeats)]
        for chosen in draws:
            mask = np.isin(groups, chosen)
            data = _prepare_grouped(time[mask], event[mask], lp[mask], groups[mask])
            sb2, su2, gamma, marg = self._optimize_variances(data)
            estimates.append((sb2, su2, gamma, marg))
        self.subsample_estimates_ = pd.DataFrame(
            estimates, columns=["sigma_b2", "sigma_u2", "gamma", "marginal_loglik"])
        sb2 = float(self.subsample_estimates_["sigma_b2"].mean())
        su2 = float(self.subsample_estimates_["sigma_u2"].mean())

        # one full-data solve at the averaged variances for the final effects
        data = _prepare_grouped(time, event, lp, groups)
        theta, lpl, _ = _slope_inner(data, sb2, su2,
                                     grad_tol=self.inner_grad_tol)
        P = data.n_practices
        self.sigma_b2_, self.sigma_u2_ = sb2, su2
        self.sigma_b_, self.sigma_u_ = float(np.sqrt(sb2)), float(np.sqrt(su2))
        self.gamma_ = float(theta[0])
        self.b_ = pd.Series(theta[1:P + 1], index=data.practice_ids, name="b")
        self.u_ = pd.Series(theta[P + 1:], index=data.practice_ids, name="u")
        self.loglik_ = float(lpl)
        self.boundary_ = bool(sb2 <= self.var_floor * 10 or su2 <= self.var_floor * 10)
        self.practice_ids_ = data.practice_ids
        eta = theta[0] * data.lp + theta[1:P + 1][data.g] + theta[P + 1:][data.g] * data.lp
        self.baseline_cumhaz_ = breslow_baseline(data.t, data.e, eta, presorted=True)
        return self

    def _optimize_variances(self, data):
        cache = {"theta": None}

        def marginal(log_sb2, log_su2):
            sb2, su2 = np.exp(log_sb2), np.exp(log_su2)
            theta, lpl, H_pen = _slope_inner(data, sb2, su2, theta0=cache["theta"],
                                             grad_tol=self.inner_grad_tol)
            cache["theta"] = theta
            P = data.n_practices
            b, u = theta[1:P + 1], theta[P + 1:]
            penalty = b @ b / (2 * sb2) + u @ u / (2 * su2)
            lm = _laplace_marginal(lpl, penalty, H_pen,
                                   P * (np.log(sb2) + np.log(su2)))
            return lm, theta

        lo, hi = np.log(self.var_floor), np.log(self.var_ceil)
        grid = np.linspace(lo, hi, self.grid_points)
        best = (-np.inf, grid[0], grid[0], None)
        for lb in grid:
            for lu in grid:
                lm, theta = marginal(lb, lu)
                if lm > best[0]:
                    best = (lm, lb, lu, theta)
        _, lb, lu, _ = best

        # coordinate ascent polish
        for _ in range(3):
            prev = (lb, lu)
            res = minimize_scalar(lambda x: -marginal(x, lu)[0],
                                  bounds=(lo, hi), method="bounded",
                                  options={"xatol": self.outer_rel_tol})
            lb = float(res.x)
            res = minimize_scalar(lambda x: -marginal(lb, x)[0],
                                  bounds=(lo, hi), method="bounded",
                                  options={"xatol": self.outer_rel_tol})
            lu = float(res.x)
            if abs(lb - prev[0]) < self.outer_rel_tol and abs(lu - prev[1]) < self.outer_rel_tol:
                break
        lm, theta = marginal(lb, lu)
        sb2 = self.var_floor if lb < lo + 10 * self.outer_rel_tol else float(np.exp(lb))
        su2 = self.var_floor if lu < lo + 10 * self.outer_rel_tol else float(np.exp(lu))
        return sb2, su2, float(theta[0]), float(lm)


# ---------------------------------------------------------------------------
# risk prediction and random-effect propagation
# ---------------------------------------------------------------------------

def predict_risk(lp, b, s0_at_horizon):
    """risk = 1 - S0 ** exp(lp + b) for baseline survival S0 at the horizon."""
    s0 = np.asarray(s0_at_horizon, dtype=float)
    if np.any(s0 <= 0) or np.any(s0 > 1):
        raise ContractError("baseline survival must lie in (0, 1]")
    return 1.0 - np.power(s0, np.exp(np.asarray(lp, dtype=float) + np.asarray(b, dtype=float)))


def adjust_risk(base_risk, frailty):
    """Frailty-adjusted risk 1 - (1 - base_risk) ** z for multiplier z = exp(b)."""
    base = np.asarray(base_risk, dtype=float)
    z = np.asarray(frailty, dtype=float)
    if np.any(base < 0) or np.any(base >= 1):
        raise ContractError("base_risk must lie in [0, 1)")
    if np.any(z <= 0):
        raise ContractError("frailty multiplier must be positive")
    out = 1.0 - np.power(1.0 - base, z)
    return float(out) if out.ndim == 0 else out


@dataclass
class RandomEffectSummary:
    mean: float
    percentiles: dict
    n_draws: int
    sigma_b: float
    sigma_u: float
    base_risk: float
    lp_scale: float

    def to_frame(self):
        rows = [{"statistic": "mean", "value": self.mean}]
        rows += [{"statistic": f"p{p:g}", "value": v} for p, v in self.percentiles.items()]
        return pd.DataFrame(rows)


def simulate_random_effect_draws(sigma_b, sigma_u, base_risk, lp_scale=1.0,
                                 n_draws=1_000_000, seed=0,
                                 percentiles=PERCENTILE_GRID) -> RandomEffectSummary:
    """Monte Carlo propagation of Gaussian random effects to adjusted risks.

    Per draw, b ~ N(0, sigma_b^2) and u ~ N(0, sigma_u^2); the adjusted risk
    is 1 - (1 - base_risk) ** exp(b + u * lp_scale).
    """
    if n_draws < 1:
        raise ContractError("n_draws must be >= 1")
    if sigma_b < 0 or sigma_u < 0:
        raise ContractError("sigma values must be nonnegative")
    base = float(base_risk)
    if not (0 <= base < 1):
        raise ContractError("base_risk must lie in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xD0A5)))
    shift = rng.normal(0.0, sigma_b, size=int(n_draws))
    if sigma_u > 0:
        shift = shift + rng.normal(0.0, sigma_u, size=int(n_draws)) * lp_scale
    risks = 1.0 - np.power(1.0 - base, np.exp(shift))
    pct = {p: float(v) for p, v in zip(percentiles, np.percentile(risks, percentiles))}
    return RandomEffectSummary(mean=float(risks.mean()), percentiles=pct,
                               n_draws=int(n_draws), sigma_b=float(sigma_b),
                               sigma_u=float(sigma_u), base_risk=base,
                               lp_scale=float(lp_scale))


# ---------------------------------------------------------------------------
# cluster bootstrap
# ---------------------------------------------------------------------------

def bootstrap_risk_ci(cohort: Cohort, statistic, n_boot=1000, seed=0,
                      max_failure_frac=0.05):
    """Percentile interval of a cohort statistic under the cluster bootstrap.

    Practices are resampled with replacement (the frailty is a practice-level
    quantity, so patient resampling would understate its variance); each
    resampled practice gets a fresh id so duplicates stay distinct clusters.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xB007)))
    ids = cohort.practice_ids
    frame = cohort.frame
    index = cohort.practice_index
    values, failures = [], 0
    for k in range(int(n_boot)):
        chosen = rng.choice(ids, size=len(ids), replace=True)
        parts = []
        for rep, pid in enumerate(chosen):
            part = frame.iloc[index[pid]].copy()
            part["practice_id"] = f"{pid}#{rep}"
            parts.append(part)
        resampled = Cohort(pd.concat(parts, ignore_index=True), validate=False)
        try:
            values.append(float(statistic(resampled)))
        except Exception:
            failures += 1
    if failures > max_failure_frac * n_boot:
        raise BootstrapError(f"{failures} of {n_boot} bootstrap replicates failed")
    values = np.asarray(values)
    lower, upper = np.percentile(values, [2.5, 97.5])
    return float(lower), float(upper)
