"""Nuisance learners, feature maps and cross-fitted nuisance estimates.

Two learners are provided:

* :func:`fit_logistic` -- ridge-stabilised logistic regression solved by
  damped Newton iterations.
* :func:`fit_l1_basis` -- an L1-penalised logistic regression on zero-order
  indicator bases ``I(x_j >= knot)`` plus the raw features, tuned by
  cross-validated log-loss. It plays the role of a highly adaptive lasso.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numba
import numpy as np
from scipy.special import expit

from .core import FoldAssignment, TndDataset
from .errors import (
    ConfigError,
    DegenerateArm,
    DegenerateLabels,
    NoConvergence,
    SingularHessian,
)

# ---------------------------------------------------------------------------
# feature maps


@dataclass(frozen=True)
class FeatureMap:
    """Deterministic map from raw covariates to model features (no intercept)."""

    name: str
    transform: Callable[[np.ndarray], np.ndarray] = field(compare=False)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        return np.asarray(self.transform(X), dtype=float).reshape(X.shape[0], -1)


def _first(X):
    return X[:, 0]


def _ps_correct(X):
    c = _first(X)
    return np.column_stack([c, np.abs(c), np.sin(np.pi * c)])


def _out_correct(X):
    c = _first(X)
    return np.column_stack([c, np.exp(c)])


def _linear(X):
    return _first(X)[:, None]


def _identity(X):
    return X


# module-level callables keep feature maps picklable for process pools
PS_CORRECT = FeatureMap("ps_correct", _ps_correct)
PS_WRONG = FeatureMap("ps_wrong", _linear)
OUT_CORRECT = FeatureMap("out_correct", _out_correct)
OUT_WRONG = FeatureMap("out_wrong", _linear)
IDENTITY = FeatureMap("identity", _identity)

BUILTIN_MAPS = {f.name: f for f in (PS_CORRECT, PS_WRONG, OUT_CORRECT, OUT_WRONG, IDENTITY)}


@dataclass(frozen=True)
class _LevelIndicators:
    levels: tuple

    def __call__(self, X):
        c = X[:, 0]
        if len(self.levels) < 2:
            return np.zeros((len(c), 0))
        return np.column_stack([(c == lv).astype(float) for lv in self.levels[1:]])


def saturated_map(levels: Sequence[float]) -> FeatureMap:
    """Indicators of every level but the first, for a single discrete covariate."""
    levels = tuple(float(v) for v in levels)
    return FeatureMap("saturated[" + ",".join(f"{v:g}" for v in levels) + "]", _LevelIndicators(levels))


def feature_map(name: str) -> FeatureMap:
    try:
        return BUILTIN_MAPS[name]
    except KeyError:
        raise ConfigError(f"unknown feature map {name!r}; choose from {', '.join(BUILTIN_MAPS)}") from None


def with_intercept(F: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(F.shape[0]), F])


# ---------------------------------------------------------------------------
# logistic GLM


def _log1pexp(eta):
    return np.logaddexp(0.0, eta)


def logistic_loss(beta, X, y, ridge=0.0) -> float:
    """Mean negative Bernoulli log-likelihood plus ``ridge/2 * ||beta||^2``."""
    eta = X @ beta
    return float(np.mean(_log1pexp(eta) - y * eta) + 0.5 * ridge * beta @ beta)


def logistic_gradient(beta, X, y, ridge=0.0) -> np.ndarray:
    return X.T @ (expit(X @ beta) - y) / X.shape[0] + ridge * beta


def logistic_hessian(beta, X, ridge=0.0) -> np.ndarray:
    p = expit(X @ beta)
    return (X * (p * (1 - p))[:, None]).T @ X / X.shape[0] + ridge * np.eye(X.shape[1])


def fit_logistic(features, labels, ridge: float = 1e-8, tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Ridge-penalised logistic regression by damped Newton iterations.

    Parameters
    ----------
    features : (n, p) array
        Design matrix, used as given (include a column of ones for an intercept).
    labels : (n,) array of {0, 1}
    ridge : float
        Penalty ``ridge/2 * ||beta||^2`` on every coefficient, intercept
        included, added to the mean log-loss. Keeps separable fits finite.
    tol : float
        Convergence when ``max |gradient| < tol``.
    max_iter : int

    Returns
    -------
    beta : (p,) array

    Raises
    ------
    NoConvergence
        ``max_iter`` reached; ``exc.result`` holds the last iterate.
    SingularHessian
        The Hessian could not be factorised even after Levenberg damping.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise ConfigError("features must be (n, p) with n = len(labels) >= 1")
    if ridge < 0:
        raise ConfigError("ridge must be non-negative")
    beta = np.zeros(X.shape[1])
    loss = logistic_loss(beta, X, y, ridge)
    for _ in range(max_iter):
        g = logistic_gradient(beta, X, y, ridge)
        if np.max(np.abs(g), initial=0.0) < tol:
            return beta
        H = logistic_hessian(beta, X, ridge)
        step = None
        damp = 0.0
        for _attempt in range(12):
            try:
                L = np.linalg.cholesky(H + damp * np.eye(len(beta)))
                step = -np.linalg.solve(L.T, np.linalg.solve(L, g))
                break
            except np.linalg.LinAlgError:
                damp = 1e-10 if damp == 0 else damp * 100
        if step is None:
            raise SingularHessian("Hessian not positive definite after damping")
        t = 1.0
        while True:
            cand = beta + t * step
            new = logistic_loss(cand, X, y, ridge)
            if new <= loss + 1e-4 * t * (g @ step) or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12 and new > loss:
            # no descent left at machine precision; accept current iterate
            break
        beta, loss = cand, new
    g = logistic_gradient(beta, X, y, ridge)
    if np.max(np.abs(g), initial=0.0) < tol:
        return beta
    raise NoConvergence(f"Newton stopped with max|grad| = {np.max(np.abs(g)):.3g}", result=beta)


# ---------------------------------------------------------------------------
# L1 basis learner


@numba.njit(cache=True)
def _expit_nb(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _log1pexp_nb(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@numba.njit(cache=True)
def _penalized(X, y, b0, beta, lam):
    n, p = X.shape
    loss = 0.0
    for i in range(n):
        eta = b0
        for j in range(p):
            eta += X[i, j] * beta[j]
        loss += _log1pexp_nb(eta) - y[i] * eta
    pen = 0.0
    for j in range(p):
        pen += abs(beta[j])
    return loss / n + lam * pen


@numba.njit(cache=True)
def _quadratic_cd(G, r, lam, x, max_inner, tol):
    # minimise 0.5 x'Gx - r'x + lam * sum_{j>=1} |x_j|; x[0] is the intercept
    q = G.shape[0]
    Gx = G @ x
    for _ in range(max_inner):
        biggest = 0.0
        for j in range(q):
            if G[j, j] <= 0.0:
                continue
            rho = r[j] - Gx[j] + G[j, j] * x[j]
            if j == 0:
                new = rho / G[j, j]
            elif rho > lam:
                new = (rho - lam) / G[j, j]
            elif rho < -lam:
                new = (rho + lam) / G[j, j]
            else:
                new = 0.0
            d = new - x[j]
            if d != 0.0:
                for k in range(q):
                    Gx[k] += G[k, j] * d
                x[j] = new
                if abs(d) > biggest:
                    biggest = abs(d)
        if biggest < tol:
            break
    return x


@numba.njit(cache=True)
def _l1_path(X, y, lambdas, b0_init, max_outer, max_inner, tol):
    """Proximal-Newton lasso path with warm starts.

    Returns intercepts, coefficients and, per lambda, the penalised objective
    after each outer sweep (NaN padded). A backtracking step on the true
    objective makes every recorded sequence non-increasing.
    """
    n, p = X.shape
    L = lambdas.shape[0]
    b0s = np.zeros(L)
    coefs = np.zeros((L, p))
    hist = np.full((L, max_outer + 1), np.nan)
    converged = np.zeros(L, dtype=np.bool_)
    x = np.zeros(p + 1)
    x[0] = b0_init
    Xa = np.ones((n, p + 1))
    Xa[:, 1:] = X
    for li in range(L):
        lam = lambdas[li]
        F = _penalized(X, y, x[0], x[1:], lam)
        hist[li, 0] = F
        for it in range(max_outer):
            eta = Xa @ x
            w = np.empty(n)
            z = np.empty(n)
            for i in range(n):
                pi = _expit_nb(eta[i])
                wi = pi * (1.0 - pi)
                if wi < 1e-6:
                    wi = 1e-6
                w[i] = wi
                z[i] = eta[i] + (y[i] - pi) / wi
            Xw = Xa * w.reshape(-1, 1)
            G = Xw.T @ Xa / n
            r = Xw.T @ z / n
            cand = _quadratic_cd(G, r, lam, x.copy(), max_inner, tol * 1e-2)
            d = cand - x
            t = 1.0
            accepted = False
            Fn = F
            while t > 1e-10:
                trial = x + t * d
                Fn = _penalized(X, y, trial[0], trial[1:], lam)
                if Fn <= F:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                converged[li] = True
                hist[li, it + 1] = F
                break
            x = x + t * d
            change = F - Fn
            F = Fn
            hist[li, it + 1] = F
            if change <= tol * max(1.0, abs(F)):
                converged[li] = True
                break
        b0s[li] = x[0]
        coefs[li] = x[1:]
    return b0s, coefs, hist, converged


def hinge_basis(X, n_knots: int):
    """Knots and column layout of the zero-order indicator basis.

    Knots are empirical quantiles; an indicator that would be constant on
    ``X`` or duplicate the raw column of a binary feature is skipped.
    """
    X = np.asarray(X, dtype=float)
    knots = []
    levels = np.arange(1, n_knots + 1) / (n_knots + 1)
    for j in range(X.shape[1]):
        col = X[:, j]
        lo = col.min()
        ks = np.unique(np.quantile(col, levels, method="inverted_cdf"))
        ks = ks[ks > lo]
        uniq = np.unique(col)
        if uniq.size == 2:
            ks = ks[ks != uniq[1]]
        knots.append(ks)
    return knots


def expand_basis(X, knots) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    cols = [X]
    for j, ks in enumerate(knots):
        if ks.size:
            cols.append((X[:, j : j + 1] >= ks[None, :]).astype(float))
    return np.hstack(cols)


@dataclass(frozen=True, eq=False)
class L1BasisModel:
    """Fitted L1 basis learner; :meth:`predict_proba` maps raw covariates to probabilities."""

    knots: list
    center: np.ndarray
    scale: np.ndarray
    keep: np.ndarray
    intercept: float
    coef: np.ndarray
    lambda_: float
    lambda_grid: np.ndarray
    cv_loss: np.ndarray
    objective_history: np.ndarray
    degenerate: bool = False
    constant: float = float("nan")

    def design(self, X) -> np.ndarray:
        B = expand_basis(X, self.knots)[:, self.keep]
        return (B - self.center) / self.scale

    def decision_function(self, X) -> np.ndarray:
        if self.degenerate:
            return np.full(np.asarray(X).shape[0], math.log(self.constant / (1 - self.constant)))
        return self.intercept + self.design(X) @ self.coef

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.coef))


def _standardized_basis(X, n_knots):
    knots = hinge_basis(X, n_knots)
    B = expand_basis(X, knots)
    sd = B.std(axis=0)
    keep = sd > 1e-12
    # drop exact duplicate columns (same pattern as an earlier column)
    Bk = B[:, keep]
    _, first = np.unique(Bk.T, axis=0, return_index=True)
    dup = np.ones(Bk.shape[1], dtype=bool)
    dup[first] = False
    idx = np.flatnonzero(keep)
    keep[idx[dup]] = False
    B = B[:, keep]
    center = B.mean(axis=0)
    scale = B.std(axis=0)
    return knots, keep, center, scale, (B - center) / scale


def _cv_split(n, k, seed):
    perm = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    for j, block in enumerate(np.array_split(perm, k)):
        fold[block] = j
    return fold


def _logit(p):
    return math.log(p / (1 - p))


def fit_l1_basis(
    covariates,
    labels,
    n_knots: int = 20,
    cv_folds: int = 5,
    lambda_grid: Optional[Sequence[float]] = None,
    seed: int = 0,
    n_lambda: int = 30,
    lambda_ratio: float = 1e-3,
    eps: float = 0.01,
    max_outer: int = 100,
    max_inner: int = 1000,
    tol: float = 1e-9,
    on_degenerate: str = "flag",
) -> L1BasisModel:
    """L1-penalised logistic regression on indicator bases with CV-tuned lambda.

    The objective is mean log-loss plus ``lambda * ||beta||_1`` over the
    standardised basis columns; the intercept is unpenalised. The default
    grid holds ``n_lambda`` log-spaced values from the smallest lambda that
    zeroes every coefficient down to ``lambda_ratio`` times that.

    Parameters
    ----------
    covariates : (n, d) array
    labels : (n,) array of {0, 1}
    n_knots : int
        Empirical-quantile knots per feature.
    cv_folds : int
        Folds for choosing lambda by held-out log-loss.
    lambda_grid : sequence of float, optional
        Explicit decreasing grid; overrides ``n_lambda``/``lambda_ratio``.
    seed : int
        Seeds the CV split; the fit is otherwise deterministic.
    on_degenerate : {"flag", "raise"}
        Constant labels either return a flagged constant model predicting
        ``1 - eps`` or ``eps``, or raise :class:`DegenerateLabels`.

    Raises
    ------
    NoConvergence
        The final fit at the selected lambda hit ``max_outer``.
    """
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(labels, dtype=float)
    n = X.shape[0]
    if n != y.shape[0]:
        raise ConfigError("covariates and labels differ in length")
    if n < 2 * cv_folds:
        raise ConfigError(f"need at least {2 * cv_folds} rows for {cv_folds}-fold CV")
    ybar = float(y.mean())
    if ybar in (0.0, 1.0):
        if on_degenerate == "raise":
            raise DegenerateLabels(f"all labels equal {int(ybar)}")
        const = 1 - eps if ybar == 1.0 else eps
        return L1BasisModel(
            [], np.zeros(0), np.ones(0), np.zeros(0, dtype=bool), _logit(const), np.zeros(0),
            float("nan"), np.zeros(0), np.zeros(0), np.zeros((0, 0)), True, const,
        )
    knots, keep, center, scale, B = _standardized_basis(X, n_knots)
    if lambda_grid is None:
        lam_max = float(np.max(np.abs(B.T @ (y - ybar))) / n) if B.shape[1] else 1.0
        lam_max = max(lam_max, 1e-12)
        lambdas = np.geomspace(lam_max, lam_max * lambda_ratio, n_lambda)
    else:
        lambdas = np.asarray(lambda_grid, dtype=float)
        if lambdas.ndim != 1 or lambdas.size == 0 or np.any(lambdas < 0) or np.any(np.diff(lambdas) > 0):
            raise ConfigError("lambda_grid must be a non-empty, non-negative decreasing sequence")
    b0 = _logit(ybar)

    fold = _cv_split(n, cv_folds, seed)
    cv = np.zeros(lambdas.size)
    for k in range(cv_folds):
        tr, te = fold != k, fold == k
        ytr = y[tr]
        mtr = min(max(float(ytr.mean()), 1e-6), 1 - 1e-6)
        b0s, coefs, _, _ = _l1_path(B[tr], ytr, lambdas, _logit(mtr), max_outer, max_inner, tol)
        eta = b0s[None, :] + B[te] @ coefs.T
        cv += np.sum(_log1pexp(eta) - y[te][:, None] * eta, axis=0)
    cv /= n
    best = int(np.argmin(cv))
    b0s, coefs, hist, conv = _l1_path(B, y, lambdas[: best + 1], b0, max_outer, max_inner, tol)
    if not conv[best]:
        raise NoConvergence(f"L1 path did not converge at lambda={lambdas[best]:.3g}")
    return L1BasisModel(
        knots, center, scale, keep, float(b0s[best]), coefs[best].copy(),
        float(lambdas[best]), lambdas, cv, hist,
    )


def penalized_objective(model: L1BasisModel, X, y, lam=None) -> float:
    B = model.design(X)
    lam = model.lambda_ if lam is None else lam
    return float(_penalized(B, np.asarray(y, dtype=float), model.intercept, model.coef, lam))


# ---------------------------------------------------------------------------
# specification and cross-fitted estimates


@dataclass(frozen=True)
class LearnerSpec:
    """How the nuisance functions are learnt.

    ``ps_map`` feeds the control-propensity model; ``outcome_map`` feeds the
    arm-specific outcome models and the marginal outcome model ``m``.
    """

    kind: str = "logistic_glm"
    ps_map: FeatureMap = PS_CORRECT
    outcome_map: FeatureMap = OUT_CORRECT
    eps: float = 0.01
    ridge: float = 1e-8
    tol: float = 1e-8
    max_iter: int = 100
    n_knots: int = 20
    cv_folds: int = 5
    n_lambda: int = 30
    lambda_ratio: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("logistic_glm", "l1_basis"):
            raise ConfigError(f"unknown learner kind {self.kind!r}")
        if not 0 < self.eps < 0.5:
            raise ConfigError("eps must lie in (0, 0.5)")

    def with_maps(self, ps_map: FeatureMap, outcome_map: FeatureMap) -> "LearnerSpec":
        return dataclasses.replace(self, ps_map=ps_map, outcome_map=outcome_map)


def _fit_predict(spec: LearnerSpec, fmap: FeatureMap, Xtr, ytr, Xte, seed: int) -> np.ndarray:
    Ftr, Fte = fmap(Xtr), fmap(Xte)
    if spec.kind == "logistic_glm":
        try:
            beta = fit_logistic(with_intercept(Ftr), ytr, spec.ridge, spec.tol, spec.max_iter)
        except NoConvergence as exc:
            # near-separable strata: the last Newton iterate is still a valid fit before clamping
            beta = exc.result
        return expit(with_intercept(Fte) @ beta)
    model = fit_l1_basis(
        Ftr, ytr, n_knots=spec.n_knots, cv_folds=spec.cv_folds, seed=seed,
        n_lambda=spec.n_lambda, lambda_ratio=spec.lambda_ratio, eps=spec.eps,
    )
    return model.predict_proba(Fte)


@dataclass(frozen=True, eq=False)
class NuisanceEstimates:
    """Per-subject nuisance predictions, each clamped to ``[eps, 1 - eps]``."""

    pi0_v1: np.ndarray
    pi0_v0: np.ndarray
    mu_v1: np.ndarray
    mu_v0: np.ndarray
    m: np.ndarray
    eps: float = 0.01

    def __post_init__(self):
        for f in ("pi0_v1", "pi0_v0", "mu_v1", "mu_v0", "m"):
            a = np.array(getattr(self, f), dtype=float, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, f, a)

    def pi0(self, v: int) -> np.ndarray:
        return self.pi0_v1 if v == 1 else self.pi0_v0

    def mu(self, v: int) -> np.ndarray:
        return self.mu_v1 if v == 1 else self.mu_v0

    @classmethod
    def from_raw(cls, pi0_v1, mu_v1, mu_v0, m, eps=0.01) -> "NuisanceEstimates":
        """Clamp raw predictions; ``pi0_v0`` is ``1 - pi0_v1`` before clamping."""
        pi0_v1 = np.asarray(pi0_v1, dtype=float)
        lo, hi = eps, 1 - eps
        return cls(
            np.clip(pi0_v1, lo, hi),
            np.clip(1 - pi0_v1, lo, hi),
            np.clip(mu_v1, lo, hi),
            np.clip(mu_v0, lo, hi),
            np.clip(m, lo, hi),
            eps,
        )


def _require_labels(y, stratum, fold_label):
    if not np.any(y == 1) or not np.any(y == 0):
        missing = "0" if np.all(y == 1) else "1"
        if y.size == 0:
            raise DegenerateArm(f"empty stratum {stratum}", fold_label)
        raise DegenerateArm(f"stratum {stratum} has no label {missing}", fold_label)


def estimate_nuisances(data: TndDataset, spec: LearnerSpec, folds: FoldAssignment, seed: int = 0) -> NuisanceEstimates:
    """Fit on each fold complement and predict on the held-out fold.

    ``pi0`` regresses ``V`` on the propensity features among controls, ``mu_v``
    regresses ``Y`` on the outcome features within arm ``v`` and ``m`` does the
    same on all records. With a single fold everything is fit and predicted on
    the full data.

    Raises
    ------
    DegenerateArm
        A training set lacks one of the classes a model needs; the message
        names the fold and the stratum.
    """
    if folds.n != data.n:
        raise ConfigError(f"fold assignment covers {folds.n} rows, dataset has {data.n}")
    X, v, y = data.covariates, data.v, data.y
    pi0 = np.empty(data.n)
    mu1 = np.empty(data.n)
    mu0 = np.empty(data.n)
    m = np.empty(data.n)
    for j in range(folds.j_folds):
        te = folds.fold_indices(j)
        tr = folds.train_indices(j)
        where = f"fold {j}" if folds.j_folds > 1 else "full sample"
        Xtr, vtr, ytr = X[tr], v[tr], y[tr]
        ctrl = ytr == 0
        _require_labels(vtr[ctrl], "controls (V among Y=0)", where)
        _require_labels(ytr[vtr == 1], "V=1 (Y among vaccinated)", where)
        _require_labels(ytr[vtr == 0], "V=0 (Y among unvaccinated)", where)
        base = (int(seed) * 1_000_003 + j * 10) & (2**63 - 1)
        pi0[te] = _fit_predict(spec, spec.ps_map, Xtr[ctrl], vtr[ctrl], X[te], base + 1)
        mu1[te] = _fit_predict(spec, spec.outcome_map, Xtr[vtr == 1], ytr[vtr == 1], X[te], base + 2)
        mu0[te] = _fit_predict(spec, spec.outcome_map, Xtr[vtr == 0], ytr[vtr == 0], X[te], base + 3)
        m[te] = _fit_predict(spec, spec.outcome_map, Xtr, ytr, X[te], base + 4)
    return NuisanceEstimates.from_raw(pi0, mu1, mu0, m, spec.eps)
