r"""Estimators of the TND marginal risk ratio.

For arm ``v`` the target is :math:`\psi_v = E_{TND}[\mu_v(C)\,\omega_v(C)]`
with debiasing weight :math:`\omega_v = (1-m)/(1-\mu_v) = \pi_v/\pi^0_v`, and
the risk ratio is :math:`\psi_1/\psi_0`.

* IPW: :math:`n^{-1}\sum Y_k I(V_k=v)/\hat\pi^0_v(C_k)`.
* Weighted outcome regression: :math:`n^{-1}\sum \hat\mu_v\hat\omega_v`.
* One-step (TNDDR): the mean of

  .. math::

     \phi_v = \frac{I(Y=1, V=v)}{\pi^0_v}
       - \frac{\mu_v I(Y=0)\{I(V=v) - \pi^0_v\}}{\pi^0_v (1-\mu_v)},

  whose centred version is the efficient influence function of
  :math:`\psi_v`. Inference is on the log scale.

The ``enum_*`` helpers evaluate the same functionals exactly against
:class:`~tndkit.dgp.ExactTables`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .core import EstimatorOutput, FoldAssignment, TndDataset, TndRecord, no_split, split_folds
from .errors import DegenerateDenominator, NonPositiveEstimate, TndError
from .nuisance import LearnerSpec, NuisanceEstimates, estimate_nuisances


def debias_weights_outcome(m_hat, mu_hat_v) -> np.ndarray:
    """``(1 - m) / (1 - mu_v)``, elementwise."""
    return (1.0 - np.asarray(m_hat, dtype=float)) / (1.0 - np.asarray(mu_hat_v, dtype=float))


def debias_weights_propensity(pi_hat, pi0_hat) -> np.ndarray:
    """``pi_v / pi0_v``, elementwise."""
    return np.asarray(pi_hat, dtype=float) / np.asarray(pi0_hat, dtype=float)


def ipw_psi_v(data: TndDataset, pi0_hat, v: int):
    """IPW estimate of ``psi_v`` and its per-record summands.

    ``pi0_hat`` is the control propensity of arm ``v`` at each record.
    """
    summands = ((data.y == 1) & (data.v == v)) / np.asarray(pi0_hat, dtype=float)
    return float(summands.mean()), summands


def outreg_psi_v(data: TndDataset, nuisances: NuisanceEstimates, v: int):
    """Weighted outcome-regression estimate of ``psi_v`` and its summands."""
    mu = nuisances.mu(v)
    summands = mu * debias_weights_outcome(nuisances.m, mu)
    return float(summands.mean()), summands


def tnddr_phi_array(y, vv, pi0, mu, v: int) -> np.ndarray:
    """Vectorised one-step contribution for arm ``v``."""
    y = np.asarray(y)
    a = (np.asarray(vv) == v).astype(float)
    pi0 = np.asarray(pi0, dtype=float)
    mu = np.asarray(mu, dtype=float)
    case = (y == 1) * a / pi0
    ctrl = mu * (y == 0) * (a - pi0) / (pi0 * (1.0 - mu))
    return case - ctrl


def tnddr_phi(record: TndRecord, pi0: float, mu: float, v: int) -> float:
    """One-step contribution of a single record for arm ``v``.

    ``pi0`` and ``mu`` are the arm-``v`` control propensity and outcome
    probability at the record's covariates. Controls from the other arm
    contribute with the opposite sign.
    """
    return float(tnddr_phi_array(record.y, record.v, pi0, mu, v))


def log_ratio_influence(psi_v1, psi_v0, inf_v1, inf_v0) -> np.ndarray:
    """Per-record influence of ``ln(psi_1 / psi_0)``."""
    inf_v1 = np.asarray(inf_v1, dtype=float)
    inf_v0 = np.asarray(inf_v0, dtype=float)
    return (inf_v1 - psi_v1) / psi_v1 - (inf_v0 - psi_v0) / psi_v0


def wald_log_interval(mrr: float, se_log: float, alpha: float = 0.05):
    """``exp(ln mrr -/+ z * se_log)`` with ``z`` the upper ``alpha/2`` normal quantile."""
    z = norm.ppf(1 - alpha / 2)
    return math.exp(math.log(mrr) - z * se_log), math.exp(math.log(mrr) + z * se_log)


def ci_log_mrr(psi_v1: float, psi_v0: float, inf_v1, inf_v0, alpha: float = 0.05, centered: bool = True):
    """Standard error of ``ln(psi_mrr)`` and the exponentiated Wald interval.

    With ``centered=False`` the variance is the raw second moment of the
    uncentred log-ratio contributions, kept for comparison only.

    Returns
    -------
    se_log : float
    ci : (float, float)

    Raises
    ------
    NonPositiveEstimate
        Either arm estimate is not strictly positive.
    """
    if not (psi_v1 > 0 and psi_v0 > 0):
        raise NonPositiveEstimate(f"log-scale interval needs positive estimates, got {psi_v1:.4g}, {psi_v0:.4g}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    n = len(inf_v1)
    if centered:
        d = log_ratio_influence(psi_v1, psi_v0, inf_v1, inf_v0)
        var = float(np.var(d, ddof=1)) if n > 1 else 0.0
    else:
        d = np.asarray(inf_v1) / psi_v1 - np.asarray(inf_v0) / psi_v0
        var = float(np.mean(d**2))
    se = math.sqrt(var / n)
    return se, wald_log_interval(psi_v1 / psi_v0, se, alpha)


def _ratio(psi1: float, psi0: float, method: str) -> float:
    if not psi0 > 0:
        raise DegenerateDenominator(f"{method}: estimate for V=0 is {psi0:.4g}, ratio undefined")
    return psi1 / psi0


def _output(method, psi1, psi0, inf1, inf0, alpha, with_ci=True, **meta) -> EstimatorOutput:
    mrr = _ratio(psi1, psi0, method)
    if with_ci:
        se, ci = ci_log_mrr(psi1, psi0, inf1, inf0, alpha)
    else:
        se, ci = float("nan"), (float("nan"), float("nan"))
    return EstimatorOutput(psi1, psi0, mrr, 1.0 - mrr, se, ci, inf1, inf0, method, alpha, dict(meta))


def tnddr_estimate(data: TndDataset, nuisances: NuisanceEstimates, alpha: float = 0.05) -> EstimatorOutput:
    """One-step estimator of the risk ratio with log-scale interval.

    Each arm estimate is the mean of its one-step contributions; the ratio of
    the two is the one-step estimator of the risk ratio.

    Raises
    ------
    DegenerateDenominator
        The V=0 estimate is not positive.
    """
    phi1 = tnddr_phi_array(data.y, data.v, nuisances.pi0_v1, nuisances.mu_v1, 1)
    phi0 = tnddr_phi_array(data.y, data.v, nuisances.pi0_v0, nuisances.mu_v0, 0)
    psi1, psi0 = float(phi1.mean()), float(phi0.mean())
    out = _output("tnddr", psi1, psi0, phi1, phi0, alpha, with_ci=psi1 > 0 and psi0 > 0)
    if psi1 > 0:
        out.metadata["se_log_uncentered"] = ci_log_mrr(psi1, psi0, phi1, phi0, alpha, centered=False)[0]
    return out


def ipw_mrr(data: TndDataset, nuisances: NuisanceEstimates, alpha: float = 0.05) -> EstimatorOutput:
    """IPW risk ratio.

    The interval applies the log-ratio influence construction to the IPW
    summands with the fitted propensities held fixed.
    """
    psi1, inf1 = ipw_psi_v(data, nuisances.pi0_v1, 1)
    psi0, inf0 = ipw_psi_v(data, nuisances.pi0_v0, 0)
    return _output("ipw", psi1, psi0, inf1, inf0, alpha, with_ci=psi1 > 0 and psi0 > 0)


def outreg_mrr(
    data: TndDataset,
    nuisances: NuisanceEstimates,
    alpha: float = 0.05,
    bootstrap: int = 0,
    learner: Optional[LearnerSpec] = None,
    j_folds: int = 1,
    seed: int = 0,
) -> EstimatorOutput:
    """Weighted outcome-regression risk ratio, optionally with a bootstrap interval.

    Parameters
    ----------
    bootstrap : int
        Number of nonparametric resamples; 0 reports no interval. Each
        resample refits the nuisances with ``learner``.
    learner : LearnerSpec
        Required when ``bootstrap > 0``.
    j_folds : int
        Folds used when refitting inside the bootstrap.
    seed : int
        Resample ``b`` draws rows with ``SeedSequence(seed, spawn_key=(b,))``.

    Notes
    -----
    The interval is ``exp(ln psi_mrr +/- z * sd)`` where ``sd`` is the
    standard deviation of the bootstrap log risk ratios. Resamples that fail
    (for instance an arm without cases) are skipped and counted.
    """
    psi1, inf1 = outreg_psi_v(data, nuisances, 1)
    psi0, inf0 = outreg_psi_v(data, nuisances, 0)
    mrr = _ratio(psi1, psi0, "outreg")
    se, ci = float("nan"), (float("nan"), float("nan"))
    meta = {}
    if bootstrap > 0:
        if learner is None:
            raise ValueError("bootstrap needs a learner specification")
        logs = []
        failed = 0
        for b in range(bootstrap):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
            idx = rng.integers(0, data.n, data.n)
            boot = data.subset(idx)
            try:
                folds = no_split(boot.n) if j_folds == 1 else split_folds(boot.n, j_folds, seed + b)
                nb = estimate_nuisances(boot, learner, folds, seed=seed + b)
                b1, _ = outreg_psi_v(boot, nb, 1)
                b0, _ = outreg_psi_v(boot, nb, 0)
                if b1 > 0 and b0 > 0:
                    logs.append(math.log(b1 / b0))
                else:
                    failed += 1
            except TndError:
                failed += 1
        if len(logs) >= 2 and mrr > 0:
            se = float(np.std(logs, ddof=1))
            ci = wald_log_interval(mrr, se, alpha)
        meta = {"bootstrap": bootstrap, "bootstrap_failed": failed}
    return EstimatorOutput(psi1, psi0, mrr, 1.0 - mrr, se, ci, inf1, inf0, "outreg", alpha, meta)


ESTIMATORS = ("ipw", "outreg", "tnddr")


def run_estimator(name: str, data: TndDataset, nuisances: NuisanceEstimates, alpha: float = 0.05, **kw) -> EstimatorOutput:
    if name == "ipw":
        return ipw_mrr(data, nuisances, alpha)
    if name == "outreg":
        return outreg_mrr(data, nuisances, alpha, **kw)
    if name == "tnddr":
        return tnddr_estimate(data, nuisances, alpha)
    raise ValueError(f"unknown estimator {name!r}")


def fit_and_estimate(
    data: TndDataset,
    learner: LearnerSpec,
    estimators=ESTIMATORS,
    j_folds: int = 2,
    alpha: float = 0.05,
    seed: int = 0,
) -> dict:
    """Validate-free convenience: fold split, nuisance fit and every requested estimator."""
    folds = no_split(data.n) if j_folds == 1 else split_folds(data.n, j_folds, seed)
    nuis = estimate_nuisances(data, learner, folds, seed=seed)
    return {name: run_estimator(name, data, nuis, alpha) for name in estimators}


# ---------------------------------------------------------------------------
# exact evaluation on a discrete DGP


def enum_onestep_mean(tables, pi0_v, mu_v, v: int) -> float:
    """``E_TND[phi_v]`` for atomwise nuisances ``pi0_v``, ``mu_v`` (arm ``v``)."""
    pi0_v = np.asarray(pi0_v, dtype=float)
    mu_v = np.asarray(mu_v, dtype=float)
    return tables.expect(lambda k, vv, y: tnddr_phi_array(np.full(k.shape, y), np.full(k.shape, vv), pi0_v[k], mu_v[k], v))


def enum_outreg(tables, mu_v, m, v: int) -> float:
    """``E_TND[mu_v * (1 - m) / (1 - mu_v)]`` for atomwise nuisances."""
    mu_v = np.asarray(mu_v, dtype=float)
    return float(np.sum(tables.p_tnd_c * mu_v * debias_weights_outcome(m, mu_v)))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: value={self.value:.6g} tol={self.tolerance:.3g} {self.detail}".rstrip()


PERTURB_EPS = (10**-1.0, 10**-1.5, 10**-2.0, 10**-2.5)


def _default_deltas(K):
    base = np.linspace(0.3, 0.6, K)
    return base, 0.5 * base[::-1]


def loglog_slope(eps, errors) -> float:
    return float(np.polyfit(np.log(eps), np.log(np.abs(errors)), 1)[0])


def remainder_biases(tables, v: int, delta_pi0=None, delta_mu=None, eps=PERTURB_EPS, which="both"):
    """Exact one-step bias under perturbed nuisances.

    ``which`` selects the perturbed nuisance: ``"both"``, ``"pi0"`` or ``"mu"``.
    """
    K = tables.atoms.size
    d1, d2 = _default_deltas(K)
    d1 = d1 if delta_pi0 is None else np.asarray(delta_pi0, dtype=float)
    d2 = d2 if delta_mu is None else np.asarray(delta_mu, dtype=float)
    pi0 = tables.pi0[:, v]
    mu = tables.mu[:, v]
    out = []
    for e in eps:
        p = pi0 + (e * d1 if which in ("both", "pi0") else 0)
        u = mu + (e * d2 if which in ("both", "mu") else 0)
        out.append(enum_onestep_mean(tables, p, u, v) - tables.psi_tnd[v])
    return np.array(out)


def outreg_biases(tables, v: int, delta_mu=None, eps=PERTURB_EPS):
    K = tables.atoms.size
    d2 = _default_deltas(K)[1] if delta_mu is None else np.asarray(delta_mu, dtype=float)
    mu = tables.mu[:, v]
    return np.array([enum_outreg(tables, mu + e * d2, tables.m, v) - tables.psi_tnd[v] for e in eps])


def oracle_checks(tables, swap_pi0_arms: bool = False) -> list:
    """Run every enumeration identity; returns one :class:`CheckResult` per check.

    ``swap_pi0_arms`` injects a fault by exchanging the two control-propensity
    arms before the checks that use them.
    """
    pi0 = tables.pi0[:, ::-1] if swap_pi0_arms else tables.pi0
    omega_prop = debias_weights_propensity(tables.pi, pi0)
    # reference value built from the (possibly faulted) propensity-form weights
    psi_ref = np.sum(tables.p_tnd_c[:, None] * tables.mu * omega_prop, axis=0)
    res = []
    gap = float(np.max(np.abs(tables.omega_outcome - omega_prop)))
    res.append(CheckResult("weight_forms_equal", gap <= 1e-12, gap, 1e-12))
    worst = max(abs(enum_onestep_mean(tables, pi0[:, v], tables.mu[:, v], v) - psi_ref[v]) for v in (0, 1))
    res.append(CheckResult("eif_mean_zero", worst <= 1e-10, worst, 1e-10))
    # arbitrary clamped alternatives for the "wrong" nuisance
    K = tables.atoms.size
    wrong = np.clip(np.linspace(0.2, 0.7, K), 0.01, 0.99)
    dr_mu = max(abs(enum_onestep_mean(tables, pi0[:, v], wrong, v) - tables.psi_tnd[v]) for v in (0, 1))
    res.append(CheckResult("double_robust_pi0_exact", dr_mu <= 1e-10, dr_mu, 1e-10))
    dr_pi = max(abs(enum_onestep_mean(tables, wrong, tables.mu[:, v], v) - tables.psi_tnd[v]) for v in (0, 1))
    res.append(CheckResult("double_robust_mu_exact", dr_pi <= 1e-10, dr_pi, 1e-10))
    for v in (0, 1):
        b = remainder_biases(tables, v)
        slope = loglog_slope(PERTURB_EPS, b) if np.all(np.abs(b) > 0) else float("nan")
        res.append(CheckResult(f"remainder_slope_v{v}", abs(slope - 2.0) <= 0.1, slope, 0.1, "target 2"))
    for v in (0, 1):
        b = outreg_biases(tables, v)
        slope = loglog_slope(PERTURB_EPS, b)
        res.append(CheckResult(f"outreg_slope_v{v}", abs(slope - 1.0) <= 0.1, slope, 0.1, "target 1"))
    return res
