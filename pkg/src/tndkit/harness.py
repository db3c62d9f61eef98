"""Monte Carlo replication of simulation studies.

A study draws ``reps`` TND datasets per sample size, fits nuisances under one
or more learner scenarios and records every estimator's risk ratio and
interval. Summaries report mean bias, Monte Carlo standard error and
interval coverage; failures are counted, never dropped silently.

Seeds
-----
The dataset for ``(rep, n)`` is drawn with ``derive_seed(seed, "data", rep, n)``,
so every scenario sees the same data. Fold splits and CV splits use
``derive_seed(seed, rep, n, scenario)``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .core import no_split, split_folds, validate_dataset
from .dgp import DgpConfig, simulate_tnd, truth_mrr_monte_carlo
from .errors import ConfigError, TndError, TruthResolutionFailed
from .estimators import ESTIMATORS, run_estimator
from .nuisance import IDENTITY, OUT_CORRECT, OUT_WRONG, PS_CORRECT, PS_WRONG, LearnerSpec, estimate_nuisances

SCENARIOS = {
    "a": (PS_CORRECT, OUT_CORRECT),
    "b": (PS_WRONG, OUT_CORRECT),
    "c": (PS_CORRECT, OUT_WRONG),
    "d": (PS_WRONG, OUT_WRONG),
}


def _part_int(p) -> int:
    if isinstance(p, str):
        return int.from_bytes(hashlib.sha256(p.encode()).digest()[:8], "little")
    return int(p) & (2**64 - 1)


def derive_seed(*parts) -> int:
    """Deterministic 64-bit seed from integers and strings."""
    words = []
    for p in parts:
        x = _part_int(p)
        words += [x & 0xFFFFFFFF, x >> 32]
    state = np.random.SeedSequence(words).generate_state(2, np.uint64)
    return int(state[0])


def learner_for(scenario: str, base: LearnerSpec) -> LearnerSpec:
    """Learner of a scenario: ``a``-``d`` are GLMs with fixed maps, ``flexible`` uses ``base``."""
    if scenario in SCENARIOS:
        ps, out = SCENARIOS[scenario]
        return dataclasses.replace(base, kind="logistic_glm", ps_map=ps, outcome_map=out)
    if scenario == "flexible":
        return base
    raise ConfigError(f"unknown scenario {scenario!r}; choose from a, b, c, d, flexible")


@dataclass(frozen=True)
class StudyConfig:
    dgp: DgpConfig
    n_list: Sequence[int] = (500, 1000, 2000)
    reps: int = 1000
    estimators: Sequence[str] = ESTIMATORS
    scenarios: Sequence[str] = ("flexible",)
    learner: LearnerSpec = field(default_factory=lambda: LearnerSpec(kind="l1_basis", ps_map=IDENTITY, outcome_map=IDENTITY))
    j_folds: int = 2
    alpha: float = 0.05
    seed: int = 0
    truth: Union[float, str] = "auto"
    truth_n_pop: int = 10_000_000
    outreg_bootstrap: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if not self.n_list or min(self.n_list) < 4:
            raise ConfigError("n_list must hold sample sizes >= 4")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise ConfigError(f"unknown estimators {sorted(bad)}")
        for s in self.scenarios:
            learner_for(s, self.learner)
        if self.j_folds < 1:
            raise ConfigError("j_folds must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if isinstance(self.truth, str) and self.truth != "auto":
            raise ConfigError("truth must be a number or 'auto'")


@dataclass(frozen=True)
class RepRecord:
    rep: int
    n: int
    scenario: str
    estimator: str
    psi_mrr: float
    se_log: float
    ci_lower: float
    ci_upper: float
    failure: str = ""

    @property
    def ok(self) -> bool:
        return not self.failure


REP_FIELDS = [f.name for f in dataclasses.fields(RepRecord)]


@dataclass(frozen=True)
class SummaryRow:
    estimator: str
    scenario: str
    n: int
    mean_bias: float
    mc_se: float
    coverage: float
    failures: int
    successes: int
    flags: str = ""


SUMMARY_FIELDS = [f.name for f in dataclasses.fields(SummaryRow)]


@dataclass(frozen=True)
class McSummary:
    truth: float
    rows: tuple
    failure_reasons: dict = field(default_factory=dict)

    def get(self, estimator: str, scenario: str, n: int) -> SummaryRow:
        for r in self.rows:
            if (r.estimator, r.scenario, r.n) == (estimator, scenario, n):
                return r
        raise KeyError((estimator, scenario, n))


_TRUTH_CACHE: dict = {}


def resolve_truth(config: StudyConfig) -> float:
    """Numeric truth, computing (and caching per DGP fingerprint) when ``"auto"``."""
    if not isinstance(config.truth, str):
        t = float(config.truth)
    else:
        key = (config.dgp.fingerprint(), config.dgp.seed, config.truth_n_pop)
        if key not in _TRUTH_CACHE:
            try:
                _TRUTH_CACHE[key] = truth_mrr_monte_carlo(config.dgp, config.truth_n_pop, threads=config.threads).psi_mrr
            except TndError as exc:
                raise TruthResolutionFailed(str(exc)) from exc
        t = _TRUTH_CACHE[key]
    if not (math.isfinite(t) and t > 0):
        raise TruthResolutionFailed(f"truth must be finite and positive, got {t}")
    return t


def _failed(rep, n, scenario, names, reason):
    nan = float("nan")
    return [RepRecord(rep, n, scenario, e, nan, nan, nan, nan, reason) for e in names]


def run_rep(config: StudyConfig, rep: int, n: int) -> list:
    """All records of one replicate at one sample size, in scenario/estimator order."""
    out = []
    try:
        data = simulate_tnd(config.dgp.with_seed(derive_seed(config.seed, "data", rep, n)), n)
        validate_dataset(data)
    except TndError as exc:
        for s in config.scenarios:
            out += _failed(rep, n, s, config.estimators, type(exc).__name__)
        return out
    for s in config.scenarios:
        seed = derive_seed(config.seed, rep, n, s)
        spec = learner_for(s, config.learner)
        try:
            folds = no_split(n) if config.j_folds == 1 else split_folds(n, config.j_folds, seed)
            nuis = estimate_nuisances(data, spec, folds, seed=seed)
        except TndError as exc:
            out += _failed(rep, n, s, config.estimators, type(exc).__name__)
            continue
        for e in config.estimators:
            kw = {}
            if e == "outreg" and config.outreg_bootstrap:
                kw = dict(bootstrap=config.outreg_bootstrap, learner=spec, j_folds=config.j_folds, seed=seed)
            try:
                r = run_estimator(e, data, nuis, config.alpha, **kw)
            except TndError as exc:
                out += _failed(rep, n, s, [e], type(exc).__name__)
                continue
            out.append(RepRecord(rep, n, s, e, r.psi_mrr, r.se_log_mrr, r.ci_mrr[0], r.ci_mrr[1]))
    return out


def _run_task(args):
    config, rep, n = args
    return run_rep(config, rep, n)


def run_records(config: StudyConfig) -> list:
    """Every per-rep record, ordered by (n, rep, scenario, estimator) whatever the parallelism."""
    tasks = [(config, r, n) for n in config.n_list for r in range(config.reps)]
    if config.threads <= 1:
        chunks = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=config.threads) as ex:
            chunks = list(ex.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * config.threads))))
    return [rec for ch in chunks for rec in ch]


def summarize(records: Iterable[RepRecord], truth: float) -> McSummary:
    """Aggregate per-rep records; row order follows first appearance of each key."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.estimator, r.scenario, r.n), []).append(r)
    rows = []
    reasons: dict = {}
    for (e, s, n), recs in groups.items():
        ok = [r for r in recs if r.ok]
        fails = len(recs) - len(ok)
        flags = []
        for r in recs:
            if not r.ok:
                reasons.setdefault((e, s, n), {})
                reasons[(e, s, n)][r.failure] = reasons[(e, s, n)].get(r.failure, 0) + 1
        est = np.array([r.psi_mrr for r in ok])
        bias = float(est.mean() - truth) if ok else float("nan")
        if len(ok) >= 2:
            mc_se = float(est.std(ddof=1))
        else:
            mc_se = float("nan")
            flags.append("single_rep" if len(ok) == 1 else "no_successes")
        with_ci = [r for r in ok if math.isfinite(r.ci_lower) and math.isfinite(r.ci_upper)]
        if with_ci:
            coverage = float(np.mean([r.ci_lower <= truth <= r.ci_upper for r in with_ci]))
        else:
            coverage = float("nan")
        if fails > 0.01 * len(recs):
            flags.append("failures_gt_1pct")
        rows.append(SummaryRow(e, s, n, bias, mc_se, coverage, fails, len(ok), ";".join(flags)))
    return McSummary(truth, tuple(rows), reasons)


def run_study(config: StudyConfig) -> McSummary:
    """Resolve the truth, run every replicate and summarise.

    Raises
    ------
    TruthResolutionFailed
        The truth could not be computed or is not a positive number.
    """
    truth = resolve_truth(config)
    return summarize(run_records(config), truth)


# ---------------------------------------------------------------------------
# convergence


@dataclass(frozen=True)
class ConvergenceRow:
    estimator: str
    scenario: str
    n: int
    rmse: float
    mean_error: float
    mean_abs_error: float
    reps: int


@dataclass(frozen=True)
class ConvergenceResult:
    rows: tuple
    slopes: dict
    flags: dict

    def slope(self, estimator: str, scenario: str = "flexible") -> float:
        return self.slopes[(estimator, scenario)]

    def row(self, estimator: str, n: int, scenario: str = "flexible") -> ConvergenceRow:
        for r in self.rows:
            if (r.estimator, r.scenario, r.n) == (estimator, scenario, n):
                return r
        raise KeyError((estimator, scenario, n))


def convergence_from_records(records: Iterable[RepRecord], truth: float) -> ConvergenceResult:
    """RMSE table and least-squares slope of ``ln RMSE`` on ``ln n`` per estimator.

    A slope is reported as NaN, with flag ``"undefined"``, when any RMSE is
    zero or fewer than two sample sizes are present.
    """
    groups: dict = {}
    for r in records:
        if r.ok:
            groups.setdefault((r.estimator, r.scenario), {}).setdefault(r.n, []).append(r.psi_mrr)
    rows, slopes, flags = [], {}, {}
    for key, by_n in groups.items():
        ns, rmses = [], []
        for n in sorted(by_n):
            err = np.array(by_n[n]) - truth
            rmse = float(np.sqrt(np.mean(err**2)))
            rows.append(ConvergenceRow(key[0], key[1], n, rmse, float(err.mean()), float(np.abs(err).mean()), len(err)))
            ns.append(n)
            rmses.append(rmse)
        if len(ns) >= 2 and min(rmses) > 0:
            slopes[key] = float(np.polyfit(np.log(ns), np.log(rmses), 1)[0])
            flags[key] = ""
        else:
            slopes[key] = float("nan")
            flags[key] = "undefined"
    return ConvergenceResult(tuple(rows), slopes, flags)


def convergence_experiment(config: StudyConfig) -> ConvergenceResult:
    """Run the study over ``config.n_list`` (at least 4 sizes) and fit rate slopes."""
    if len(config.n_list) < 4:
        raise ConfigError("convergence experiment needs at least 4 sample sizes")
    truth = resolve_truth(config)
    return convergence_from_records(run_records(config), truth)


# ---------------------------------------------------------------------------
# persistence


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def records_to_csv(records: Sequence[RepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REP_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, f)) for f in REP_FIELDS])
    return buf.getvalue()


def records_from_csv(text: str) -> list:
    rd = csv.DictReader(io.StringIO(text))
    if rd.fieldnames != REP_FIELDS:
        raise ConfigError(f"per-rep file must have header {','.join(REP_FIELDS)}")
    return [
        RepRecord(
            int(row["rep"]), int(row["n"]), row["scenario"], row["estimator"],
            float(row["psi_mrr"]), float(row["se_log"]), float(row["ci_lower"]), float(row["ci_upper"]),
            row["failure"],
        )
        for row in rd
    ]


def summary_to_csv(summary: McSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in summary.rows:
        w.writerow([_fmt(getattr(r, f)) for f in SUMMARY_FIELDS])
    return buf.getvalue()


def format_summary_table(summary: McSummary) -> str:
    """Plain-text table: one block per scenario, estimators by sample size."""
    lines = [f"truth psi_mRR = {summary.truth:.4f}"]
    scen = list(dict.fromkeys(r.scenario for r in summary.rows))
    for s in scen:
        lines.append(f"scenario {s}")
        lines.append(f"{'n':>6} {'estimator':>9} {'bias':>8} {'MC SE':>8} {'%cov':>6} {'fail':>5}")
        for r in sorted((r for r in summary.rows if r.scenario == s), key=lambda r: (r.n, ESTIMATORS.index(r.estimator))):
            cov = "" if math.isnan(r.coverage) else f"{100 * r.coverage:.0f}"
            se = "" if math.isnan(r.mc_se) else f"{r.mc_se:.3f}"
            lines.append(f"{r.n:>6} {r.estimator:>9} {r.mean_bias:>8.3f} {se:>8} {cov:>6} {r.failures:>5}" + (f"  [{r.flags}]" if r.flags else ""))
    return "\n".join(lines) + "\n"


def default_threads() -> int:
    env = os.environ.get("TNDKIT_THREADS")
    return int(env) if env else 1
