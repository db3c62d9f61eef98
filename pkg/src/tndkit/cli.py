"""``tndkit`` command-line interface.

Commands: ``simulate``, ``truth``, ``estimate``, ``mc-study``, ``oracle-check``.
Every run is driven by one JSON document (``--config``), either a path or one
of the preset names. Exit codes: 0 success, 1 a check failed, 2 configuration
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import dgp as dgp_mod
from .core import TndDataset, no_split, split_folds, validate_dataset
from .errors import ConfigError, DataError, SchemaError, TndError
from .estimators import ESTIMATORS, oracle_checks, outreg_mrr, run_estimator
from .harness import (
    StudyConfig,
    convergence_experiment,
    format_summary_table,
    records_to_csv,
    resolve_truth,
    run_records,
    summarize,
    summary_to_csv,
)
from .nuisance import IDENTITY, LearnerSpec, estimate_nuisances, feature_map

TOP_KEYS = {
    "preset", "dgp", "seed", "n", "n_pop", "full_population", "estimators", "learner",
    "j_folds", "alpha", "outreg_bootstrap", "study", "discrete", "schema",
}
DGP_KEYS = {"beta_em", "equations", "gate_symptoms", "gate_hospitalization", "c_low", "c_high", "max_population"}
LEARNER_KEYS = {"kind", "ps_map", "outcome_map", "eps", "ridge", "tol", "max_iter", "n_knots", "cv_folds", "n_lambda", "lambda_ratio"}
STUDY_KEYS = {"n_list", "reps", "scenarios", "truth", "truth_n_pop", "convergence"}
DISCRETE_KEYS = {"support", "probs", "variant"}

# study defaults attached to each preset
PRESET_STUDY = {
    "study1-b025": dict(n_list=[500, 1000, 2000], reps=1000, scenarios=["flexible"], j_folds=2),
    "study1-b05": dict(n_list=[500, 1000, 2000], reps=1000, scenarios=["flexible"], j_folds=2),
    "study2": dict(n_list=[250, 500, 1000], reps=1000, scenarios=["a", "b", "c", "d"], j_folds=1),
    "appendix-II": dict(n_list=[250, 500, 1000], reps=1000, scenarios=["a"], j_folds=1),
    "appendix-III": dict(n_list=[250, 500, 1000], reps=1000, scenarios=["a"], j_folds=1),
}

QUEBEC_LEVELS = {
    "age_group": 4,
    "sex": 2,
    "multimorbidity": 2,
    "epi_week": 18,
}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")


def load_config(arg: Optional[str]) -> dict:
    """Parse ``--config``: a JSON file path or a preset name."""
    if arg is None:
        doc = {}
    elif os.path.exists(arg):
        try:
            doc = json.loads(Path(arg).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{arg}: invalid JSON ({exc})") from None
    elif arg in dgp_mod.PRESETS:
        doc = {"preset": arg}
    else:
        raise ConfigError(f"--config {arg!r} is neither a file nor a preset ({', '.join(dgp_mod.PRESETS)})")
    _check_keys(doc, TOP_KEYS, "config")
    for key, allowed in (("dgp", DGP_KEYS), ("learner", LEARNER_KEYS), ("study", STUDY_KEYS), ("discrete", DISCRETE_KEYS)):
        if key in doc:
            _check_keys(doc[key], allowed, key)
    return doc


def _num(x, name, kind=float):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{name} must be a number")
    if kind is int and int(x) != x:
        raise ConfigError(f"{name} must be an integer")
    return kind(x)


def build_dgp(doc: dict, seed: int) -> dgp_mod.DgpConfig:
    base = dgp_mod.preset(doc["preset"], seed) if "preset" in doc else dgp_mod.DgpConfig(seed=seed)
    d = doc.get("dgp", {})
    kw = {}
    if "beta_em" in d:
        kw["beta_em"] = _num(d["beta_em"], "dgp.beta_em")
    if "equations" in d:
        _check_keys(d["equations"], set(dgp_mod.EQUATIONS), "dgp.equations")
        over = dict(base.overrides)
        for k, v in d["equations"].items():
            over[k] = dgp_mod.LinearPredictor.from_dict(v)
        kw["overrides"] = over
    for flag in ("gate_symptoms", "gate_hospitalization"):
        if flag in d:
            if not isinstance(d[flag], bool):
                raise ConfigError(f"dgp.{flag} must be true/false")
            kw[flag] = d[flag]
    for k in ("c_low", "c_high"):
        if k in d:
            kw[k] = _num(d[k], f"dgp.{k}")
    if "max_population" in d:
        kw["max_population"] = _num(d["max_population"], "dgp.max_population", int)
    return dataclasses.replace(base, **kw)


def build_learner(doc: dict, default_kind: str = "logistic_glm") -> LearnerSpec:
    d = doc.get("learner", {})
    kw = {"kind": d.get("kind", default_kind)}
    ident = kw["kind"] == "l1_basis" or "preset" not in doc
    kw["ps_map"] = feature_map(d["ps_map"]) if "ps_map" in d else (IDENTITY if ident else feature_map("ps_correct"))
    kw["outcome_map"] = feature_map(d["outcome_map"]) if "outcome_map" in d else (IDENTITY if ident else feature_map("out_correct"))
    for k in ("eps", "ridge", "tol", "lambda_ratio"):
        if k in d:
            kw[k] = _num(d[k], f"learner.{k}")
    for k in ("max_iter", "n_knots", "cv_folds", "n_lambda"):
        if k in d:
            kw[k] = _num(d[k], f"learner.{k}", int)
    return LearnerSpec(**kw)


def build_study(doc: dict, seed: int, threads: int) -> tuple:
    name = doc.get("preset")
    base = dict(PRESET_STUDY.get(name, dict(n_list=[1000], reps=100, scenarios=["a"], j_folds=1)))
    s = doc.get("study", {})
    for k in ("n_list", "reps", "scenarios"):
        if k in s:
            base[k] = s[k]
    if "j_folds" in doc:
        base["j_folds"] = _num(doc["j_folds"], "j_folds", int)
    truth = s.get("truth", "auto")
    if not (truth == "auto" or (isinstance(truth, (int, float)) and not isinstance(truth, bool))):
        raise ConfigError("study.truth must be a number or \"auto\"")
    if not isinstance(base["n_list"], list) or not base["n_list"]:
        raise ConfigError("study.n_list must be a non-empty list")
    flexible = "flexible" in base["scenarios"]
    learner = build_learner(doc, "l1_basis" if flexible else "logistic_glm")
    cfg = StudyConfig(
        dgp=build_dgp(doc, seed),
        n_list=[_num(n, "study.n_list", int) for n in base["n_list"]],
        reps=_num(base["reps"], "study.reps", int),
        estimators=doc.get("estimators", list(ESTIMATORS)),
        scenarios=base["scenarios"],
        learner=learner,
        j_folds=base["j_folds"],
        alpha=_num(doc.get("alpha", 0.05), "alpha"),
        seed=seed,
        truth=truth,
        truth_n_pop=_num(s.get("truth_n_pop", 10_000_000), "study.truth_n_pop", int),
        outreg_bootstrap=_num(doc.get("outreg_bootstrap", 0), "outreg_bootstrap", int),
        threads=threads,
    )
    return cfg, bool(s.get("convergence", False))


# ---------------------------------------------------------------------------
# CSV helpers


def fmt_float(x) -> str:
    return repr(float(x))


def write_text(path: Optional[str], text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="")


def dataset_to_csv(data: TndDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(data.feature_names) + ["v", "y"])
    for k in range(data.n):
        w.writerow([fmt_float(x) for x in data.covariates[k]] + [int(data.v[k]), int(data.y[k])])
    return buf.getvalue()


POP_COLUMNS = ("c", "v", "y", "u1", "u2", "i1", "i2", "w", "h", "s")


def population_to_csv(pop) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POP_COLUMNS)
    cols = pop.columns()
    for k in range(len(pop)):
        w.writerow([fmt_float(cols["c"][k])] + [int(cols[f][k]) for f in POP_COLUMNS[1:]])
    return buf.getvalue()


def _is_number(s: str) -> bool:
    try:
        return math.isfinite(float(s))
    except ValueError:
        return False


def read_dataset_csv(text: str, schema: str = "generic") -> TndDataset:
    """Parse a ``v``/``y`` + covariates CSV; categorical columns are one-hot encoded.

    A column is categorical when any of its cells is not a finite number.
    Each categorical column contributes one indicator per level except the
    first in sorted order.

    Raises
    ------
    SchemaError
        Missing ``v``/``y`` column, no covariates, ragged rows or invalid 0/1
        values (the message names the row and column).
    """
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError("empty file: header row is mandatory")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    for col in ("v", "y"):
        if col not in header:
            raise SchemaError(f"missing required column {col!r}")
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names")
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SchemaError(f"row {i}: expected {len(header)} fields, found {len(r)}")
    cov_cols = [h for h in header if h not in ("v", "y")]
    if schema == "quebec":
        missing = [c for c in QUEBEC_LEVELS if c not in header]
        if missing:
            raise SchemaError(f"missing required column {missing[0]!r} for the quebec schema")
        cov_cols = list(QUEBEC_LEVELS)
    elif schema != "generic":
        raise ConfigError(f"unknown schema {schema!r}")
    if not cov_cols:
        raise SchemaError("at least one covariate column is required")
    idx = {h: j for j, h in enumerate(header)}

    def binary(col):
        out = np.empty(len(body), dtype=np.int8)
        for i, r in enumerate(body):
            val = r[idx[col]].strip()
            if val not in ("0", "1"):
                raise SchemaError(f"row {i + 2}, column {col!r}: value {val!r} not in {{0, 1}}")
            out[i] = int(val)
        return out

    v, y = binary("v"), binary("y")
    feats, names = [], []
    for col in cov_cols:
        vals = [r[idx[col]].strip() for r in body]
        categorical = schema == "quebec" or not all(_is_number(x) for x in vals)
        if not categorical:
            feats.append(np.array([float(x) for x in vals]))
            names.append(col)
            continue
        for i, x in enumerate(vals):
            if x == "":
                raise SchemaError(f"row {i + 2}, column {col!r}: empty value")
        levels = sorted(set(vals), key=lambda s: (not _is_number(s), float(s) if _is_number(s) else 0.0, s))
        if schema == "quebec" and len(levels) > QUEBEC_LEVELS[col]:
            raise SchemaError(f"column {col!r}: {len(levels)} levels, expected at most {QUEBEC_LEVELS[col]}")
        for lv in levels[1:]:
            feats.append(np.array([1.0 if x == lv else 0.0 for x in vals]))
            names.append(f"{col}={lv}")
    X = np.column_stack(feats) if feats else np.zeros((len(body), 0))
    return validate_dataset(TndDataset(X, v, y, tuple(names)))


def read_population_csv(text: str) -> dict:
    rd = csv.DictReader(io.StringIO(text))
    missing = [c for c in POP_COLUMNS if c not in (rd.fieldnames or [])]
    if missing:
        raise SchemaError(f"missing required column {missing[0]!r}")
    cols = {c: [] for c in POP_COLUMNS}
    for row in rd:
        for c in POP_COLUMNS:
            cols[c].append(float(row[c]) if c == "c" else int(row[c]))
    return {c: np.array(v) for c, v in cols.items()}


def gating_violations(cols: dict) -> dict:
    """Counts of rows breaking each structural implication of a full-population file."""
    i_any = (cols["i1"] == 1) | (cols["i2"] == 1)
    return {
        "w_without_infection": int(np.sum((cols["w"] == 1) & ~i_any)),
        "h_without_symptoms": int(np.sum((cols["h"] == 1) & (cols["w"] == 0))),
        "s_mismatch": int(np.sum(cols["s"] != (i_any & (cols["w"] == 1) & (cols["h"] == 1)))),
        "y_mismatch": int(np.sum(cols["y"] != ((cols["i2"] == 1) & (cols["w"] == 1) & (cols["h"] == 1)))),
    }


# ---------------------------------------------------------------------------
# commands


def _kv(pairs) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs)


def cmd_simulate(args, doc, seed) -> int:
    cfg = build_dgp(doc, seed)
    n = args.n if args.n is not None else _num(doc.get("n", 1000), "n", int)
    if n < 1:
        raise ConfigError("n must be at least 1")
    full = args.full_population or bool(doc.get("full_population", False))
    if full:
        text = population_to_csv(dgp_mod.generate_population(cfg, n, threads=args.threads))
    else:
        text = dataset_to_csv(dgp_mod.simulate_tnd(cfg, n, threads=args.threads))
    write_text(args.out, text)
    return 0


def cmd_truth(args, doc, seed) -> int:
    cfg = build_dgp(doc, seed)
    n_pop = args.n_pop if args.n_pop is not None else _num(doc.get("n_pop", 10_000_000), "n_pop", int)
    res = dgp_mod.truth_mrr_monte_carlo(cfg, n_pop, threads=args.threads)
    pairs = [
        ("psi_mrr", fmt_float(res.psi_mrr)),
        ("mc_se", fmt_float(res.mc_se)),
        ("risk_v1", fmt_float(res.risk_v1)),
        ("risk_v0", fmt_float(res.risk_v0)),
        ("ve", fmt_float(1 - res.psi_mrr)),
        ("n_pop", res.n_pop),
    ]
    if args.quadrature:
        q = dgp_mod.truth_mrr_quadrature(cfg)
        pairs += [("psi_mrr_quadrature", fmt_float(q.psi_mrr)), ("q0", fmt_float(q.q0)), ("case_fraction", fmt_float(q.case_fraction)),
                  ("psi_mrr_tnd_functional", fmt_float(q.psi_mrr_tnd))]
    write_text(args.out, _kv(pairs))
    return 0


def cmd_estimate(args, doc, seed) -> int:
    try:
        text = Path(args.data).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {args.data}: {exc.strerror}") from None
    schema = args.schema or doc.get("schema", "generic")
    data = read_dataset_csv(text, schema)
    learner = build_learner(doc)
    j = _num(doc.get("j_folds", 2), "j_folds", int)
    alpha = _num(doc.get("alpha", 0.05), "alpha")
    names = doc.get("estimators", list(ESTIMATORS))
    bad = set(names) - set(ESTIMATORS)
    if bad:
        raise ConfigError(f"unknown estimators {sorted(bad)}")
    folds = no_split(data.n) if j == 1 else split_folds(data.n, j, seed)
    nuis = estimate_nuisances(data, learner, folds, seed=seed)
    boot = _num(doc.get("outreg_bootstrap", 0), "outreg_bootstrap", int)
    results = []
    for e in names:
        if e == "outreg":
            results.append(outreg_mrr(data, nuis, alpha, bootstrap=boot, learner=learner, j_folds=j, seed=seed))
        else:
            results.append(run_estimator(e, data, nuis, alpha))
    counts = data.counts()
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "psi_mrr", "ve", "se_log", "ci_lower", "ci_upper", "alpha", "n", "cases", "controls"])
        for r in results:
            w.writerow([r.method] + [fmt_float(x) for x in (r.psi_mrr, r.ve, r.se_log_mrr, r.ci_mrr[0], r.ci_mrr[1], r.alpha)]
                       + [counts["n"], counts["cases"], counts["controls"]])
        write_text(args.out, buf.getvalue())
    else:
        lines = [f"n={counts['n']} cases={counts['cases']} controls={counts['controls']} learner={learner.kind} J={j}"]
        lines.append(f"{'estimator':>9} {'psi_mRR':>8} {'VE':>8} {'CI lower':>9} {'CI upper':>9}")
        for r in results:
            lo = "" if math.isnan(r.ci_mrr[0]) else f"{r.ci_mrr[0]:.4f}"
            hi = "" if math.isnan(r.ci_mrr[1]) else f"{r.ci_mrr[1]:.4f}"
            lines.append(f"{r.method:>9} {r.psi_mrr:>8.4f} {r.ve:>8.4f} {lo:>9} {hi:>9}")
        write_text(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_mc_study(args, doc, seed) -> int:
    cfg, convergence = build_study(doc, seed, args.threads)
    out = Path(args.out or "mc_out")
    out.mkdir(parents=True, exist_ok=True)
    truth = resolve_truth(cfg)
    records = run_records(cfg)
    summary = summarize(records, truth)
    (out / "reps.csv").write_text(records_to_csv(records), encoding="utf-8", newline="")
    (out / "summary.csv").write_text(summary_to_csv(summary), encoding="utf-8", newline="")
    table = format_summary_table(summary)
    if convergence:
        from .harness import convergence_from_records

        conv = convergence_from_records(records, truth)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "scenario", "n", "rmse", "mean_error", "mean_abs_error", "reps"])
        for r in conv.rows:
            w.writerow([r.estimator, r.scenario, r.n, fmt_float(r.rmse), fmt_float(r.mean_error), fmt_float(r.mean_abs_error), r.reps])
        w.writerow([])
        w.writerow(["estimator", "scenario", "slope", "flag"])
        for (e, s), sl in conv.slopes.items():
            w.writerow([e, s, fmt_float(sl), conv.flags[(e, s)]])
        (out / "convergence.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
        table += "".join(f"slope {e}/{s}: {sl:.3f}\n" for (e, s), sl in conv.slopes.items())
    (out / "table.txt").write_text(table, encoding="utf-8", newline="")
    sys.stdout.write(summary_to_csv(summary) if args.format == "csv" else table)
    return 0


def build_discrete(doc: dict, seed: int) -> dgp_mod.DiscreteDgp:
    d = doc.get("discrete", {})
    kw = {}
    if "support" in d:
        kw["support"] = tuple(_num(x, "discrete.support") for x in d["support"])
    if "probs" in d:
        kw["probs"] = tuple(_num(x, "discrete.probs") for x in d["probs"])
    variant = d.get("variant", "default")
    if variant == "vaccine_independent":
        return dgp_mod.DiscreteDgp.vaccine_independent(**kw)
    if variant == "control_exchangeable":
        return dgp_mod.DiscreteDgp.control_exchangeable(**kw)
    if variant != "default":
        raise ConfigError(f"unknown discrete variant {variant!r}")
    cfg = build_dgp(doc, seed) if ("dgp" in doc or "preset" in doc) else dgp_mod.DgpConfig(seed=seed)
    return dgp_mod.DiscreteDgp(config=cfg, **kw)


def cmd_oracle_check(args, doc, seed) -> int:
    lines = []
    failed = False
    if args.file:
        try:
            cols = read_population_csv(Path(args.file).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read {args.file}: {exc.strerror}") from None
        for name, count in gating_violations(cols).items():
            ok = count == 0
            failed |= not ok
            lines.append(f"{'PASS' if ok else 'FAIL'} gating_{name}: violations={count}")
    else:
        tables = dgp_mod.enumerate_discrete(build_discrete(doc, seed))
        for r in oracle_checks(tables, swap_pi0_arms=args.swap_pi0_arms):
            failed |= not r.passed
            lines.append(r.line())
        dev = float(np.max(np.abs(tables.omega_outcome - 1.0)))
        lines.append(f"INFO max_abs_weight_minus_one={dev:.6g}")
        lines.append(f"INFO weights_identically_one={'yes' if dev <= 1e-12 else 'no'}")
        lines.append(f"INFO psi_mrr_tnd={tables.mrr_tnd!r} psi_mrr_population={tables.mrr_pop!r}")
    write_text(args.out, "\n".join(lines) + "\n")
    return 1 if failed else 0


COMMANDS = {
    "simulate": cmd_simulate,
    "truth": cmd_truth,
    "estimate": cmd_estimate,
    "mc-study": cmd_mc_study,
    "oracle-check": cmd_oracle_check,
}


def _u64(s: str) -> int:
    try:
        x = int(s, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {s!r}") from None
    if not 0 <= x < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return x


def _positive(s: str) -> int:
    try:
        x = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid count {s!r}") from None
    if x < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return x


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config path or preset name")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file (directory for mc-study)")
    common.add_argument("--threads", type=_positive, default=argparse.SUPPRESS)
    common.add_argument("--format", choices=("csv", "table"), default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="tndkit", description="Test-negative design vaccine-effectiveness toolkit", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="simulate a TND dataset")
    s.add_argument("--n", type=_positive)
    s.add_argument("--full-population", action="store_true", help="emit population rows with every latent column")
    t = sub.add_parser("truth", parents=[common], help="Monte Carlo truth of the marginal risk ratio")
    t.add_argument("--n-pop", type=_positive)
    t.add_argument("--quadrature", action="store_true", help="also print the deterministic quadrature value")
    e = sub.add_parser("estimate", parents=[common], help="estimate VE from a CSV")
    e.add_argument("data")
    e.add_argument("--schema", choices=("generic", "quebec"))
    sub.add_parser("mc-study", parents=[common], help="Monte Carlo replication study")
    o = sub.add_parser("oracle-check", parents=[common], help="exact identity checks on a discrete DGP")
    o.add_argument("--file", help="full-population CSV whose gating invariants are checked")
    o.add_argument("--swap-pi0-arms", action="store_true", help="inject a fault for testing the checks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for k, default in (("config", None), ("seed", None), ("out", None), ("threads", None), ("format", "table")):
        if not hasattr(args, k):
            setattr(args, k, default)
    if args.threads is None:
        env = os.environ.get("TNDKIT_THREADS")
        try:
            args.threads = int(env) if env else 1
        except ValueError:
            print(f"error: TNDKIT_THREADS={env!r} is not an integer", file=sys.stderr)
            return ConfigError.exit_code
    try:
        doc = load_config(args.config)
        seed = args.seed if args.seed is not None else _num(doc.get("seed", 0), "seed", int)
        return COMMANDS[args.command](args, doc, seed)
    except TndError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
