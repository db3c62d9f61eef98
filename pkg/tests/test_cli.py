import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from tndkit.cli import (
    dataset_to_csv,
    main,
    population_to_csv,
    read_dataset_csv,
    read_population_csv,
)
from tndkit.dgp import DiscreteDgp, enumerate_discrete, generate_population, preset, sample_discrete, simulate_tnd
from tndkit.errors import SchemaError


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


def test_simulate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["simulate", "--n", 100, "--seed", 1, "--out", a])[0] == 0
    assert run(["--seed", 1, "simulate", "--n", 100, "--out", b, "--threads", 3])[0] == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "c,v,y" and len(lines) == 101


def test_full_population_passes_gating_check(tmp_path, capsys):
    f = tmp_path / "pop.csv"
    assert run(["simulate", "--n", 20000, "--full-population", "--config", "study1-b05", "--out", f])[0] == 0
    header = f.read_text().splitlines()[0]
    assert header.startswith("c,v,y,u1,u2,i1,i2,w,h")
    code, out = run(["oracle-check", "--file", f], capsys)
    assert code == 0
    assert "FAIL" not in out.out and out.out.count("PASS") >= 3


def test_gating_check_catches_tampering(tmp_path, capsys):
    pop = generate_population(preset("study2", seed=2), 2000)
    text = population_to_csv(pop).splitlines()
    rows = list(csv.reader(text))
    k = next(i for i, r in enumerate(rows[1:], 1) if r[7] == "0")  # w == 0
    rows[k][8] = "1"  # hospitalised without symptoms
    f = tmp_path / "bad.csv"
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    f.write_text(buf.getvalue())
    code, out = run(["oracle-check", "--file", f], capsys)
    assert code == 1 and "FAIL" in out.out


def parse_estimate_csv(text):
    return {r["estimator"]: r for r in csv.DictReader(io.StringIO(text))}


def test_estimate_report_is_consistent(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text(dataset_to_csv(simulate_tnd(preset("study2", seed=3), 2000)))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learner": {"kind": "logistic_glm"}, "j_folds": 1}))
    code, out = run(["estimate", data, "--config", cfg, "--format", "csv"], capsys)
    assert code == 0
    rows = parse_estimate_csv(out.out)
    assert set(rows) == {"ipw", "outreg", "tnddr"}
    t = rows["tnddr"]
    psi, ve = float(t["psi_mrr"]), float(t["ve"])
    assert abs(ve - (1 - psi)) < 1e-12
    assert float(t["ci_lower"]) < psi < float(t["ci_upper"])
    assert int(t["n"]) == 2000 and int(t["cases"]) + int(t["controls"]) == 2000
    code, out2 = run(["estimate", data, "--config", cfg, "--format", "csv"], capsys)
    assert out2.out == out.out
    code, table = run(["estimate", data, "--config", cfg], capsys)
    assert "tnddr" in table.out and "n=2000" in table.out


def test_estimate_on_enumerated_discrete_file(tmp_path, capsys):
    t = enumerate_discrete(DiscreteDgp())
    ds = sample_discrete(t, 20_000, seed=4)
    # string labels make the atom categorical, so one-hot features are saturated
    lines = ["c,v,y"] + [f"atom{int(c) + 1},{v},{y}" for c, v, y in zip(ds.covariates[:, 0], ds.v, ds.y)]
    data = tmp_path / "disc.csv"
    data.write_text("\n".join(lines) + "\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"j_folds": 1, "estimators": ["tnddr"]}))
    code, out = run(["estimate", data, "--config", cfg, "--format", "csv"], capsys)
    assert code == 0
    r = parse_estimate_csv(out.out)["tnddr"]
    assert abs(math.log(float(r["psi_mrr"])) - math.log(t.mrr_tnd)) < 2 * float(r["se_log"])


def test_missing_column_is_a_data_error(tmp_path, capsys):
    f = tmp_path / "x.csv"
    f.write_text("c,v\n0.1,1\n0.2,0\n")
    code, out = run(["estimate", f], capsys)
    assert code == 3
    assert "'y'" in out.err
    code, out = run(["estimate", tmp_path / "nope.csv"], capsys)
    assert code == 3


def test_unknown_config_key_is_a_config_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dgp": {"beta": 1}}))
    code, out = run(["simulate", "--config", cfg], capsys)
    assert code == 2 and "beta" in out.err
    code, _ = run(["simulate", "--config", "no-such-preset"], capsys)
    assert code == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dgp": {"equations": {"lambda_covid": {"base": {"intercept": -200}}}}}))
    code, out = run(["truth", "--config", cfg, "--n-pop", 100000], capsys)
    assert code == 4 and "DegenerateTruth" in out.err


def test_oracle_check_passes_and_detects_fault(capsys):
    code, out = run(["oracle-check"], capsys)
    assert code == 0 and "FAIL" not in out.out
    code, out = run(["oracle-check", "--swap-pi0-arms"], capsys)
    assert code == 1
    assert any(l.startswith("FAIL eif_mean_zero") for l in out.out.splitlines())


def test_oracle_check_reports_unit_weights(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"discrete": {"variant": "vaccine_independent"}}))
    code, out = run(["oracle-check", "--config", cfg], capsys)
    assert code == 0 and "weights_identically_one=yes" in out.out


def test_truth_output(capsys):
    code, out = run(["truth", "--config", "study2", "--n-pop", 200000, "--quadrature", "--seed", 5], capsys)
    assert code == 0
    kv = dict(line.split("=", 1) for line in out.out.split())
    assert abs(float(kv["psi_mrr"]) - float(kv["psi_mrr_quadrature"])) < 4 * float(kv["mc_se"])
    assert float(kv["ve"]) == pytest.approx(1 - float(kv["psi_mrr"]))


def test_mc_study_smoke(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "study2", "study": {"n_list": [300], "reps": 2, "truth": 0.2}}))
    outs = []
    for threads in (1, 2):
        d = tmp_path / f"o{threads}"
        code, _ = run(["mc-study", "--config", cfg, "--out", d, "--threads", threads, "--seed", 9], capsys)
        assert code == 0
        outs.append({f: (d / f).read_bytes() for f in ("reps.csv", "summary.csv", "table.txt")})
    assert outs[0] == outs[1]
    rows = list(csv.DictReader(io.StringIO(outs[0]["summary.csv"].decode())))
    assert len(rows) == 4 * 3
    assert {"estimator", "scenario", "n", "mean_bias", "mc_se", "coverage", "failures"} <= set(rows[0])
    for r in rows:
        if r["estimator"] != "outreg":
            assert float(r["coverage"]) in (0.0, 0.5, 1.0)


def test_mc_study_convergence_table(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "preset": "study2",
        "study": {"n_list": [200, 300, 400, 500], "reps": 2, "truth": 0.2, "scenarios": ["a"], "convergence": True},
    }))
    code, _ = run(["mc-study", "--config", cfg, "--out", tmp_path / "c"], capsys)
    assert code == 0
    text = (tmp_path / "c" / "convergence.csv").read_text()
    assert "slope" in text and text.count("tnddr") == 5


def test_dataset_csv_roundtrip():
    ds = simulate_tnd(preset("study1-b025", seed=6), 300)
    back = read_dataset_csv(dataset_to_csv(ds))
    assert np.array_equal(back.covariates, ds.covariates)
    assert np.array_equal(back.v, ds.v) and np.array_equal(back.y, ds.y)
    assert dataset_to_csv(back) == dataset_to_csv(ds)


def test_population_csv_roundtrip():
    pop = generate_population(preset("study2", seed=6), 500)
    cols = read_population_csv(population_to_csv(pop))
    assert np.array_equal(cols["c"], pop.c)
    assert np.array_equal(cols["h"], pop.h)


def test_categorical_and_schema_errors():
    ds = read_dataset_csv("c,region,v,y\n0.5,north,1,1\n0.1,south,0,0\n-1,north,0,1\n2,west,1,0\n")
    assert ds.feature_names == ("c", "region=south", "region=west")
    assert ds.covariates[:, 1].tolist() == [0, 1, 0, 0]
    with pytest.raises(SchemaError, match="row 3"):
        read_dataset_csv("c,v,y\n0.1,1,1\n0.2,2,0\n")
    with pytest.raises(SchemaError, match="row 2"):
        read_dataset_csv("c,v,y\n0.1,1\n")
    with pytest.raises(SchemaError, match="covariate"):
        read_dataset_csv("v,y\n1,1\n0,0\n")


def quebec_csv(n, seed):
    rng = np.random.default_rng(seed)
    lines = ["age_group,sex,multimorbidity,epi_week,v,y"]
    ages = ["60-69", "70-79", "80-89", "90+"]
    for _ in range(n):
        lines.append(
            f"{rng.choice(ages)},{rng.choice(['F', 'M'])},{rng.integers(0, 2)},{rng.integers(1, 19)},"
            f"{rng.integers(0, 2)},{rng.integers(0, 2)}"
        )
    return "\n".join(lines) + "\n"


def test_quebec_schema_ingestion(tmp_path, capsys):
    ds = read_dataset_csv(quebec_csv(3000, 1), schema="quebec")
    assert ds.covariates.shape == (3000, 3 + 1 + 1 + 17)
    assert "epi_week=18" in ds.feature_names and "epi_week=2" in ds.feature_names
    f = tmp_path / "q.csv"
    f.write_text(quebec_csv(3000, 2))
    code, out = run(["estimate", f, "--schema", "quebec", "--format", "csv"], capsys)
    assert code == 0
    psi = float(parse_estimate_csv(out.out)["tnddr"]["psi_mrr"])
    assert 0.5 < psi < 2  # vaccination is independent noise here
    with pytest.raises(SchemaError, match="sex"):
        read_dataset_csv("age_group,epi_week,multimorbidity,v,y\n1,1,0,1,1\n", schema="quebec")


def test_module_entry_point(tmp_path):
    f = tmp_path / "s.csv"
    res = subprocess.run([sys.executable, "-m", "tndkit.cli", "simulate", "--n", "5", "--out", str(f)], capture_output=True)
    assert res.returncode == 0
    assert len(f.read_text().splitlines()) == 6
    res = subprocess.run([sys.executable, "-m", "tndkit.cli", "simulate", "--seed", "-1"], capture_output=True)
    assert res.returncode == 2
