import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mixedr2.cli import build_parser, run


@pytest.fixture
def owl_csv(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "owl.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["calls", "siblings", "sex", "food", "time", "nest"])
        for j in range(12):
            u = rng.normal(0, 0.5)
            for _ in range(10):
                sib = int(rng.integers(1, 7))
                food = rng.choice(["Deprived", "Satiated"])
                t = round(float(rng.uniform(21, 29)), 2)
                mu = sib * np.exp(-0.5 + 0.4 * (food == "Deprived") + 0.05 * (t - 25) + u)
                w.writerow([rng.poisson(mu), sib, rng.choice(["F", "M"]), food, t, f"nest{j}"])
    return path


@pytest.fixture
def corn_csv(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "corn.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["yield", "nitro", "bv", "topo", "fld"])
        for j in range(10):
            u = rng.normal(0, 4)
            topo = ["E", "HT", "LO", "W"][j % 4]
            for _ in range(8):
                n, b = rng.uniform(0, 150), rng.normal()
                w.writerow([round(100 + 0.1 * n - 2 * b - b * b + u + rng.normal(0, 3), 4),
                            round(n, 3), round(b, 4), topo, j])
    return path


OWL = "calls ~ food + time + (1|nest) + offset(log(siblings))"


def test_distance_ratio(capsys):
    assert run(["distance", "--family", "poisson", "--y", "3", "--mu", "2", "--mu0", "1"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.25, abs=5e-4)


def test_distance_json(capsys):
    assert run(["distance", "--family", "gamma", "--y", "3", "--mu", "2", "--format", "json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["d_v"] > 1 and out["method"] == "closed-form"


def test_distance_domain_error(capsys):
    assert run(["distance", "--family", "binomial", "--y", "2", "--mu", "0.5"]) == 1
    assert "error" in capsys.readouterr().err


def test_fit_json(owl_csv, capsys):
    assert run(["fit", "--data", str(owl_csv), "--formula", OWL, "--family", "poisson"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["family"] == "poisson" and report["m"] == 12
    assert report["r2_m"] is not None and report["xu_omega2"] is None


def test_fit_byte_identical(owl_csv, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}.json"
        assert run(["fit", "--data", str(owl_csv), "--formula", OWL, "--family", "poisson",
                    "--benchmark", "-o", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_table_formats(corn_csv, tmp_path, capsys):
    models = tmp_path / "models.tsv"
    models.write_text("N\tyield ~ nitro + (1|fld)\nN,B\tyield ~ nitro + bv + (1|fld)\n"
                      "# comment\nyield ~ nitro + bv + bv^2 + (1|fld)\n")
    assert run(["table", "--data", str(corn_csv), "--models-file", str(models),
                "--categorical", "fld", "--benchmark"]) == 0
    md = capsys.readouterr().out
    assert "| N " in md and "yield ~ nitro + bv + bv^2" in md and "Xu" in md
    assert run(["table", "--data", str(corn_csv), "--formula", "yield ~ nitro + (1|fld)",
                "--formula", "yield ~ nitro + bv + (1|fld)", "--format", "json", "--reml"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["models"]) == 2


@pytest.mark.parametrize("argv", [
    [],
    ["fit"],
    ["fit", "--data", "x.csv"],
    ["distance", "--family", "weibull", "--y", "1", "--mu", "1"],
    ["simulate", "--study", "lmm", "--beta-grid", "0:2"],
    ["simulate", "--study", "lmm", "--threads", "0"],
    ["table", "--data", "x.csv", "--formula", "y ~ x + (1|g)", "--models-file", "m.txt"],
])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2


def test_bad_formula_is_usage_error(corn_csv, capsys):
    assert run(["fit", "--data", str(corn_csv), "--formula", "yield ~ nitro + (1|"]) == 2
    assert "position" in capsys.readouterr().err


def test_bad_nodes(owl_csv):
    assert run(["fit", "--data", str(owl_csv), "--formula", OWL, "--family", "poisson",
                "--agq-nodes", "4"]) == 2


def test_computation_error_leaves_no_file(corn_csv, tmp_path):
    out = tmp_path / "never.json"
    assert run(["fit", "--data", str(corn_csv), "--formula", "yield ~ nope + (1|fld)",
                "-o", str(out)]) == 1
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".tmp")] == []


def test_missing_data_file(tmp_path):
    assert run(["fit", "--data", str(tmp_path / "none.csv"), "--formula", "y ~ x + (1|g)"]) == 1


def test_simulate_csv(tmp_path):
    out = tmp_path / "sim.csv"
    argv = ["simulate", "--study", "lmm", "--reps", "5", "--beta-grid", "0:2:0.5", "--seed", "42",
            "--threads", "1", "-o", str(out)]
    assert run(argv) == 0
    rows = list(csv.DictReader(out.open()))
    per_measure = [r for r in rows if r["measure"] == "r2_m" and r["model"] == "x1"]
    assert [float(r["beta"]) for r in per_measure] == [0, 0.5, 1, 1.5, 2]
    first = out.read_bytes()
    assert run(argv) == 0
    assert out.read_bytes() == first


def test_residualize(corn_csv, tmp_path):
    out = tmp_path / "r.csv"
    assert run(["residualize", "--data", str(corn_csv), "--column", "bv", "--on", "topo",
                "-o", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert "bv_r" in rows[0]
    assert abs(sum(float(r["bv_r"]) for r in rows)) < 1e-9


def test_help_documents_flags():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mixedr2", "distance", "--family", "binomial",
                           "--y", "1", "--mu", "0.75", "--mu0", "0.5"],
                          capture_output=True, text=True, check=True)
    assert float(proc.stdout) == pytest.approx(0.2991, abs=5e-4)
