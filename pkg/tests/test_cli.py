import json

import numpy as np
import pytest

from bilevel_meta import make_quadratic_family
from bilevel_meta.cli import main

SCALAR_RUN = """
[family]
kind = "quadratic"
seed = 1
p = 1
q = 1
n_tasks = 1
mu = 2.0
l_g = 2.0

[optimizer]
T = 3
estimator = "exact"
lambda_theta = 0.1
theta0 = [4.0]
batch_size = 1
seed = 0
"""


def write(tmp_path, text, name="config.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_log(out_dir):
    lines = (out_dir / "run.jsonl").read_text().splitlines()
    return [json.loads(line) for line in lines]


def scalar_recursion_reference():
    """Replay the run's exact scalar recursion independently: theta steps by
    -0.1 * dF and the summary reports |dF| at the final theta."""
    fam = make_quadratic_family(seed=1, p=1, q=1, n_tasks=1, mu=2.0, l_g=2.0)
    task = fam.tasks[0]
    theta = np.array([4.0])
    per_iter = []
    for _ in range(3):
        grad = task.exact_hypergrad_term(theta)
        per_iter.append(abs(grad[0]))
        theta = theta - 0.1 * grad
    return per_iter, abs(task.exact_hypergrad_term(theta)[0])


def test_run_writes_records_and_summary(tmp_path):
    cfg = write(tmp_path, SCALAR_RUN)
    out = tmp_path / "out"
    assert main(["run", cfg, "--out", str(out)]) == 0
    rows = read_log(out)
    iters = [r for r in rows if r["record"] == "iter"]
    summaries = [r for r in rows if r["record"] == "summary"]
    assert len(iters) == 3 and len(summaries) == 1
    assert [r["t"] for r in iters] == [0, 1, 2]
    assert all(r["schema"] == 1 for r in rows)
    per_iter, final = scalar_recursion_reference()
    for rec, expected in zip(iters, per_iter):
        assert rec["grad_exact_norm"] == pytest.approx(expected, abs=1e-12)
    assert summaries[0]["T"] == 3
    assert summaries[0]["grad_exact_norm"] == pytest.approx(final, abs=1e-12)


def test_run_byte_identical_reruns(tmp_path):
    cfg = write(tmp_path, SCALAR_RUN)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", cfg, "--out", str(out)]) == 0
        outs.append((out / "run.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_run_rejects_unknown_key(tmp_path, capsys):
    bad = SCALAR_RUN.replace("lambda_theta = 0.1", "lamda_theta = 0.1")
    cfg = write(tmp_path, bad)
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "lamda_theta" in err


def test_run_rejects_malformed_toml(tmp_path, capsys):
    cfg = write(tmp_path, "[family\nkind = quadratic")
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 2
    assert "config" in capsys.readouterr().err


def test_run_missing_config(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2


def test_run_family_key_for_wrong_kind(tmp_path, capsys):
    cfg = write(tmp_path, SCALAR_RUN + "ridge = 1.0\n")
    # ridge belongs to the sinusoid family
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 2
    assert "ridge" in capsys.readouterr().err


def test_log_cadence(tmp_path):
    text = SCALAR_RUN.replace("T = 3", "T = 10") + "\n[output]\nlog_every = 4\n"
    cfg = write(tmp_path, text)
    out = tmp_path / "out"
    assert main(["run", cfg, "--out", str(out)]) == 0
    iters = [r["t"] for r in read_log(out) if r["record"] == "iter"]
    assert iters == [0, 4, 8, 9]  # cadence plus the final iteration


def test_env_seed_override(tmp_path, monkeypatch):
    text = """
[family]
kind = "quadratic"
seed = 1
p = 2
q = 3
n_tasks = 4

[optimizer]
T = 5
K = 2
N = 3
estimator = "implicit_cg"
lambda_theta = 0.05
batch_size = 4
seed = 0
"""
    cfg = write(tmp_path, text)
    out_a, out_b, out_c = (tmp_path / n for n in ("a", "b", "c"))
    assert main(["run", cfg, "--out", str(out_a)]) == 0
    monkeypatch.setenv("BILEVEL_BENCH_SEED", "123")
    assert main(["run", cfg, "--out", str(out_b)]) == 0
    monkeypatch.delenv("BILEVEL_BENCH_SEED")
    assert main(["run", cfg, "--out", str(out_c)]) == 0
    a = (out_a / "run.jsonl").read_bytes()
    b = (out_b / "run.jsonl").read_bytes()
    c = (out_c / "run.jsonl").read_bytes()
    assert a != b  # the env seed changed the run
    assert a == c  # removing it restores the config seed


def test_env_seed_must_be_integer(tmp_path, monkeypatch, capsys):
    cfg = write(tmp_path, SCALAR_RUN)
    monkeypatch.setenv("BILEVEL_BENCH_SEED", "not-a-number")
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 2
    assert "BILEVEL_BENCH_SEED" in capsys.readouterr().err


# --- gradcheck command ------------------------------------------------------

GRADCHECK_QUAD = """
[family]
kind = "quadratic"
seed = 2
p = 3
q = 8
n_tasks = 4

[optimizer]
seed = 7
"""

GRADCHECK_SIN = """
[family]
kind = "sinusoid"
seed = 2
q = 6
n_tasks = 4

[optimizer]
seed = 7
"""


def test_gradcheck_passes_quadratic(tmp_path, capsys):
    cfg = write(tmp_path, GRADCHECK_QUAD)
    out = tmp_path / "out"
    assert main(["gradcheck", cfg, "--out", str(out)]) == 0
    doc = json.loads((out / "gradcheck.json").read_text())
    assert doc["pass"] is True
    assert doc["threshold"] == 1e-7
    assert max(doc["worst"].values()) <= 1e-8


def test_gradcheck_passes_sinusoid(tmp_path):
    cfg = write(tmp_path, GRADCHECK_SIN)
    out = tmp_path / "out"
    assert main(["gradcheck", cfg, "--out", str(out)]) == 0
    doc = json.loads((out / "gradcheck.json").read_text())
    assert doc["pass"] is True
    assert doc["threshold"] == 1e-4
    assert max(doc["worst"].values()) <= 1e-5


def test_gradcheck_names_corrupted_oracle(tmp_path, capsys):
    corrupted = GRADCHECK_QUAD.replace(
        'kind = "quadratic"', 'kind = "quadratic"\nfault_bias_grad_g_phi = 1e-3')
    cfg = write(tmp_path, corrupted)
    out = tmp_path / "out"
    assert main(["gradcheck", cfg, "--out", str(out)]) == 3
    captured = capsys.readouterr()
    assert "grad_g_phi" in captured.err
    doc = json.loads((out / "gradcheck.json").read_text())
    assert doc["pass"] is False
    assert doc["worst"]["grad_g_phi"] > 1e-7


# --- sweep command -----------------------------------------------------------

SWEEP_BASE = """
[family]
kind = "quadratic"
seed = 3
p = 2
q = 6
n_tasks = 4

[optimizer]
T = 12
K = 5
N = 6
estimator = "implicit_cg"
lambda_theta = 0.05
batch_size = 1
seed = 5
"""


def read_rows(out_dir):
    lines = (out_dir / "sweep.csv").read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def test_sweep_memory_constant_across_k_for_implicit(tmp_path):
    cfg = write(tmp_path, SWEEP_BASE + "\n[sweep]\nK = [5, 10, 20]\n")
    out = tmp_path / "out"
    assert main(["sweep", cfg, "--out", str(out)]) == 0
    rows = read_rows(out)
    assert [r["K"] for r in rows] == ["5", "10", "20"]
    assert len({r["workspace_floats"] for r in rows}) == 1
    assert {r["trajectory_floats"] for r in rows} == {"0"}


def test_sweep_itd_trajectory_column(tmp_path):
    cfg = write(tmp_path, SWEEP_BASE +
                '\n[sweep]\nK = [5, 10, 20]\nestimator = ["itd"]\n')
    out = tmp_path / "out"
    assert main(["sweep", cfg, "--out", str(out)]) == 0
    rows = read_rows(out)
    q, b = 6, 1
    for row in rows:
        assert int(row["trajectory_floats"]) == (int(row["K"]) + 1) * q * b


def test_sweep_single_cell_reproduces_row(tmp_path):
    cfg_all = write(tmp_path, SWEEP_BASE + "\n[sweep]\nK = [5, 10]\n", "all.toml")
    cfg_one = write(tmp_path, SWEEP_BASE + "\n[sweep]\nK = [10]\n", "one.toml")
    out_all, out_one = tmp_path / "all", tmp_path / "one"
    assert main(["sweep", cfg_all, "--out", str(out_all)]) == 0
    assert main(["sweep", cfg_one, "--out", str(out_one)]) == 0
    lines_all = (out_all / "sweep.csv").read_text().splitlines()
    lines_one = (out_one / "sweep.csv").read_text().splitlines()
    assert lines_all[0] == lines_one[0]
    assert lines_all[2] == lines_one[1]  # the K=10 row is byte-identical


def test_sweep_noisy_batch_floor_decreases(tmp_path):
    text = """
[family]
kind = "quadratic"
seed = 7
p = 2
q = 3
n_tasks = 8

[optimizer]
T = 300
K = 3
N = 2
estimator = "implicit_cg"
lambda_theta = 0.1
lambda_phi = 0.5
mode = "stochastic"
warm_start = "task_id"
tol_cg = 0.0
sigma_f1 = 0.4
sigma_g1 = 0.4
seed = 11

[sweep]
batch_size = [2, 8]
repeats = 3
tail_fraction = 0.5
"""
    cfg = write(tmp_path, text)
    out = tmp_path / "out"
    assert main(["sweep", cfg, "--out", str(out)]) == 0
    rows = read_rows(out)
    tails = {int(r["batch_size"]): float(r["tail_mean_sq_grad"]) for r in rows}
    assert tails[8] < tails[2]


def test_sweep_requires_axes(tmp_path, capsys):
    cfg = write(tmp_path, SWEEP_BASE)
    assert main(["sweep", cfg, "--out", str(tmp_path / "out")]) == 2
    cfg2 = write(tmp_path, SWEEP_BASE + "\n[sweep]\nrepeats = 2\n", "c2.toml")
    assert main(["sweep", cfg2, "--out", str(tmp_path / "out")]) == 2
    cfg3 = write(tmp_path, SWEEP_BASE + "\n[sweep]\nK = []\n", "c3.toml")
    assert main(["sweep", cfg3, "--out", str(tmp_path / "out")]) == 2
    assert "empty" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_numerical_failure_exit_code(tmp_path, capsys):
    # weight defaults to 1.0, so a huge outer stepsize diverges
    text = SCALAR_RUN.replace("lambda_theta = 0.1", "lambda_theta = 50.0") \
        .replace("T = 3", "T = 5000")
    cfg = write(tmp_path, text)
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 3
    assert "divergence" in capsys.readouterr().err
