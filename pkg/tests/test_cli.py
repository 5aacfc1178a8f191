import pytest

from odeunlearn.cli import ConfigError, main, parse_config


def test_empty_file_gives_defaults(tmp_path):
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("# nothing here\n\n")
    r = parse_config(cfg)
    u = r.unlearn
    assert (u.solver, u.steps, u.step_size) == ("euler", 4, 0.4)
    assert (u.lambda_u, u.lambda_tc, u.lambda_r) == (1.0, 1.0, 1.0)
    assert u.d / u.a_max == 2.0
    assert r.world.k == 8


def test_precedence(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("solver = euler  # file value\nepochs=7\nseed = 4\n")
    r = parse_config(cfg, ["solver=rk4"])
    assert r.unlearn.solver == "rk4" and r.unlearn.epochs == 7 and r.unlearn.seed == 4
    assert parse_config(cfg, [], seed=9).unlearn.seed == 9
    assert parse_config(cfg, ["seed=1"], seed=9).unlearn.seed == 1


@pytest.mark.parametrize(
    "text,needle",
    [("steps=0", "steps"), ("nonsense=1", "nonsense"), ("epochs=ten", "line 1"), ("solver", "key=value"), ("forget_id=99", "forget_id")],
)
def test_config_errors_name_the_problem(tmp_path, text, needle):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text + "\n")
    with pytest.raises(ConfigError, match=needle):
        parse_config(cfg)


def test_exit_code_two_on_bad_config(tmp_path, capsys):
    assert main(["unlearn", "--out", str(tmp_path), "--set", "steps=0"]) == 2
    assert "steps" in capsys.readouterr().err
    assert main(["unlearn", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    assert main(["nope"]) == 2


def test_unlearn_outputs_and_reproducibility(tmp_path):
    args = ["unlearn", "--seed", "2", "--set", "epochs=25"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("resolved.cfg", "loss_history.csv", "metrics.csv", "adapter_0.params", "adapter_1.params"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "solver = euler" in (tmp_path / "a" / "resolved.cfg").read_text()
    assert len((tmp_path / "a" / "loss_history.csv").read_text().splitlines()) == 26


def test_discrete_checkpoint(tmp_path):
    assert main(["unlearn", "--out", str(tmp_path), "--set", "epochs=3", "--set", "adapter=discrete"]) == 0
    assert (tmp_path / "adapter_0.params").read_text().startswith("lowrank 16 4")


def test_sweep_and_report(tmp_path):
    out = str(tmp_path)
    assert main(["sweep", "--out", out, "--set", "epochs=3", "--set", "n_seeds=2", "--set", "sweep=solver"]) == 0
    assert (tmp_path / "solver_sweep.csv").exists() and (tmp_path / "solver_sweep.summary.txt").exists()
    assert main(["report", "--out", out]) == 0
    assert "[solver_sweep]" in (tmp_path / "report.txt").read_text()


def test_gradcheck_passes(tmp_path):
    assert main(["gradcheck", "--seed", "1", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert rows[0] == "check,method,instance,rel_err"
    fd = [float(r.split(",")[3]) for r in rows[1:] if not r.startswith("adjoint")]
    assert len(fd) == 53 and max(fd) < 1e-4


def test_theorems_pass(tmp_path):
    assert main(["theorems", "--out", str(tmp_path), "--set", "epochs=200"]) == 0
    text = (tmp_path / "theorems.summary.txt").read_text()
    assert text.count("PASS") == 4 and "FAIL" not in text
