import numpy as np
import pytest

from ccbm import cli, synth

BASE = """\
[truth]
kind = ellipse

[solver]
n_angular = 40
n_radial = 4

[optim]
method = {method}
N = 5
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_and_seed(tmp_path):
    s = cli.load_config(write(tmp_path, BASE.format(method="conventional")), env={})
    assert s["data", "seed"] == 42
    assert s["optim", "mu"] == 0.1 and s["optim", "c_b"] == 0.7
    assert cli.load_config(write(tmp_path, BASE.format(method="admm-2")), env={"CCBM_SEED": "7"})["data", "seed"] == 7


@pytest.mark.parametrize(
    "extra,where",
    [
        ("[optim]\nmuu = 1\n", "optim.muu"),
        ("[plot]\nx = 1\n", "plot"),
        ("[data]\ndelta = abc\n", "data.delta"),
        ("[data]\nfine_factor = 1\n", "data.fine_factor"),
        ("[optim]\nc_b = 0\n", "optim.c_b"),
        ("[truth]\nkind = blob\n", "truth.kind"),
    ],
)
def test_config_errors_name_key(tmp_path, extra, where):
    text = "[solver]\nn_angular = 40\n" + extra
    with pytest.raises(cli.ConfigError, match=rf"^{where}"):
        cli.load_config(text=text, env={})


def test_expression_error_reports_offset():
    with pytest.raises(cli.ConfigError, match=r"^domain\.sigma: syntax error at offset 4"):
        cli.load_config(text="[domain]\nsigma = 1 + * x\n", env={})


def test_bad_seed_env():
    with pytest.raises(cli.ConfigError, match="^data.seed"):
        cli.load_config(text="", env={"CCBM_SEED": "x"})


def test_synth_writes_dataset_with_default_seed(tmp_path, monkeypatch):
    monkeypatch.delenv("CCBM_SEED", raising=False)
    cfg = write(tmp_path, BASE.format(method="conventional"))
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    prov = (tmp_path / "d" / "provenance.txt").read_text()
    assert "seed = 42" in prov and "truth = ellipse" in prov
    assert len(synth.Dataset.read(tmp_path / "d").f) == 40


@pytest.mark.parametrize("method", ["conventional", "admm-3"])
def test_run_history(tmp_path, method, monkeypatch):
    monkeypatch.delenv("CCBM_SEED", raising=False)
    cfg = write(tmp_path, BASE.format(method=method) + "epsilon = 1e-14\n\n[output]\nsnapshot_stride = 2\nvtk = true\n")
    d = tmp_path / "o"
    assert cli.main(["synth", "--config", str(cfg), "--out", str(d)]) == 0
    assert cli.main(["run", "--config", str(cfg), "--dataset", str(d), "--out", str(d)]) == 0
    rows = (d / "history.csv").read_text().splitlines()
    assert rows[0] == "k,J,Y,grad_norm,step,halvings"
    assert len(rows) == 6
    ys = [r.split(",")[2] for r in rows[1:]]
    if method == "conventional":
        assert all(y == "nan" for y in ys)
    else:
        assert all(np.isfinite(float(y)) for y in ys)
    assert (d / "gamma_0.csv").exists() and (d / "mesh_5.vtk").exists()


def test_error_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "[optim]\nN = -1\n")
    assert cli.main(["synth", "--config", str(bad)]) == 2
    assert "optim.N" in capsys.readouterr().err
    assert cli.main(["synth", "--config", str(tmp_path / "missing.ini")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])


def test_sweep_parallel(tmp_path, monkeypatch):
    monkeypatch.delenv("CCBM_SEED", raising=False)
    names = []
    for i, delta in enumerate((0.0, 0.02)):
        write(tmp_path, BASE.format(method="conventional") + f"\n[data]\ndelta = {delta}\n", f"run{i}.ini")
        names.append(f"run{i}.ini")
    write(tmp_path, "bad1.ini\n", "bad1.ini")
    manifest = write(tmp_path, "# sweep\n" + "\n".join(names) + "\n", "sweep.txt")
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", str(manifest), "--out", str(out), "--jobs", "2"]) == 0
    for i in range(2):
        assert (out / f"run{i}" / "history.csv").exists()
    bad = write(tmp_path, "run0.ini\nbad1.ini\n", "bad.txt")
    assert cli.main(["sweep", "--config", str(bad), "--out", str(tmp_path / "sw2"), "--jobs", "2"]) == 1
