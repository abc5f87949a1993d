import json

import numpy as np
import pytest

from trafficpidl.cli import run_cli
from trafficpidl.config import ExperimentConfig, load_config
from trafficpidl.domain import read_field_csv

TINY = {
    "grid": {"nx": 16, "nt": 24, "T": 1.0},
    "sensors": {"m": 3, "noise_std": 0.01},
    "collocation": {"n_c": 40, "n_b": 5},
    "train": {"adam_iterations": 5, "lbfgs_max_iterations": 3, "network": {"hidden": [6, 6]}},
    "gan": {"iterations": 3, "batch_size": 16, "n_mc": 4},
    "seed": 3,
}


def config_file(tmp_path, **over):
    data = {**TINY, **over}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return str(path)


def run(tmp_path, cmd, out, *extra, **over):
    return run_cli([cmd, "--config", config_file(tmp_path, **over), "--out", str(tmp_path / out), *extra])


def test_generate_default_shape_and_manifest(tmp_path):
    assert run_cli(["generate", "--out", str(tmp_path / "g")]) == 0
    rho = read_field_csv(tmp_path / "g" / "rho.csv")
    assert rho.values.shape == (240, 960)
    man = json.loads((tmp_path / "g" / "manifest-generate.json").read_text())
    assert man["config_hash"] == ExperimentConfig().config_hash()
    assert man["outputs"] == ["rho.csv"] and "numpy" in man["versions"]


def test_sample_writes_all_sets(tmp_path):
    assert run(tmp_path, "sample", "s") == 0
    names = {p.name for p in (tmp_path / "s").iterdir()}
    assert {"observations.csv", "collocation.csv", "boundary.csv", "manifest-sample.json"} <= names


def test_train_is_byte_identical(tmp_path):
    assert run(tmp_path, "train", "a") == 0
    assert run(tmp_path, "train", "b") == 0
    for name in ("train_report.json", "net.json", "pred_rho.csv", "manifest-train.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_changes_results(tmp_path):
    assert run(tmp_path, "train", "a") == 0
    assert run(tmp_path, "train", "b", "--seed", "4") == 0
    a = json.loads((tmp_path / "a" / "manifest-train.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest-train.json").read_text())
    assert a["config_hash"] != b["config_hash"] and b["seed"] == 4


def test_ekf_and_arz(tmp_path):
    assert run(tmp_path, "ekf", "e") == 0
    assert json.loads((tmp_path / "e" / "ekf_report.json").read_text())["metrics"]["re_rho"] >= 0
    assert run(tmp_path, "generate", "arz", model="arz") == 0
    assert (tmp_path / "arz" / "u.csv").exists()


@pytest.mark.parametrize("variant", ["pi-gan", "pid-gan"])
def test_gan_train(tmp_path, variant):
    gan = {**TINY["gan"], "variant": variant, "eval_stride": 2}
    assert run(tmp_path, "gan-train", "gan", model="arz", gan=gan) == 0
    rep = json.loads((tmp_path / "gan" / "gan_report.json").read_text())
    assert len(rep["losses"]["generator"]) == 3 and np.isfinite(rep["metrics"]["kl_rho"])
    assert (tmp_path / "gan" / "uq.csv").read_text().startswith("x,t,mean_rho")


def test_evaluate_truth_against_itself(tmp_path):
    assert run(tmp_path, "generate", "g") == 0
    rho = str(tmp_path / "g" / "rho.csv")
    assert run(tmp_path, "evaluate", "ev", "--pred", rho, "--truth", rho) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["re_rho"] == 0 and metrics["mse_rho"] == 0
    assert all(v == 0 for v in metrics.values() if v is not None)


def test_export_matrix(tmp_path):
    assert run(tmp_path, "generate", "g") == 0
    rho = str(tmp_path / "g" / "rho.csv")
    assert run(tmp_path, "export", "x", "--field", rho, "--pred", rho, "--truth", rho) == 0
    lines = (tmp_path / "x" / "rho_matrix.csv").read_text().splitlines()
    assert len(lines) == 17 and len(lines[0].split(",")) == 25
    se = (tmp_path / "x" / "se_matrix.csv").read_text().splitlines()[1].split(",")[1:]
    assert all(float(v) == 0.0 for v in se)


def test_bad_config_exits_2(tmp_path, capsys):
    assert run(tmp_path, "generate", "bad", bogus=1) == 2
    assert "bogus" in capsys.readouterr().err
    assert run(tmp_path, "generate", "bad", physics={"delta": -1.0}) == 2
    assert run_cli(["generate", "--config", str(tmp_path / "missing.json")]) == 2


def test_runtime_failure_exits_1(tmp_path):
    (tmp_path / "broken.csv").write_text("nonsense\n")
    p = str(tmp_path / "broken.csv")
    assert run(tmp_path, "evaluate", "ev", "--pred", p, "--truth", p) == 1


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        run_cli(["fly"])


def test_config_file_round_trip(tmp_path):
    cfg = load_config(config_file(tmp_path))
    assert cfg.grid.nx == 16 and cfg.train.network.hidden == (6, 6)


@pytest.mark.parametrize("model", ["lwr3", "arz"])
def test_probe_ratio_adds_observations(tmp_path, model):
    sensors = {**TINY["sensors"], "n_vehicles": 10}
    assert run(tmp_path, "sample", "loop", model=model, sensors=sensors) == 0
    assert run(tmp_path, "sample", "probe", model=model, sensors={**sensors, "probe_ratio": 0.5}) == 0
    loop = (tmp_path / "loop" / "observations.csv").read_text().splitlines()
    probe = (tmp_path / "probe" / "observations.csv").read_text().splitlines()
    assert len(probe) > len(loop) and probe[0] == loop[0]
