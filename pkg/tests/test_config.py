import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from trafficpidl.config import ExperimentConfig


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"grid": {"nx": 10, "dx": 0.1}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"colour": "red"})


@pytest.mark.parametrize("data", [
    {"grid": {"nx": 1}},
    {"sensors": {"probe_ratio": 2.0}},
    {"physics": {"delta": float("nan")}},
    {"physics": {"u_free": 1.0}},
    {"model": "burgers"},
    {"train": {"initial_guess": {"rho_max": -1.0}}},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(data)


def test_hash_ignores_output_directory():
    assert ExperimentConfig(out="a").config_hash() == ExperimentConfig(out="b").config_hash()


@given(seed=st.integers(0, 10**6), nx=st.integers(2, 500), lr=st.floats(1e-6, 1.0))
@settings(max_examples=50, deadline=None)
def test_hash_changes_iff_semantic_field_changes(seed, nx, lr):
    base = ExperimentConfig()
    cfg = ExperimentConfig.model_validate({"seed": seed, "grid": {"nx": nx}, "train": {"lr": lr}})
    same = (seed, nx, lr) == (base.seed, base.grid.nx, base.train.lr)
    assert (cfg.config_hash() == base.config_hash()) == same
    again = ExperimentConfig.model_validate(cfg.model_dump())
    assert again.config_hash() == cfg.config_hash()


def test_physics_parameters_by_model():
    assert ExperimentConfig().physics_params().rho_max == 1.0
    arz = ExperimentConfig(model="arz", physics={"u_max": 2.0})
    assert arz.physics_params().u_max == 2.0


@pytest.mark.parametrize("name", ["lwr3.json", "arz_gan.json"])
def test_shipped_configs_validate(name):
    from pathlib import Path

    from trafficpidl.config import load_config

    cfg = load_config(Path(__file__).parents[1] / "configs" / name)
    assert cfg.grid.nx == 240 and cfg.grid.nt == 960
