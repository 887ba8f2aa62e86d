import pytest
import yaml

from fedeu.config import (ExperimentConfig, FederationConfig, apply_overrides, config_from_dict,
                          config_to_dict, default_config, dump_config, load_config)
from fedeu.errors import ConfigError


def test_defaults():
    cfg = default_config()
    fed = cfg.federation
    assert (fed.rounds, fed.epochs, fed.lr, fed.mode) == (30, 5, 0.001, "tuw")
    assert fed.effective_psi_lr == fed.lr
    assert cfg.loss.tau_fraction == pytest.approx(0.1)
    assert len(cfg.data.clients) == 3 and cfg.data.image_size == 32


def test_yaml_round_trip(tmp_path):
    cfg = default_config(seed=4).replace(federation=FederationConfig(rounds=3, psi_lr=0.01))
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    assert load_config(path) == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_partial_yaml_uses_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    raw = config_to_dict(default_config())
    path.write_text(yaml.safe_dump({"data": raw["data"], "federation": {"rounds": 2}}))
    cfg = load_config(path)
    assert cfg.federation.rounds == 2 and cfg.federation.epochs == 5


@pytest.mark.parametrize("mutate, field", [
    (lambda r: r["federation"].update(lr="abc"), "federation.lr"),
    (lambda r: r["federation"].update(bogus=1), "federation.bogus"),
    (lambda r: r.update(colour="red"), "colour"),
    (lambda r: r["federation"].update(mode="median"), "federation.mode"),
    (lambda r: r["federation"].update(rounds=0), "federation.rounds"),
    (lambda r: r["data"]["clients"][1].update(family="stars"), "data.clients[1]"),
    (lambda r: r["network"].update(widths=[4, 8], image_size=[30, 30]), "network.image_size"),
])
def test_errors_name_the_field(tmp_path, mutate, field):
    raw = config_to_dict(default_config())
    mutate(raw)
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert field in str(err.value) and str(path) in str(err.value)


def test_data_and_dataset_path_exclusive():
    with pytest.raises(ConfigError, match="exactly one"):
        ExperimentConfig()
    with pytest.raises(ConfigError, match="exactly one"):
        ExperimentConfig(data=default_config().data, dataset_path="x.bin")


def test_invalid_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("federation: [1,\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "none.yaml")


def test_overrides():
    cfg = apply_overrides(default_config(), ["federation.rounds=4", "ablation.disable_cfe=true"])
    assert cfg.federation.rounds == 4 and cfg.ablation.disable_cfe
    with pytest.raises(ConfigError, match="unknown field 'federation.nope'"):
        apply_overrides(cfg, ["federation.nope=1"])
    cfg = apply_overrides(cfg, ["data.clients.2.noise=0.3"])
    assert cfg.data.clients[2].noise == 0.3
    with pytest.raises(ConfigError, match="out of range"):
        apply_overrides(cfg, ["data.clients.9.noise=0.3"])
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides(cfg, ["federation.rounds"])


def test_readme_style_partial_config(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("""
seed: 1
federation: {rounds: 10, mode: fedavg}
data:
  seed: 1
  image_size: 32
  clients:
    - {family: blobs, shift: [0.0], noise: 0.05}
    - {family: strips, shift: [0.1], noise: 0.08}
""")
    cfg = load_config(path)
    assert cfg.federation.mode == "fedavg" and len(cfg.data.clients) == 2
    assert cfg.data.clients[1].shift == (0.1,)
