import json

import pytest

from purifynet import config as cf


def test_defaults_validate():
    cfg = cf.build_config()
    assert cfg.schema_version == 1 and cfg.dataset.kind == "synthetic"
    assert [a.label for a in cfg.attacks] == ["FGSM", "BIM", "DeepFool", "JSMA", "CW-L2"]
    assert cfg.diffusion.all_T() == [1000]
    assert cfg.sweep.seeds == [0]


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"dataset": {"kidn": "synthetic"}},
    {"diffusion": {"schedule": {"T": 100, "beta_1": 0.1}}},
    {"attacks": [{"method": "FGSM", "epsilon": 0.1, "eps": 0.1}]},
])
def test_unknown_keys_are_rejected(doc):
    with pytest.raises(cf.ConfigError):
        cf.build_config(doc)


@pytest.mark.parametrize("doc", [
    {"sweep": {"seeds": []}},
    {"diffusion": {"schedule": {"beta1": 0.1, "betaT": 0.01}}},
    {"dataset": {"kind": "nslkdd"}},
    {"dataset": {"kind": "nslkdd", "train_path": "/no/such/file.csv"}},
    {"attacks": [{"method": "FGSM"}, {"method": "FGSM"}]},
    {"attacks": [{"method": "PGD"}]},
    {"schema_version": 2},
    {"sweep": {"alignment_attacks": ["PGD"]}},
])
def test_invalid_values_are_rejected(doc):
    with pytest.raises(cf.ConfigError):
        cf.build_config(doc)


def test_missing_path_is_named():
    with pytest.raises(cf.ConfigError, match="/no/such/file.csv"):
        cf.build_config({"dataset": {"kind": "unswnb15", "train_path": "/no/such/file.csv"}})


def test_overrides_use_dotted_paths_and_json_values():
    cfg = cf.build_config({}, ["diffusion.schedule.T=100", "sweep.seeds=[1,2,3]", "run_name=x",
                               "attacks.0.epsilon=0.05", "sweep.format=json"])
    assert cfg.diffusion.schedule.T == 100
    assert cfg.sweep.seeds == [1, 2, 3]
    assert cfg.run_name == "x"
    assert cfg.attacks[0].epsilon == 0.05
    assert cfg.sweep.format == "json"


def test_override_errors():
    with pytest.raises(cf.ConfigError):
        cf.parse_override("noequals")
    with pytest.raises(cf.ConfigError):
        cf.build_config({}, ["attacks.9.epsilon=0.1"])
    with pytest.raises(cf.ConfigError):
        cf.build_config({}, ["diffusion.schedule.T.x=1"])


def test_presets_expand_under_explicit_values(tmp_path):
    csv = tmp_path / "train.csv"
    csv.write_text("")
    real = [f"dataset.train_path={csv}"]
    desk = cf.build_config({"preset": "desk"})
    assert desk.diffusion.all_T() == [1000, 100]
    assert desk.sweep.grid(100)[-1] == 100 and 600 in desk.sweep.grid(1000)
    paper = cf.build_config({}, ["preset=paper-standard", *real])
    assert paper.classifier.epochs == 10000 and paper.diffusion.epochs == 200000
    assert paper.diffusion.train_config().hidden == (960,) * 10
    assert cf.build_config({}, ["preset=paper-constant", *real]).diffusion.make_schedule(1000).beta[-1] == 1e-4
    mixed = cf.build_config({"preset": "desk", "sweep": {"t_grid": [0, 5]}})
    assert mixed.sweep.grid(1000) == [0, 5]
    with pytest.raises(cf.ConfigError, match="unknown preset"):
        cf.build_config({"preset": "nope"})


def test_default_grid_follows_T():
    cfg = cf.build_config({}, ["diffusion.alignment_T=[100]"])
    assert cfg.sweep.grid(100) == list(range(101))
    assert cfg.sweep.grid(1000)[-1] == 1000


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "classifier": {"epochs": 7}}))
    assert cf.load_config(p, ["classifier.seed=3"]).classifier.seed == 3
    assert cf.load_config(p).classifier.epochs == 7
    p.write_text(json.dumps({"classifier": {"epochs": 7}}))
    with pytest.raises(cf.ConfigError, match="schema_version"):
        cf.load_config(p)
    p.write_text("{")
    with pytest.raises(cf.ConfigError, match="invalid JSON"):
        cf.load_config(p)
    with pytest.raises(cf.ConfigError, match="not found"):
        cf.load_config(tmp_path / "missing.json")


def test_sections_build_module_configs():
    cfg = cf.build_config({"attacks": [{"method": "cw", "name": "cw-fast", "iterations": 10}]})
    a = cfg.attacks[0]
    assert a.label == "cw-fast" and a.to_attack_config().method == "CW-L2"
    assert cfg.classifier.train_config().hidden == (64, 128, 256, 128, 64)
    assert cfg.diffusion.train_config().weight_decay == 0.01
