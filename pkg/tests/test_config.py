import pytest
import yaml

from fdgan.config import ABLATIONS, DESK_STAGE3_RATES, ConfigError, build_config, load_config


def test_desk_defaults():
    cfg = build_config()
    assert cfg.preset == "desk" and cfg.ablation == "full" and cfg.last_stage == 3
    assert cfg.train.bandwidth_range == (1.0, 1.5)
    assert cfg.train.schedule(3).rates["E"] == DESK_STAGE3_RATES["E"]
    assert cfg.train.schedule(3).rates["D_id"] == 1e-4


def test_full_preset_uses_full_scale_values():
    cfg = build_config(preset="full")
    assert cfg.model.embed_dim == 2048 and (cfg.model.height, cfg.model.width) == (256, 128)
    assert cfg.train.epoch_scale == 1.0 and cfg.train.bandwidth_range == (4.0, 6.0)
    assert cfg.train.schedule(3).rates["E"] == 1e-6


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_every_ablation_builds(name):
    cfg = build_config(ablation=name)
    for section, values in ABLATIONS[name].items():
        if section == "stages":
            assert cfg.last_stage == values
            continue
        for k, v in values.items():
            assert getattr(getattr(cfg, section), k) == v


def test_ablation_overrides_file_values():
    cfg = build_config({"loss": {"lambda_sp": 3.0}}, ablation="no_sp")
    assert cfg.loss.lambda_sp == 0.0


def test_user_stage3_rates_win_over_desk_defaults():
    cfg = build_config({"train": {"rates": {"stage3": {"E": 1e-6}}}})
    assert cfg.train.schedule(3).rates["E"] == 1e-6
    assert cfg.train.schedule(3).rates["G"] == DESK_STAGE3_RATES["G"]


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"model": {"embed_dims": 3}},
    {"loss": {"lambda_r": -1}},
    {"train": {"seed": 3}},
    {"train": {"rates": {"stage2": {"E": 0.1}}}},
    {"dataset": {"source": "directory"}},
    {"dataset": {"synth": {"n_identities": 0}}},
    {"dataset": {"heldout": {"colour": 1}}},
    {"eval": {"max_rank": 0}},
    {"preset": "huge"},
])
def test_bad_configs_rejected(raw):
    with pytest.raises(ConfigError):
        build_config(raw)


def test_unknown_ablation():
    with pytest.raises(ConfigError, match="unknown ablation"):
        build_config(ablation="no_everything")


def test_dump_and_reload(tmp_path):
    cfg = build_config({"dataset": {"synth": {"n_identities": 5}}}, seed=4, ablation="share_e")
    path = cfg.dump(tmp_path / "c.yaml")
    again = load_config(path, seed=4)
    assert again.to_dict() == cfg.to_dict()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text(yaml.safe_dump([1, 2]))
    with pytest.raises(ConfigError):
        load_config(bad)


def test_single_branch_classifier_sizes_from_data():
    cfg = build_config({"dataset": {"synth": {"n_identities": 6}}}, ablation="baseline_single")
    assert cfg.model.num_identities == 6 and cfg.last_stage == 1
