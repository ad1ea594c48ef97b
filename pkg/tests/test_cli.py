import hashlib
import json

import numpy as np
import pytest
import yaml
from PIL import Image

from fdgan.cli import EXIT_CONFIG, EXIT_DEPENDENCY, main
from fdgan.checkpoint import load_checkpoint

SMALL = {
    "dataset": {"synth": {"n_identities": 4, "images_per_identity": 6},
                "heldout": {"n_identities": 3, "images_per_identity": 4}},
    "train": {"batch_pairs": 8, "positive_pairs": 3, "probe_pairs": 4},
}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return str(path)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, small_config):
    run = tmp_path_factory.mktemp("run")
    code = main(["train", "--config", small_config, "--out", str(run), "--stage", "all",
                 "--max-iterations", "20"])
    assert code == 0
    return run


def _digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(folder).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_writes_market_layout(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth", "--out", str(out), "--ids", "3", "--per-id", "4", "--heldout"]) == 0
    assert len(list((a / "bounding_box_train").glob("*.png"))) == 12
    assert (a / "query").is_dir() and (a / "bounding_box_test").is_dir()
    assert (a / "landmarks.csv").exists()
    assert _digest(a) == _digest(b)
    assert main(["synth", "--out", str(a), "--ids", "3"]) == EXIT_CONFIG


def test_stage2_without_stage1_is_missing_dependency(tmp_path, small_config):
    assert main(["train", "--config", small_config, "--out", str(tmp_path), "--stage", "2"]) == EXIT_DEPENDENCY


def test_bad_config_leaves_no_run_dir(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("model: {nonsense: 1}\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_ablation_flag_reaches_checkpoint(tmp_path, small_config):
    out = tmp_path / "run"
    assert main(["train", "--config", small_config, "--out", str(out), "--ablation", "no_sp",
                 "--stage", "1", "--max-iterations", "2"]) == 0
    saved = yaml.safe_load((out / "config.yaml").read_text())
    assert saved["loss"]["lambda_sp"] == 0.0 and saved["ablation"] == "no_sp"
    assert load_checkpoint(out / "checkpoints" / "stage1.pt")["loss_weights"]["lambda_sp"] == 0.0


def test_train_all_artifacts(trained_run):
    for stage in (1, 2, 3):
        assert (trained_run / "checkpoints" / f"stage{stage}.pt").exists()
        lines = (trained_run / "logs" / f"stage{stage}.jsonl").read_text().splitlines()
        steps = [json.loads(x) for x in lines if '"losses"' in x]
        assert len(steps) == 20 and all(np.isfinite(list(s["losses"].values())).all() for s in steps)
    assert list((trained_run / "grids").glob("stage2_*.png"))
    assert list((trained_run / "grids").glob("stage3_*.png"))


def test_eval_without_landmarks(trained_run, capsys):
    assert main(["eval", "--out", str(trained_run), "--no-landmarks", "--export-embeddings"]) == 0
    printed = capsys.readouterr().out
    assert "mAP" in printed and "top-1" in printed
    reports = list((trained_run / "reports").glob("eval_*.json"))
    data = json.loads(reports[0].read_text())
    assert 0 <= data["mAP"] <= 1 and len(data["cmc"]) >= 1


def test_eval_from_embedding_files(trained_run, capsys):
    assert main(["eval", "--out", str(trained_run), "--export-embeddings"]) == 0
    q = sorted((trained_run / "reports").glob("*query*.emb"))
    g = sorted((trained_run / "reports").glob("*gallery*.emb"))
    assert q and g
    assert main(["eval", "--out", str(trained_run), "--query-embeddings", str(q[0]),
                 "--gallery-embeddings", str(g[0])]) == 0


def test_generate_panels_and_determinism(trained_run, tmp_path):
    outs = [tmp_path / "a.png", tmp_path / "b.png"]
    for out in outs:
        assert main(["generate", "--out", str(trained_run), "--n-noise", "3", "--output", str(out)]) == 0
    a, b = (np.asarray(Image.open(p)) for p in outs)
    assert np.array_equal(a, b)
    # n_noise + 3 panels of one image width each, laid out in a single row
    assert a.shape[1] >= 6 * 32 and a.shape[1] < 7 * 32 + 7 * 8


def test_generate_rejects_stage1_and_bad_landmarks(tmp_path, trained_run, small_config):
    s1 = trained_run / "checkpoints" / "stage1.pt"
    assert main(["generate", "--out", str(trained_run), "--checkpoint", str(s1)]) == EXIT_CONFIG
    lm = tmp_path / "lm.txt"
    lm.write_text("x.png 1 2 3\n")
    img = tmp_path / "x.png"
    Image.fromarray(np.zeros((64, 32, 3), np.uint8)).save(img)
    assert main(["generate", "--out", str(trained_run), "--image", str(img), "--landmarks", str(lm)]) == EXIT_CONFIG
