import json
import zipfile

import pytest

from shapepose.cli import main
from shapepose.results import read_table


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate", "--out", str(root), "--category", "mug", "--instances", "2", "--views", "4"]) == 0
    return root


@pytest.mark.slow
def test_generate_full_sized(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["generate", "--category", "bottle", "--instances", "15", "--views", "64", "--seed", "1",
                 "--out", str(out)]) == 0
    assert len(list((out / "bottle").glob("*/view_*.png"))) == 15 * 64
    assert "manifest.json" in capsys.readouterr().out
    # rerun refuses without --overwrite
    assert main(["generate", "--category", "bottle", "--instances", "15", "--views", "64", "--seed", "1",
                 "--out", str(out)]) != 0


def test_generate_missing_parent(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "a" / "b" / "c"), "--instances", "1", "--views", "1"]) != 0
    assert "does not exist" in capsys.readouterr().err


def test_generate_overwrite(data_root):
    args = ["generate", "--out", str(data_root), "--category", "can", "--instances", "1", "--views", "1"]
    assert main(args) == 0
    assert main(args) != 0
    assert main(args + ["--overwrite"]) == 0


def _train(data_root, out, *extra):
    return main(["train", "--data", str(data_root), "--category", "mug", "--out", str(out), "--epochs", "1",
                 "--steps-per-epoch", "2", "--batch-size", "2", *extra])


def test_train_mug_tolerance(data_root, tmp_path, capsys):
    assert _train(data_root, tmp_path, "--model", "vaesp", "--tolerance", "520") == 0
    out = capsys.readouterr().out
    assert "tolerance = 520.0  [cli]" in out
    run = next(tmp_path.iterdir())
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["training_config"]["mse_tolerance"] == 520.0
    assert "seed0" in run.name


def test_train_gqn_checkpoint(data_root, tmp_path):
    assert _train(data_root, tmp_path, "--model", "gqn") == 0
    ck = next(tmp_path.glob("*/checkpoint_epoch001.zip"))
    assert not any("transition" in n for n in zipfile.ZipFile(ck).namelist())


def test_unknown_model_is_usage_error(data_root, tmp_path):
    with pytest.raises(SystemExit) as e:
        _train(data_root, tmp_path, "--model", "transformer")
    assert e.value.code == 2


def test_identical_reruns_give_identical_metrics(data_root, tmp_path):
    assert _train(data_root, tmp_path / "a", "--seed", "4") == 0
    assert _train(data_root, tmp_path / "b", "--seed", "4") == 0
    a = next((tmp_path / "a").glob("*/metrics.jsonl")).read_bytes()
    b = next((tmp_path / "b").glob("*/metrics.jsonl")).read_bytes()
    assert a == b


def test_config_precedence(data_root, tmp_path, capsys):
    conf = tmp_path / "c.yaml"
    conf.write_text("epochs: 1\nlearning_rate: 0.005\nswap_probability: 0.25\n")
    assert _train(data_root, tmp_path / "r", "--config", str(conf), "--swap-probability", "0.75") == 0
    out = capsys.readouterr().out
    assert "learning_rate = 0.005  [file]" in out
    assert "swap_probability = 0.75  [cli]" in out
    assert "multiplier_lr = 0.01  [default]" in out
    saved = json.loads(next((tmp_path / "r").glob("*/config.json")).read_text())
    assert saved["training_config"]["learning_rate"] == 0.005


def test_missing_dataset(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path), "--category", "bowl", "--out", str(tmp_path)]) != 0


@pytest.fixture(scope="module")
def checkpoint(data_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert _train(data_root, out, "--model", "vaesp") == 0
    return next(out.glob("*/checkpoint_epoch001.zip"))


@pytest.mark.slow
def test_eval_predict(checkpoint, tmp_path):
    assert main(["eval", "predict", "--checkpoint", str(checkpoint), "--n", "500", "--out", str(tmp_path)]) == 0
    run = next(tmp_path.iterdir())
    prov, header, rows = read_table(run / "predict_ssim.tsv")
    assert header == ["model", "mug"] and rows[0][0] == "vaesp" and "±" in rows[0][1]
    assert "checkpoint_sha256" in prov and "dataset_seed" in prov
    samples = json.loads((run / "predict_samples.json").read_text())
    assert len(samples["vaesp_mug"]["mse"]["per_sample"]) == 500
    assert (run / "figures" / "predictions_vaesp_mug.svg").exists()


@pytest.mark.slow
def test_eval_reach(checkpoint, tmp_path, capsys):
    assert main(["eval", "reach", "--checkpoint", str(checkpoint), "--trials", "50", "--candidates", "10000",
                 "--out", str(tmp_path)]) == 0
    run = next(tmp_path.iterdir())
    _, header, rows = read_table(run / "reach_mse.tsv")
    assert {r[0] for r in rows} == {"vaesp", "random"}
    samples = json.loads((run / "reach_samples.json").read_text())
    assert len(samples["vaesp_mug"]["trials"]) == 50
    assert (run / "figures" / "reach_vaesp_mug.svg").exists()


def test_eval_disentangle(checkpoint, tmp_path, capsys):
    assert main(["eval", "disentangle", "--checkpoint", str(checkpoint), "--sweep", "50", "--out", str(tmp_path)]) == 0
    run = next(tmp_path.iterdir())
    assert (run / "figures" / "violin_vaesp_mug.svg").exists()
    assert (run / "figures" / "violin_vaesp_mug.png").exists()
    _, _, rows = read_table(run / "disentangle_score.tsv")
    assert 0 <= float(rows[0][1]) <= 1
    assert "disentanglement score" in capsys.readouterr().out


def test_eval_grid(checkpoint, tmp_path):
    assert main(["eval", "grid", "--checkpoint", str(checkpoint), "--n-shapes", "2", "--n-poses", "3",
                 "--out", str(tmp_path)]) == 0
    run = next(tmp_path.iterdir())
    assert json.loads((run / "grid_samples.json").read_text())["vaesp_mug"]["cells"] == [3, 4]


def test_eval_without_checkpoint(tmp_path):
    assert main(["eval", "predict", "--out", str(tmp_path)]) != 0


def test_plan_episode(checkpoint, tmp_path):
    assert main(["plan", "--checkpoint", str(checkpoint), "--candidates", "200", "--out", str(tmp_path)]) == 0
    run = next(tmp_path.iterdir())
    rec = json.loads((run / "episode.json").read_text())
    assert rec["n_candidates"] == 200 and len(rec["top10"]) == 10
    assert len(rec["checkpoint_sha256"]) == 64 and rec["goal_mse"] >= 0
    assert (run / "reached.png").exists() and (run / "config.json").exists()
