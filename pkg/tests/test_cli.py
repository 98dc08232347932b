import json

import numpy as np
import pytest
from PIL import Image

from caveseg import caveline3d as L
from caveseg import cli
from caveseg import dataset as D
from caveseg import model as M
from caveseg.checkpoint import load_checkpoint
from caveseg.metrics import parse_key_values


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.DATA_ENV, raising=False)

    def _run(*args):
        return cli.main([str(a) for a in args])
    return _run


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "out"
    cfg = out.parent / "run.json"
    cfg.write_text(json.dumps({"epochs": 1, "learning_rate": 0.01, "seed": 3}))
    assert cli.main(["train", "--config", str(cfg), "--preset", "tiny", "--synthetic", "8", "--out", str(out)]) == 0
    return out


def test_train_writes_artifacts(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"checkpoint.ckpt", "train_log.txt", "report.json", "split.tsv", "loss.png",
            "metrics_train.txt", "metrics_train.tsv"} <= names
    report = json.loads((trained / "report.json").read_text())
    assert report["seed"] == 3 and report["learning_rate"] == 0.01
    assert report["split_sizes"] == {"train": 6, "val": 0, "test": 2}
    assert report["steps"] == 6
    assert (trained / "split.tsv").read_text().startswith("# seed 3")
    assert "seed 3" in (trained / "train_log.txt").read_text().splitlines()[0]
    assert parse_key_values((trained / "metrics_train.tsv").read_text())["seed"] == 3
    assert load_checkpoint(trained / "checkpoint.ckpt").config == M.PRESETS["tiny"]


def test_train_is_idempotent(trained, tmp_path):
    cfg = trained.parent / "run.json"
    again = tmp_path / "again"
    assert cli.main(["train", "--config", str(cfg), "--preset", "tiny", "--synthetic", "8", "--out", str(again)]) == 0
    for p in trained.iterdir():
        assert (again / p.name).read_bytes() == p.read_bytes(), p.name


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 4, "epochs": 3, "embed_dim": 16, "preset": "tiny"}))
    rc = cli.resolve_config("train", {"seed": 9}, str(cfg), env={})
    assert rc.seed == 9 and rc.epochs == 3 and rc.preset == "tiny"
    assert rc.model_config().embed_dim == 16
    assert cli.resolve_config("train", {}, None, env={}).seed == 0


def test_env_supplies_data_root(tmp_path):
    assert cli.resolve_config("eval", {}, None, env={cli.DATA_ENV: "/data"}).data_root == "/data"
    assert cli.resolve_config("eval", {"data_root": "/x"}, None, env={cli.DATA_ENV: "/data"}).data_root == "/x"


def test_unknown_config_key_is_usage_error(run, tmp_path):
    (tmp_path / "c.json").write_text('{"epoch": 1}')
    assert run("train", "--config", "c.json", "--synthetic", "4") == 2


def test_missing_dataset_root_exit_2(run, capsys):
    assert run("train", "--preset", "tiny", "--data", "no/such/dir") == 2
    assert "no/such/dir" in capsys.readouterr().err


def test_missing_config_file_exit_2(run, capsys):
    assert run("info", "--config", "absent.json") == 2
    assert "absent.json" in capsys.readouterr().err


def test_failed_run_leaves_no_output(run, tmp_path):
    assert run("train", "--preset", "tiny", "--data", "nowhere", "--out", "o") == 2
    assert not (tmp_path / "o").exists()
    assert not list(tmp_path.glob(".caveseg-*"))


def test_infer_outputs(run, trained, tmp_path):
    s = D.generate_synthetic(21, 40, 56)
    D.write_png(tmp_path / "scene.png", s.image)
    assert run("infer", "--checkpoint", trained / "checkpoint.ckpt", "scene.png", "--out", "inf") == 0
    mask = np.array(Image.open(tmp_path / "inf" / "scene_mask.png"))
    assert mask.shape == (40, 56, 3)
    palette = {tuple(c) for c in D.DEFAULT_PALETTE.colors}
    assert {tuple(c) for c in mask.reshape(-1, 3)} <= palette
    over = np.array(Image.open(tmp_path / "inf" / "scene_overlay.png"))
    np.testing.assert_array_equal(over, np.rint(0.5 * s.image + 0.5 * mask.astype(float)).astype(np.uint8))
    summary = json.loads((tmp_path / "inf" / "infer_summary.json").read_text())
    assert sum(summary["images"]["scene"].values()) == 40 * 56


def test_overlay_of_uniform_prediction():
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    color = np.array([255, 0, 255], dtype=np.uint8)
    got = cli.overlay(img, np.broadcast_to(color, img.shape))
    expected = np.rint((img.astype(float) + color) / 2).astype(np.uint8)
    np.testing.assert_array_equal(got, expected)


def test_infer_rejects_image_smaller_than_patch(run, trained, tmp_path):
    D.write_png(tmp_path / "tiny.png", np.zeros((3, 3, 3), np.uint8))
    assert run("infer", "--checkpoint", trained / "checkpoint.ckpt", "tiny.png") == 1


def test_eval_oracle_all_ones(run, tmp_path, capsys):
    assert run("eval", "--oracle", "--synthetic", "20", "--out", "ev") == 0
    out = capsys.readouterr().out
    assert "mIoU=1.000000" in out
    kv = parse_key_values((tmp_path / "ev" / "metrics_test.tsv").read_text())
    assert kv["mIoU"] == kv["mAcc"] == kv["aAcc"] == 1.0
    rows = [l for l in (tmp_path / "ev" / "metrics_test.txt").read_text().splitlines()
            if l.split() and l.split()[0] in D.CLASS_NAMES]
    assert len(rows) == 13
    assert (tmp_path / "ev" / "class_scores_test.png").stat().st_size > 0


def test_eval_on_dataset_directory(run, trained, tmp_path):
    for i in range(6):
        D.save_sample(tmp_path / "data", D.generate_synthetic(i, 32, 32, source_id=f"s{i}"))
    assert run("eval", "--checkpoint", trained / "checkpoint.ckpt", "--data", "data", "--split", "all",
               "--out", "ev") == 0
    from caveseg.metrics import ConfusionMatrix
    model = load_checkpoint(trained / "checkpoint.ckpt")
    cm = ConfusionMatrix.zeros(13)
    for i in range(6):
        s = D.load_sample(tmp_path / "data", f"s{i}")
        cm.accumulate(s.labels, model.predict(s.image))
    kv = parse_key_values((tmp_path / "ev" / "metrics_all.tsv").read_text())
    assert kv["mIoU"] == pytest.approx(cm.summarize()["mIoU"], abs=1e-12)


def test_eval_empty_split_is_usage_error(run):
    assert run("eval", "--oracle", "--synthetic", "4", "--split", "val") == 2


def test_triangulate_fixture(run, tmp_path):
    views, truth = L.synthetic_views(11, n_segments=12)
    for k, v in enumerate(views):
        L.write_view(v, tmp_path / f"v{k}.json")
    assert run("triangulate", "v0.json", "v1.json", "--out", "tri") == 0
    segs, err, smooth = L.read_ply((tmp_path / "tri" / "caveline.ply").read_text())
    assert len(segs) == 12
    assert np.abs(segs - truth).max() < 1e-6
    summary = json.loads((tmp_path / "tri" / "triangulation.json").read_text())
    assert summary["segment_count"] == 12 and summary["rejected_count"] == 0
    assert summary["reprojection_error"]["max"] == err.max()
    assert summary["segment_errors"] == err.tolist()
    assert summary["smoothed_errors"] == smooth.tolist()


def test_triangulate_single_view_exit_2(run, tmp_path):
    views, _ = L.synthetic_views(0)
    L.write_view(views[0], tmp_path / "v0.json")
    assert run("triangulate", "v0.json") == 2


def test_triangulate_bad_view_file_exit_1(run, tmp_path):
    (tmp_path / "a.json").write_text("{}")
    (tmp_path / "b.json").write_text("{}")
    assert run("triangulate", "a.json", "b.json") == 1


def test_info_reports_count_and_size(run, trained, capsys):
    assert run("info", "--checkpoint", trained / "checkpoint.ckpt") == 0
    lines = dict(l.split("\t", 1) for l in capsys.readouterr().out.splitlines())
    model = load_checkpoint(trained / "checkpoint.ckpt")
    assert int(lines["parameters"]) == model.num_parameters()
    assert int(lines["bytes"]) == (trained / "checkpoint.ckpt").stat().st_size
    assert abs(int(lines["bytes"]) - 8 * model.num_parameters()) / (8 * model.num_parameters()) < 0.05


def test_info_on_preset(run, capsys):
    assert run("info", "--preset", "tiny") == 0
    lines = dict(l.split("\t", 1) for l in capsys.readouterr().out.splitlines())
    assert int(lines["parameters"]) == M.count_parameters(M.init_weights(M.PRESETS["tiny"], 0))


@pytest.mark.parametrize("command", ["train", "infer", "eval", "triangulate", "info"])
def test_help_for_every_command(command, capsys):
    assert cli.main([command, "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out"):
        assert flag in text


def test_bad_arguments_exit_2(run):
    assert run("train", "--epochs", "many") == 2
    assert run("frobnicate") == 2
