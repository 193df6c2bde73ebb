import csv
import hashlib
import json
import subprocess
import sys

import pytest

from rayzer_lab.cli import main

SMALL = ["--set", "train.num_input=3", "--set", "train.num_target=2",
         "--set", "train.range_start=[6,8]", "--set", "train.range_end=[8,10]"]


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--scenes", "3", "--frames", "16", "--out", str(data), "--set", "data.test_scenes=1"]) == 0
    run = root / "run"
    args = ["train", "--data", str(data), "--out", str(run), *SMALL,
            "--set", "train.total_iters=4", "--set", "train.warmup_iters=1", "--set", "train.batch_size=2",
            "--set", "train.checkpoint_every=2"]
    assert main(args) == 0
    return root, data, run


def test_gen_data_layout_and_determinism(workspace, tmp_path):
    _, data, _ = workspace
    assert sorted(p.name for p in data.iterdir()) == ["manifest.json", "scene_0000", "scene_0001", "scene_0002"]
    assert len(list((data / "scene_0000").glob("frame_*.png"))) == 16
    assert main(["gen-data", "--scenes", "3", "--frames", "16", "--out", str(tmp_path / "again"),
                 "--set", "data.test_scenes=1"]) == 0
    assert digest(tmp_path / "again") == digest(data)


def test_gen_data_usage_errors(tmp_path):
    assert main(["gen-data", "--scenes", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-data", "--bogus"]) == 2
    assert main(["gen-data", "--set", "nokey=1", "--out", str(tmp_path / "y")]) == 2


def test_train_outputs(workspace):
    _, _, run = workspace
    cfg = json.loads((run / "run.json").read_text())
    assert cfg["train.total_iters"] == 4 and cfg["model.dim"] == 64
    rows = list(csv.reader(open(run / "metrics.csv")))
    assert rows[0] == ["iter", "loss", "mse", "percep", "grad_norm", "lr", "seconds"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert (run / "checkpoints" / "last.ckpt").is_file()


def test_run_json_is_valid_config(workspace, tmp_path):
    _, data, run = workspace
    out = tmp_path / "e"
    assert main(["eval", "--config", str(run / "run.json"), "--data", str(data),
                 "--ckpt", str(run / "checkpoints" / "last.ckpt"), "--out", str(out)]) == 0
    assert json.loads((out / "run.json").read_text())["train.num_input"] == 3


def test_resume_continues(workspace, tmp_path):
    _, data, run = workspace
    out = tmp_path / "resumed"
    assert main(["train", "--config", str(run / "run.json"), "--data", str(data), "--out", str(out),
                 "--resume", str(run / "checkpoints" / "last.ckpt"), "--set", "train.total_iters=6"]) == 0
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert [int(r[0]) for r in rows[1:]] == [4, 5]


@pytest.mark.parametrize("mode", ["even", "random"])
def test_eval_modes(workspace, tmp_path, mode):
    _, data, run = workspace
    out = tmp_path / mode
    assert main(["eval", "--data", str(data), "--ckpt", str(run / "checkpoints" / "last.ckpt"),
                 "--out", str(out), "--mode", mode, "--split", "train", *SMALL]) == 0
    assert (out / f"nvs_{mode}.csv").read_text().startswith("scene_id,psnr,ssim")
    assert json.loads((out / f"copy_{mode}.json").read_text())["mode"] == mode


def test_eval_deterministic(workspace, tmp_path):
    _, data, run = workspace
    outs = []
    for k in range(2):
        out = tmp_path / f"d{k}"
        main(["eval", "--data", str(data), "--ckpt", str(run / "checkpoints" / "last.ckpt"), "--out", str(out), *SMALL])
        outs.append((out / "nvs_even.csv").read_text())
    assert outs[0] == outs[1]


def test_render_views(workspace, tmp_path):
    _, data, run = workspace
    out = tmp_path / "r"
    assert main(["render", "--data", str(data), "--ckpt", str(run / "checkpoints" / "last.ckpt"),
                 "--out", str(out), "--views", "0,2,4", *SMALL]) == 0
    assert len(list(out.glob("*.png"))) == 3
    assert main(["render", "--data", str(data), "--ckpt", str(run / "checkpoints" / "last.ckpt"),
                 "--out", str(out), "--views", "0,99", *SMALL]) == 2


def test_interp_and_probe(workspace, tmp_path):
    _, data, run = workspace
    assert main(["interp", "--data", str(data), "--ckpt", str(run / "checkpoints" / "last.ckpt"),
                 "--out", str(tmp_path / "i"), *SMALL]) == 0
    assert (tmp_path / "i" / "interp.csv").is_file()
    # fresh-init backbone is a valid probe baseline
    assert main(["probe", "--data", str(data), "--out", str(tmp_path / "p"), "--set", "eval.probe_steps=3",
                 "--set", "eval.probe_windows=1", *SMALL]) == 0
    report = json.loads((tmp_path / "p" / "probe.json").read_text())
    assert 0 <= report["R@30"] <= 1


def test_checkpoint_mismatch_exit_4(workspace, tmp_path, capsys):
    _, data, run = workspace
    code = main(["eval", "--data", str(data), "--ckpt", str(run / "checkpoints" / "last.ckpt"),
                 "--out", str(tmp_path), "--set", "model.dim=32", *SMALL])
    assert code == 4
    err = capsys.readouterr().err
    assert "(1, 32)" in err and "(1, 64)" in err


def test_ablate_flag(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / "ab"
    assert main(["train", "--data", str(data), "--out", str(out), "--ablate", "latent-camera", *SMALL,
                 "--set", "train.total_iters=2", "--set", "train.warmup_iters=1", "--set", "train.batch_size=1"]) == 0
    assert json.loads((out / "run.json").read_text())["model.conditioning"] == "latent-camera"


def test_divergence_exit_3(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / "div"
    code = main(["train", "--data", str(data), "--out", str(out), *SMALL, "--set", "train.total_iters=3",
                 "--set", "train.warmup_iters=1", "--set", "train.batch_size=1", "--set", "train.peak_lr=1e30",
                 "--set", "train.final_lr=1e30", "--set", "train.grad_clip=1e30"])
    assert code == 3
    assert (out / "checkpoints" / "last.ckpt").is_file()


def test_env_var_data_root(workspace, tmp_path, monkeypatch):
    _, data, run = workspace
    monkeypatch.setenv("RAYZER_LAB_DATA", str(data))
    assert main(["eval", "--ckpt", str(run / "checkpoints" / "last.ckpt"), "--out", str(tmp_path), *SMALL]) == 0
    monkeypatch.setenv("RAYZER_LAB_DATA", str(tmp_path / "none"))
    assert main(["eval", "--ckpt", str(run / "checkpoints" / "last.ckpt"), "--out", str(tmp_path), *SMALL]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "rayzer_lab", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout
