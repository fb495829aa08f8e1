"""End-to-end command-line coverage, run in process through cli.main."""

import json

import numpy as np
import pytest
from PIL import Image

from vepe.cli import main

TINY = ["--image-size", "32", "--n-queries", "8", "--d-model", "16",
        "--heads", "2", "--points", "2", "--ffn-width", "32",
        "--enc-layers", "1", "--dec-layers", "1", "--stpe-layers", "1",
        "--stdme-layers", "1", "--stpd-layers", "2", "--min-keep", "3",
        "--persons", "2,2", "--epochs", "1", "--batch-size", "4"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared dataset + one trained spatial checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["generate", "--out", str(data), "--count", "3"] + TINY) == 0
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--mode", "spatial"] + TINY) == 0
    return {"root": root, "data": data, "run": run,
            "ckpt": run / "model.ckpt"}


# ----------------------------------------------------------------- generate

def test_generate_writes_clips_and_manifest(workdir, capsys):
    data = workdir["data"]
    clips = sorted(p.name for p in data.glob("*.clip"))
    assert len(clips) == 3
    manifest = (data / "MANIFEST").read_text().splitlines()
    assert manifest[0] == "VEPE-MANIFEST-1"
    assert manifest[1].startswith("split clean count 3 seed 0 image_size 32")
    listed = [l.split()[1] for l in manifest if l.startswith("clip ")]
    assert sorted(listed) == clips


def test_generate_is_reproducible(tmp_path, capsys):
    shas = []
    for sub in ("a", "b"):
        assert main(["generate", "--out", str(tmp_path / sub),
                     "--count", "2"] + TINY) == 0
        out = capsys.readouterr().out
        shas.append([l for l in out.splitlines()
                     if l.startswith("manifest sha256 ")])
    assert shas[0] == shas[1]
    a = (tmp_path / "a" / "MANIFEST").read_bytes()
    b = (tmp_path / "b" / "MANIFEST").read_bytes()
    assert a == b


def test_generate_splits_differ(tmp_path, capsys):
    outs = {}
    for split in ("clean", "blur"):
        assert main(["generate", "--out", str(tmp_path / split), "--count",
                     "1", "--split", split] + TINY) == 0
        outs[split] = (tmp_path / split / "MANIFEST").read_text()
    assert outs["clean"] != outs["blur"]
    assert "split blur" in outs["blur"]


def test_generate_count_zero_manifest_only(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "d"),
                 "--count", "0"] + TINY) == 0
    lines = (tmp_path / "d" / "MANIFEST").read_text().splitlines()
    assert len(lines) == 2
    assert list((tmp_path / "d").glob("*.clip")) == []


# -------------------------------------------------------------------- train

def test_train_writes_artifacts(workdir):
    run = workdir["run"]
    assert (run / "model.ckpt").is_file()
    assert (run / "train.log").is_file()
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["image_size"] == 32
    assert cfg["n_queries"] == 8
    log = (run / "train.log").read_text().splitlines()
    assert log[0].startswith("train mode spatial clips 3 epochs 1")
    assert any(l.startswith("epoch 1 mode spatial loss ") for l in log)
    assert log[-1] == "saved model.ckpt"


def test_train_reruns_byte_identical(workdir, tmp_path):
    data = workdir["data"]
    outs = []
    for sub in ("r1", "r2"):
        out = tmp_path / sub
        assert main(["train", "--data", str(data), "--out", str(out),
                     "--mode", "spatial"] + TINY) == 0
        outs.append(out)
    assert (outs[0] / "model.ckpt").read_bytes() == \
           (outs[1] / "model.ckpt").read_bytes()
    assert (outs[0] / "train.log").read_bytes() == \
           (outs[1] / "train.log").read_bytes()


def test_train_temporal_requires_init(workdir, capsys):
    code = main(["train", "--data", str(workdir["data"]),
                 "--out", str(workdir["root"] / "t"),
                 "--mode", "temporal"] + TINY)
    assert code == 2
    assert "--init" in capsys.readouterr().err


def test_train_temporal_from_spatial_checkpoint(workdir, tmp_path):
    out = tmp_path / "temporal"
    assert main(["train", "--data", str(workdir["data"]), "--out", str(out),
                 "--mode", "temporal", "--init", str(workdir["ckpt"])]
                + TINY) == 0
    assert (out / "model.ckpt").is_file()


def test_train_missing_manifest_fails(workdir, tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path), "--out",
                 str(tmp_path / "o")] + TINY)
    assert code == 2
    assert "MANIFEST" in capsys.readouterr().err


def test_deterministic_env_emits_artifact_lines(workdir, tmp_path,
                                                monkeypatch, capsys):
    monkeypatch.setenv("VEPE_DETERMINISTIC", "1")
    assert main(["train", "--data", str(workdir["data"]),
                 "--out", str(tmp_path / "d"), "--mode", "spatial"]
                + TINY) == 0
    out = capsys.readouterr().out
    for name in ("model.ckpt", "config.json", "train.log"):
        assert any(l.startswith(f"artifact {name} sha256 ")
                   for l in out.splitlines()), name


# --------------------------------------------------------------------- eval

def test_eval_report_and_rerun_identical(workdir, tmp_path, capsys):
    args = ["eval", "--data", str(workdir["data"]), "--ckpt",
            str(workdir["ckpt"]), "--mode", "spatial"] + TINY
    reports = []
    for sub in ("e1", "e2"):
        path = tmp_path / sub / "report.txt"
        assert main(args + ["--report", str(path)]) == 0
        reports.append(path.read_bytes())
    assert reports[0] == reports[1]
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("frames 9 instances ")
    assert out[1].endswith("Mean")
    values = out[2].split()
    assert len(values) == len(out[1].split())
    assert all(0.0 <= float(v) <= 100.0 for v in values)


def test_eval_tracking_flag(workdir, capsys):
    assert main(["eval", "--data", str(workdir["data"]), "--ckpt",
                 str(workdir["ckpt"]), "--mode", "temporal", "--tracking"]
                + TINY) == 0
    lines = capsys.readouterr().out.splitlines()
    tracked = [l for l in lines if l.startswith("tracking agreement ")]
    assert len(tracked) == 1
    assert 0.0 <= float(tracked[0].split()[-1]) <= 1.0


def test_eval_missing_checkpoint(workdir, tmp_path, capsys):
    code = main(["eval", "--data", str(workdir["data"]), "--ckpt",
                 str(tmp_path / "nope.ckpt")] + TINY)
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err


# -------------------------------------------------------------------- sweep

def test_sweep_table_schema(workdir, capsys):
    assert main(["sweep-threshold", "--data", str(workdir["data"]),
                 "--ckpt", str(workdir["ckpt"]),
                 "--thresholds", "0.1,0.3,0.5"] + TINY) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "threshold mAP retained"
    rows = [l.split() for l in lines[1:]]
    assert [r[0] for r in rows] == ["0.10", "0.30", "0.50"]
    retained = [float(r[2]) for r in rows]
    assert retained == sorted(retained, reverse=True)


def test_sweep_rejects_bad_thresholds(workdir, capsys):
    code = main(["sweep-threshold", "--data", str(workdir["data"]),
                 "--ckpt", str(workdir["ckpt"]),
                 "--thresholds", "0.2,1.7"] + TINY)
    assert code == 2
    assert "thresholds" in capsys.readouterr().err


# -------------------------------------------------------------------- infer

def test_infer_overlays_and_pose_file(workdir, tmp_path, capsys):
    clip_path = sorted(workdir["data"].glob("*.clip"))[0]
    out = tmp_path / "infer"
    # threshold 0 draws every retained pose regardless of confidence
    assert main(["infer", "--clip", str(clip_path), "--ckpt",
                 str(workdir["ckpt"]), "--out", str(out)] + TINY
                + ["--threshold", "0.0"]) == 0
    pngs = sorted(out.glob("frame-*.png"))
    assert len(pngs) == 3

    lines = (out / "poses.txt").read_text().splitlines()
    assert lines[0] == "VEPE-POSES-1"
    assert lines[1].startswith("clip ")
    frames = {}
    current = None
    for l in lines[2:]:
        parts = l.split()
        if parts[0] == "frame":
            current = int(parts[1])
            frames[current] = []
        else:
            assert parts[0] == "pose"
            ki = parts.index("kp")
            coords = np.array([float(v) for v in parts[ki + 1:]])
            assert coords.shape == (30,)
            links = parts[parts.index("links") + 1:ki]
            assert all(lk == "-" or int(lk) >= -1 for lk in links)
            frames[current].append(coords.reshape(15, 2))
    assert sorted(frames) == [0, 1, 2]

    # the last pose drawn on each frame is never painted over, so every one
    # of its joints must have a magenta marker pixel right where the pose
    # file says it is
    for t, poses in frames.items():
        img = np.asarray(Image.open(out / f"frame-{t:03d}.png")).astype(int)
        H, W = img.shape[:2]
        for x, y in poses[-1]:
            px = int(round(x * W - 0.5))
            py = int(round(y * H - 0.5))
            window = img[max(0, py - 2):py + 3, max(0, px - 2):px + 3]
            hit = ((window[:, :, 0] >= 200) & (window[:, :, 1] <= 60)
                   & (window[:, :, 2] >= 200))
            assert hit.any(), (t, x, y)


def test_infer_empty_scene_draws_nothing(workdir, tmp_path):
    data = tmp_path / "empty"
    assert main(["generate", "--out", str(data), "--count", "1"] + TINY
                + ["--persons", "0,0"]) == 0
    clip_path = sorted(data.glob("*.clip"))[0]
    out = tmp_path / "infer"
    # untrained confidence sits well below the 0.3 display threshold, so
    # the overlays must be the untouched input frames
    assert main(["infer", "--clip", str(clip_path), "--ckpt",
                 str(workdir["ckpt"]), "--out", str(out)] + TINY) == 0
    from vepe.synth import load_clip
    clip = load_clip(clip_path)
    for t in range(3):
        img = np.asarray(Image.open(out / f"frame-{t:03d}.png"))
        np.testing.assert_array_equal(img, clip.frames[t])
    lines = (out / "poses.txt").read_text().splitlines()
    assert sum(1 for l in lines if l.startswith("pose ")) >= 3


def test_infer_missing_clip(workdir, tmp_path, capsys):
    code = main(["infer", "--clip", str(tmp_path / "missing.clip"),
                 "--ckpt", str(workdir["ckpt"]),
                 "--out", str(tmp_path / "o")] + TINY)
    assert code == 2


# ---------------------------------------------------------- gradcheck, misc

def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    summary = lines[-1].split()[0]
    passed, total = summary.split("/")
    assert passed == total
    assert all(l.startswith("ok  ") for l in lines[:-1])


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_bad_tuple_flag_exits_2(workdir, capsys):
    code = main(["generate", "--out", str(workdir["root"] / "x"),
                 "--count", "1"] + TINY + ["--persons", "3"])
    assert code == 2
    assert "persons" in capsys.readouterr().err


def test_invalid_config_value_exits_2(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "x"), "--count", "1",
                 "--threshold", "1.5"] + TINY)
    assert code == 2


def test_config_file_with_flag_override(workdir, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    run = tmp_path / "run"
    cfg_path.write_text(json.dumps({"image_size": 32, "n_queries": 8,
                                    "d_model": 16, "heads": 2, "points": 2,
                                    "ffn_width": 32, "enc_layers": 1,
                                    "dec_layers": 1, "stpe_layers": 1,
                                    "stdme_layers": 1, "stpd_layers": 2,
                                    "min_keep": 3, "persons": [2, 2],
                                    "epochs": 3, "batch_size": 4}))
    assert main(["train", "--data", str(workdir["data"]), "--out", str(run),
                 "--config", str(cfg_path), "--epochs", "1"]) == 0
    saved = json.loads((run / "config.json").read_text())
    assert saved["epochs"] == 1           # flag wins over file
    assert saved["d_model"] == 16         # file field survives
