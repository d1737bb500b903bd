import hashlib
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from erlhead.checkpoint import load_checkpoint
from erlhead.cli import run_cli
from erlhead.config import load_config
from erlhead.training import init_pipeline


@pytest.fixture(scope="module")
def tiny(repo):
    return str(repo / "tests" / "data" / "tiny.yaml")


def _digest_tree(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


def test_check_grad_seed_7(capsys):
    assert run_cli(["check-grad", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    worst = float(out.strip().splitlines()[-1].split()[3])
    assert worst < 1e-3


def test_unknown_subcommand_is_usage_error(capsys):
    assert run_cli(["fly"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_required_flag_and_bad_iters(capsys):
    assert run_cli(["render"]) == 1
    assert run_cli(["train-nerf", "--iters", "-1"]) == 1
    assert run_cli(["train-nerf", "--ablate", "everything"]) == 1


def test_bad_config_exits_2_with_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\ntrain:\n  warp: 3\n")
    assert run_cli(["train-nerf", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_bad_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("ERL_THREADS", "zero")
    assert run_cli(["check-grad"]) == 1


def test_zero_iterations_saves_initialisation(tmp_path, tiny):
    assert run_cli(["train-nerf", "--config", tiny, "--iters", "0", "--out", str(tmp_path)]) == 0
    cfg = load_config(tiny)
    init = init_pipeline(cfg.pipeline_config(), cfg.train.seed)
    saved = load_checkpoint(tmp_path / "model.erlc")
    assert saved.names() == init.names()
    assert all(np.array_equal(saved[n].data, init[n].data) for n in init.names())
    assert (tmp_path / "loss.csv").read_text().strip() == "iteration,L_pho,L_per,total"


def _pipeline(root, tiny):
    scene, run, frames = root / "scene", root / "run", root / "frames"
    assert run_cli(["make-scene", "--config", tiny, "--out", str(scene)]) == 0
    assert run_cli(["train-nerf", "--config", tiny, "--iters", "4", "--out", str(run)]) == 0
    assert run_cli(["render", "--checkpoint", str(run / "model.erlc"), "--track", str(scene / "manifest.json"),
                    "--out", str(frames)]) == 0
    return scene, run, frames


def test_every_subcommand_and_byte_identical_reruns(tmp_path, tiny, monkeypatch):
    outs = []
    for k in range(2):
        # same relative --out each time, so the recorded config is identical too
        (tmp_path / f"r{k}").mkdir()
        monkeypatch.chdir(tmp_path / f"r{k}")
        root = Path(".")
        scene, run, frames = _pipeline(root, tiny)
        assert {"model.erlc", "loss.csv", "loss.png", "metrics.csv", "config.yaml"} <= set(os.listdir(run))
        assert sorted(os.listdir(frames)) == ["frame_0000.ppm", "frame_0001.ppm"]
        vq, gen, met = root / "vq", root / "gen", root / "m"
        assert run_cli(["fit-codebook", "--config", tiny, "--iters", "20", "--out", str(vq)]) == 0
        assert run_cli(["gen-sequence", "--config", tiny, "--iters", "10", "--vq", str(vq / "vq.erlc"),
                        "--out", str(gen)]) == 0
        assert {"adf.erlc", "adf_loss.csv", "adf_loss.png", "expression.json", "delta_pose.json",
                "track.json"} <= set(os.listdir(gen))
        assert run_cli(["metrics", str(scene), str(frames), "--out", str(met)]) == 0
        outs.append([_digest_tree(d) for d in (scene, run, frames, vq, gen, met)])
    assert outs[0] == outs[1]


def test_generated_track_renders(tmp_path, tiny):
    scene, run, _ = _pipeline(tmp_path, tiny)
    vq, gen = tmp_path / "vq", tmp_path / "gen"
    assert run_cli(["fit-codebook", "--config", tiny, "--iters", "5", "--out", str(vq)]) == 0
    assert run_cli(["gen-sequence", "--config", tiny, "--iters", "3", "--vq", str(vq / "vq.erlc"),
                    "--out", str(gen)]) == 0
    assert run_cli(["gen-sequence", "--config", tiny, "--vq", str(vq / "vq.erlc"), "--adf", str(gen / "adf.erlc"),
                    "--out", str(tmp_path / "gen2")]) == 0
    assert (gen / "track.json").read_bytes() == (tmp_path / "gen2" / "track.json").read_bytes()
    assert run_cli(["render", "--checkpoint", str(run / "model.erlc"), "--track", str(gen / "track.json"),
                    "--out", str(tmp_path / "talk")]) == 0
    assert len(os.listdir(tmp_path / "talk")) == 8


def test_ablations_run(tmp_path, tiny):
    for flag in ("deform", "perceptual", "dual-branch"):
        assert run_cli(["train-nerf", "--config", tiny, "--iters", "2", "--ablate", flag,
                        "--out", str(tmp_path / flag)]) == 0
    assert "deform: false" in (tmp_path / "deform" / "config.yaml").read_text()


def test_metrics_errors(tmp_path):
    assert run_cli(["metrics", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    assert run_cli(["metrics", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "o")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "erlhead", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("erlhead ")
