"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("erlhead")

ABLATIONS = {"deform": "deform", "perceptual": "perceptual", "dual-branch": "dual_branch"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--iters", type=int, help="training iterations / steps")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[],
                        help="switch off one component; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="erlhead", description="Desk-scale talking-head pipeline: DBF-NeRF and motion codebooks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    sub.add_parser("make-scene", parents=[common], help="write a synthetic scene (PPM frames + manifest)")
    sub.add_parser("train-nerf", parents=[common], help="train the dual-branch NeRF renderer")
    r = sub.add_parser("render", parents=[common], help="render PPM frames from a checkpoint and a track")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--track", help="MotionFrame track (JSON); defaults to the configured scene")
    f = sub.add_parser("fit-codebook", parents=[common], help="train the two VQ motion spaces")
    f.add_argument("--sequence", action="append", default=[],
                   help="expression or delta_pose sequence file; synthetic ones are used for missing kinds")
    g = sub.add_parser("gen-sequence", parents=[common], help="generate coefficients from audio with the ADF stage")
    g.add_argument("--vq", required=True, help="checkpoint written by fit-codebook")
    g.add_argument("--adf", help="trained generator checkpoint; otherwise one is trained for --iters steps")
    g.add_argument("--audio", help="(n, audio_dim) features as .npy or CSV; defaults to synthetic audio")
    sub.add_parser("check-grad", parents=[common], help="run the finite-difference gradient suites")
    m = sub.add_parser("metrics", parents=[common], help="PSNR/SSIM between matching PPMs of two directories")
    m.add_argument("reference")
    m.add_argument("test")
    return p


# ------------------------------------------------------------------ helpers
def _threads() -> int | None:
    raw = os.environ.get("ERL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ERL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ERL_THREADS must be a positive integer, got {raw!r}")
    return n


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def resolve_config(args):
    from .config import RunConfig, load_config, with_section

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
        cfg = with_section(cfg, "train", seed=args.seed)
    if args.iters is not None:
        if args.iters < 0:
            raise UsageError("--iters must be >= 0")
        cfg = with_section(cfg, "train", iters=args.iters)
        cfg = with_section(cfg, "motion", vq_steps=args.iters, adf_steps=args.iters)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    for name in args.ablate:
        cfg = with_section(cfg, "train", **{ABLATIONS[name]: False})
    return cfg


def _out_dir(cfg) -> Path:
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _scene(cfg):
    from .synthetic import load_scene, make_synthetic_scene

    s = cfg.scene
    if s.path:
        return load_scene(s.path)
    seed = cfg.seed if s.seed is None else int(s.seed)
    return make_synthetic_scene(seed, s.frames, s.size)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[repr(v) if isinstance(v, float) else v for v in row] for row in rows])


def _workers(cfg, threads):
    return cfg.render.workers if threads is None else max(1, min(cfg.render.workers, threads))


# ------------------------------------------------------------------ commands
def cmd_make_scene(args, cfg, threads):
    from .synthetic import export_scene

    scene = _scene(cfg)
    manifest = export_scene(scene, _out_dir(cfg))
    print(f"wrote {len(scene)} frames ({scene.size}px) and {manifest}")


def cmd_train_nerf(args, cfg, threads):
    from .checkpoint import save_checkpoint
    from .config import dump_config
    from .metrics import image_metrics
    from .plotting import plot_loss_rows
    from .training import init_pipeline, render_image, train_dbf_nerf, write_loss_csv

    out = _out_dir(cfg)
    pcfg = cfg.pipeline_config()
    scene = _scene(cfg)
    tcfg = cfg.train
    store = init_pipeline(pcfg, tcfg.seed)

    def on_log(row):
        log.info("iter %d  L_pho %.6f  L_per %.6f  total %.6f", row.iteration, row.photometric, row.perceptual,
                 row.total)

    store, rows = train_dbf_nerf(scene, pcfg, tcfg, store=store, on_log=on_log)
    (out / "config.yaml").write_text(dump_config(cfg))
    save_checkpoint(store, out / "model.erlc")
    write_loss_csv(rows, out / "loss.csv")
    if rows:
        plot_loss_rows(rows, out / "loss.png", title="DBF-NeRF training")
    scores = []
    for i, frame in enumerate(scene.frames):
        img = render_image(store, pcfg, frame, scene.frames[0].pose, scene.background,
                           scene.head_mask_at(i, pcfg.intrinsics.height), tcfg, chunk=cfg.render.chunk,
                           workers=_workers(cfg, threads))
        scores.append((i,) + image_metrics(img, scene.images[i]))
    _write_rows(out / "metrics.csv", ["frame", "psnr", "ssim"], scores)
    mean_psnr = float(np.mean([s[1] for s in scores]))
    print(f"trained {tcfg.iters} iterations; mean PSNR {mean_psnr:.2f} dB; outputs in {out}")


def cmd_render(args, cfg, threads):
    from .checkpoint import load_checkpoint
    from .imageio import write_ppm
    from .synthetic import load_track
    from .training import render_image

    ckpt = Path(args.checkpoint)
    sidecar = ckpt.parent / "config.yaml"
    if not args.config and sidecar.exists():
        cfg = resolve_config(argparse.Namespace(**{**vars(args), "config": str(sidecar)}))
    store = load_checkpoint(ckpt)
    scene = _scene(cfg)
    track = args.track or cfg.scene.track
    frames = load_track(track) if track else scene.frames
    pcfg = cfg.pipeline_config()
    out = _out_dir(cfg)
    for i, frame in enumerate(frames):
        img = render_image(store, pcfg, frame, frames[0].pose, scene.background, None, cfg.train,
                           chunk=cfg.render.chunk, workers=_workers(cfg, threads))
        write_ppm(out / f"frame_{i:04d}.ppm", img)
    print(f"rendered {len(frames)} frames to {out}")


def _sequences(paths, cfg):
    from .motion import DELTA_POSE, EXPRESSION, load_sequence
    from .synthetic import make_synthetic_sequences

    found = {}
    for p in paths:
        seq = load_sequence(p)
        if seq.kind in found:
            raise ValueError(f"two {seq.kind} sequences given")
        found[seq.kind] = seq
    exp, pose = make_synthetic_sequences(cfg.seed, cfg.motion.seq_frames)
    return found.get(EXPRESSION, exp), found.get(DELTA_POSE, pose)


def cmd_fit_codebook(args, cfg, threads):
    from .checkpoint import save_checkpoint
    from .motion import codebook_usage, fit_vq_stage, reconstruction_mse, save_sequence
    from .plotting import plot_curves

    out = _out_dir(cfg)
    exp_seq, pose_seq = _sequences(args.sequence, cfg)
    store, rows = fit_vq_stage(exp_seq, pose_seq, cfg.motion, cfg.train, cfg.seed)
    save_checkpoint(store, out / "vq.erlc")
    save_sequence(exp_seq, out / "expression.json")
    save_sequence(pose_seq, out / "delta_pose.json")
    _write_rows(out / "vq_loss.csv", ["space", "step", "loss", "mse"], rows)
    if rows:
        curves = {kind: ([r[1] for r in rows if r[0] == kind], [r[3] for r in rows if r[0] == kind])
                  for kind in (exp_seq.kind, pose_seq.kind)}
        plot_curves(curves, out / "vq_loss.png", ylabel="reconstruction MSE", xlabel="step")
    summary = [(s.kind, reconstruction_mse(s, store, cfg.motion), codebook_usage(s, store, cfg.motion))
               for s in (exp_seq, pose_seq)]
    _write_rows(out / "vq_summary.csv", ["space", "mse", "codes_used"], summary)
    for kind, mse, used in summary:
        print(f"{kind}: reconstruction MSE {mse:.3g}, {used} codebook entries used")


def cmd_gen_sequence(args, cfg, threads):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .fields import N_JAW, MotionFrame
    from .motion import (DELTA_POSE, EXPRESSION, CoeffSequence, adf_generate, delta_decode, init_adf_params,
                         load_sequence, save_sequence, train_adf)
    from .plotting import plot_curves
    from .synthetic import make_adf_dataset, save_track

    mcfg = cfg.motion
    out = _out_dir(cfg)
    vq = load_checkpoint(args.vq)
    vq.freeze()
    vq_dir = Path(args.vq).parent
    seqs = None
    if (vq_dir / "expression.json").exists() and (vq_dir / "delta_pose.json").exists():
        seqs = [(load_sequence(vq_dir / "expression.json"), load_sequence(vq_dir / "delta_pose.json"))]
    samples, emb = make_adf_dataset(cfg.seed, 1, mcfg.seq_frames, mcfg.audio_dim, mcfg.mouth_dims, mcfg.embed_dim,
                                    sequences=seqs)
    if args.adf:
        adf = load_checkpoint(args.adf)
    else:
        from .tensor import ParamStore

        adf = ParamStore()
        init_adf_params(adf, mcfg, np.random.default_rng(cfg.seed))
        rows = train_adf(samples, adf, vq, emb, mcfg, cfg.train)
        save_checkpoint(adf, out / "adf.erlc")
        _write_rows(out / "adf_loss.csv", ["step", "L_f", "L_c", "total"], rows)
        if rows:
            plot_curves({"total": ([r[0] for r in rows], [r[3] for r in rows])}, out / "adf_loss.png",
                        xlabel="step")
    if args.audio:
        path = Path(args.audio)
        audio = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", ndmin=2)
    else:
        audio = samples[0][0]
    _, style_exp, style_pose = samples[0]
    from . import tensor as T

    with T.no_grad():
        res = adf_generate(audio, (style_exp, style_pose), adf, vq, mcfg)
    exp = CoeffSequence(EXPRESSION, res.expression.data, style_exp.fps, emotion=style_exp.emotion)
    dpose = CoeffSequence(DELTA_POSE, res.delta_pose.data, style_pose.fps, first_pose=style_pose.first_pose)
    save_sequence(exp, out / "expression.json")
    save_sequence(dpose, out / "delta_pose.json")
    poses = delta_decode(dpose.first_pose, dpose.frames)
    frames = [MotionFrame(exp.frames[i], poses[i], np.zeros(N_JAW), exp.emotion) for i in range(exp.length)]
    save_track(frames, out / "track.json")
    print(f"generated {exp.length} frames; sequences and track.json in {out}")


def cmd_check_grad(args, cfg, threads):
    from .gradcheck import run_all

    results = run_all(cfg.seed)
    worst = sorted(results.items(), key=lambda kv: -kv[1])
    for name, err in worst:
        print(f"{name:24s} {err:.3e}")
    name, err = worst[0]
    print(f"max relative error {err:.3e} ({name})")
    if err >= 1e-3:
        raise RuntimeError(f"gradient check failed: {name} relative error {err:.3e} >= 1e-3")


def cmd_metrics(args, cfg, threads):
    from .imageio import read_ppm
    from .metrics import image_metrics
    from .plotting import plot_metric_bars

    ref, test = Path(args.reference), Path(args.test)
    for d in (ref, test):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    names = sorted(p.name for p in ref.glob("*.ppm") if (test / p.name).exists())
    if not names:
        raise ValueError(f"no matching .ppm files in {ref} and {test}")
    rows = [(n,) + image_metrics(read_ppm(test / n), read_ppm(ref / n)) for n in names]
    out = _out_dir(cfg)
    _write_rows(out / "metrics.csv", ["file", "psnr", "ssim"], rows)
    finite = {n: min(p, 99.0) for n, p, _ in rows}
    plot_metric_bars(finite, out / "metrics_psnr.png", "PSNR (dB)")
    for n, p, s in rows:
        print(f"{n}  PSNR {p:.3f} dB  SSIM {s:.5f}")
    print(f"mean PSNR {np.mean([min(r[1], 99.0) for r in rows]):.3f} dB, mean SSIM {np.mean([r[2] for r in rows]):.5f}")


COMMANDS = {
    "make-scene": cmd_make_scene,
    "train-nerf": cmd_train_nerf,
    "render": cmd_render,
    "fit-codebook": cmd_fit_codebook,
    "gen-sequence": cmd_gen_sequence,
    "check-grad": cmd_check_grad,
    "metrics": cmd_metrics,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = _threads()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit(threads):
            COMMANDS[args.command](args, cfg, threads)
    except UsageError as exc:
        print(f"erlhead: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, KeyError, FloatingPointError) as exc:
        print(f"erlhead {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())
