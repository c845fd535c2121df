"""Command-line surface.

    causalclean <mode> --config <path> [--seed N] [--deterministic]

Modes: train, restore, degrade, profile, gradcheck, selftest. Exit codes:
0 success, 2 validation/config error, 3 I/O error, 4 numerical failure.
Every command is deterministic for a fixed seed; the engine always runs a
single fixed accumulation order, so --deterministic is recorded in run
metadata but enables no extra machinery.
"""

import argparse
import os
import sys
import time

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import (DegradationSpec, degrade, draw_sigma, measure, psnr,
                   sample_clips, synthetic_clip, ssim)
from .fileio import (FileFormatError, list_videos, load_checkpoint,
                     load_frames, save_checkpoint, save_frames)
from .gradcheck import run_gradient_suite
from .macs import count_macs
from .model import ModelConfig, RestorationModel
from .tensor import NumericalError, ShapeError, Tensor
from .train import Trainer, build_pairs

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

FULL_SIZE_REFERENCE_GMACS = 181.06  # published full-size budget at 256x256


def _load_videos(path):
    sources = list_videos(path)
    videos = [load_frames(s) for s in sources]
    if not videos:
        raise FileFormatError(f"no videos under {path}")
    return videos


def _checkpoint_payload(trainer, run):
    config = dict(run.model.to_dict())
    config["patch"] = ",".join(str(p) for p in config["patch"])
    config.update({
        "seed": run.seed,
        "iterations": run.optimizer.iterations,
        "lr_init": run.optimizer.lr_init,
        "lr_final": run.optimizer.lr_final,
        "crop": run.optimizer.crop,
        "deterministic": str(run.deterministic).lower(),
    })
    return trainer.state_arrays(), config


def _model_config_from_header(header):
    fields = {}
    for key, caster in (("stages", int), ("base_width", int), ("in_channels", int),
                        ("enc_blocks", int), ("chm_blocks", int), ("tau", int),
                        ("k", int), ("gamma", int), ("heads", int),
                        ("chm_placement", str), ("topk_mode", str),
                        ("precision", str), ("ffn_expansion", int)):
        if key in header:
            fields[key] = caster(header[key])
    if header.get("patch"):
        fields["patch"] = tuple(int(p) for p in header["patch"].split(","))
    return ModelConfig(**fields)


def _check_model_config_matches(run, header_cfg):
    from .config import MODEL_KEYS
    explicit = run.explicit & set(MODEL_KEYS)
    if not explicit:
        return
    stated = run.model.to_dict()
    stored = header_cfg.to_dict()
    for key in explicit:
        if stated[key] != stored[key]:
            raise ConfigError(
                f"config sets {key} = {stated[key]} but the checkpoint was "
                f"built with {key} = {stored[key]}")


def cmd_train(run):
    if not run.frames_dir:
        raise ConfigError("train mode needs frames_dir (clean videos)")
    if run.degradation is None:
        raise ConfigError("train mode needs a degradation (degradation = ...)")
    videos = _load_videos(run.frames_dir)
    pairs = build_pairs(videos, run.degradation, run.seed)
    model = RestorationModel(run.model, seed=run.seed)
    trainer = Trainer(model, pairs, run.optimizer, master_seed=run.seed)
    if run.checkpoint and os.path.exists(run.checkpoint):
        arrays, header = load_checkpoint(run.checkpoint)
        _check_model_config_matches(run, _model_config_from_header(header))
        trainer.load_state_arrays(arrays)
        print(f"resumed from {run.checkpoint} at iteration {trainer.iteration}")
    os.makedirs(run.out_dir, exist_ok=True)
    log_path = os.path.join(run.out_dir, "train.log")
    ckpt_path = os.path.join(run.out_dir, "checkpoint.cckp")
    with open(log_path, "a", encoding="utf-8") as log_file:
        def log(line):
            print(line)
            log_file.write(line + "\n")

        while trainer.iteration < run.optimizer.iterations:
            chunk = min(run.save_every,
                        run.optimizer.iterations - trainer.iteration)
            trainer.run(iterations=chunk, log=log)
            arrays, config = _checkpoint_payload(trainer, run)
            save_checkpoint(ckpt_path, arrays, config)
            log(f"checkpoint {ckpt_path} @ iteration {trainer.iteration}")
    return EXIT_OK


def _load_model_from_checkpoint(run):
    if not run.checkpoint:
        raise ConfigError("restore mode needs checkpoint = <path>")
    arrays, header = load_checkpoint(run.checkpoint)
    header_cfg = _model_config_from_header(header)
    _check_model_config_matches(run, header_cfg)
    model = RestorationModel(header_cfg, seed=int(header.get("seed", 0)))
    model.load_params({n[len("param."):]: a for n, a in arrays.items()
                       if n.startswith("param.")})
    return model


def cmd_restore(run):
    if not run.frames_dir:
        raise ConfigError("restore mode needs frames_dir (degraded frames)")
    model = _load_model_from_checkpoint(run)
    clip = load_frames(run.frames_dir)
    dtype = model.config.dtype
    restored = []
    for piece in sample_clips(clip, model.config.gamma):
        restored.append(model.restore_clip(Tensor(piece.astype(dtype))).data)
    restored = np.concatenate(restored, axis=0)
    out_frames = os.path.join(run.out_dir, "frames")
    save_frames(restored, out_frames)
    print(f"restored {restored.shape[0]} frames -> {out_frames}")
    if run.gt_dir:
        gt = load_frames(run.gt_dir)
        if gt.shape != restored.shape:
            raise FileFormatError(f"ground truth {gt.shape} does not match "
                                  f"restored {restored.shape}")
        report = measure(restored, gt, mode=run.metrics_mode)
        lines = report.lines()
        os.makedirs(run.out_dir, exist_ok=True)
        with open(os.path.join(run.out_dir, "metrics.txt"), "w") as f:
            f.write("\n".join(lines) + "\n")
        for line in lines:
            print(line)
    return EXIT_OK


def cmd_degrade(run):
    if not run.frames_dir:
        raise ConfigError("degrade mode needs frames_dir")
    if run.degradation is None:
        raise ConfigError("degrade mode needs a degradation (degradation = ...)")
    clip = load_frames(run.frames_dir)
    out = degrade(clip, run.degradation)
    out_frames = os.path.join(run.out_dir, "frames")
    save_frames(out, out_frames)
    if run.degradation.kind == "gaussian_noise":
        print(f"sigma = {draw_sigma(run.degradation):.3f}")
    print(f"degraded {out.shape[0]} frames -> {out_frames}")
    return EXIT_OK


def cmd_profile(run):
    print(f"{'resolution':>12s} {'per-frame ms':>14s} {'MACs (G)':>10s}")
    first_report = None
    for h, w in run.resolutions:
        report = count_macs(run.model, (h, w))
        first_report = first_report or report
        model = RestorationModel(run.model, seed=run.seed)
        clip = Tensor(np.random.default_rng(run.seed)
                      .random((2, run.model.in_channels, h, w))
                      .astype(run.model.dtype))
        model.restore_clip(clip)  # warm caches
        start = time.perf_counter()
        model.restore_clip(clip)
        per_frame = (time.perf_counter() - start) / clip.shape[0] * 1e3
        print(f"{h}x{w:>7d} {per_frame:>14.1f} {report.gmacs:>10.4f}")
    print()
    print(f"comparison: full-size reference model budget is "
          f"{FULL_SIZE_REFERENCE_GMACS:.2f} G at 256x256")
    print()
    print("per-layer breakdown (first resolution):")
    for line in first_report.lines():
        print(line)
    return EXIT_OK


def cmd_gradcheck(run):
    results = run_gradient_suite(seed=run.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_OK if not failed else EXIT_NUMERICAL


def cmd_selftest(run):
    """Fast invariants end to end; one pass/fail line each."""
    from . import ops
    from .tensor import Tape
    checks = []

    def check(name, fn):
        try:
            ok = bool(fn())
        except Exception as e:  # a crash is a failure, not an abort
            print(f"FAIL  {name}: {e}")
            checks.append(False)
            return
        print(f"{'pass' if ok else 'FAIL'}  {name}")
        checks.append(ok)

    rng = np.random.default_rng(run.seed)

    check("softmax rows normalize", lambda: np.allclose(
        ops.softmax(Tensor(rng.normal(size=(5, 7))), axis=1).data.sum(axis=1),
        1.0, atol=1e-6))

    x = rng.normal(size=(4, 6))
    check("topk(k=full) is identity", lambda: np.array_equal(
        ops.topk_mask(Tensor(x), 6, axis=1).data, x))

    y = rng.normal(size=(4, 8, 6)).astype(np.float32)
    check("pixel shuffle roundtrip", lambda: np.array_equal(
        ops.pixel_shuffle(ops.pixel_unshuffle(Tensor(y), 2), 2).data, y))

    check("psnr 0.1 offset = 20 dB", lambda: abs(
        psnr(np.full((3, 8, 8), 0.3), np.full((3, 8, 8), 0.4)) - 20.0) < 1e-9)

    probe = rng.random((1, 16, 16))
    check("ssim self = 1", lambda: abs(ssim(probe, probe.copy()) - 1.0) < 1e-9)

    clip = synthetic_clip(seed=run.seed, frames=3, size=16)
    spec = DegradationSpec("gaussian_noise", 30.0, 30.0, seed=run.seed)
    check("degradation deterministic", lambda: np.array_equal(
        degrade(clip, spec), degrade(clip, spec)))

    cfg = ModelConfig(stages=2, base_width=4, enc_blocks=1, chm_blocks=1,
                      tau=2, k=2, gamma=3, patch=(2, 2))
    model = RestorationModel(cfg, seed=run.seed)
    frame_clip = Tensor(clip.astype(np.float32))
    check("fresh model is identity", lambda: np.array_equal(
        model.restore_clip(frame_clip).data, frame_clip.data))
    check("restore is deterministic", lambda: np.array_equal(
        model.restore_clip(frame_clip).data, model.restore_clip(frame_clip).data))

    def grad_smoke():
        p = Tensor(rng.normal(size=(3, 3)), watched=True)
        with Tape() as tape:
            grads = tape.backward(ops.tsum(ops.mul(p, p)))
        return np.allclose(grads[p], 2 * p.data, atol=1e-6)

    check("backward sanity", grad_smoke)
    print(f"{sum(checks)}/{len(checks)} self-test checks passed")
    return EXIT_OK if all(checks) else EXIT_NUMERICAL


COMMANDS = {
    "train": cmd_train,
    "restore": cmd_restore,
    "degrade": cmd_degrade,
    "profile": cmd_profile,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="causalclean",
        description="Causal-history video restoration: train, restore, "
                    "degrade, profile, gradcheck, selftest.")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in COMMANDS:
        p = sub.add_parser(mode)
        p.add_argument("--config", default="", help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--deterministic", action="store_true",
                       help="record deterministic mode (always on internally)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run = load_config(args.config) if args.config else RunConfig(mode=args.mode)
        if run.mode and run.mode != args.mode:
            raise ConfigError(f"config file says mode = {run.mode}, "
                              f"command line says {args.mode}")
        run.mode = args.mode
        if args.seed is not None:
            run.seed = args.seed
            run.optimizer.seed = args.seed
            if run.degradation is not None:
                run.degradation.seed = args.seed
        if args.deterministic:
            run.deterministic = True
        return COMMANDS[args.mode](run)
    except (ConfigError, ShapeError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileFormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
