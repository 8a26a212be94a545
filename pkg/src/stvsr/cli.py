"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 I/O error,
4 numerical failure (a NaN or infinity in a loss or an output).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, load_config, seed_stream, with_seed

log = logging.getLogger("stvsr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class NumericalError(FloatingPointError):
    pass


def _figure_path(out) -> Path:
    return Path(out).with_suffix(".png")


def cmd_synth_data(args, cfg: PipelineConfig) -> int:
    from .datagen import corpus_spec, generate_clip
    from .video import save_rvid, write_rvid

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        s = seed_stream(cfg.seed, "synth", i)
        clip = generate_clip(corpus_spec(s, args.frames, args.height, args.width, args.channels, args.max_speed))
        save_rvid(clip.video, out / f"clip{i:04d}.rvid", dtype=args.dtype)
        write_rvid(clip.sidecar(), out / f"clip{i:04d}.flow.rvid", dtype="f32")
        print(f"clip{i:04d}\t{clip.video.shape[0]}\t{clip.video.shape[1]}\t{clip.video.shape[2]}\t{len(clip.shapes)}")
    return EXIT_OK


def cmd_degrade(args, cfg: PipelineConfig) -> int:
    from .degrade import draw_sigmas, make_pair
    from .video import load_rvid, save_rvid

    hq = load_rvid(args.input)
    lq, _ = make_pair(hq, cfg.degrade)
    save_rvid(lq, args.out, dtype=args.dtype)
    blur, noise = draw_sigmas(cfg.degrade)
    print(f"shape\t{'x'.join(map(str, lq.shape))}\nblur_sigma\t{blur!r}\nnoise_sigma\t{noise!r}")
    return EXIT_OK


def cmd_flow(args, cfg: PipelineConfig) -> int:
    from .flow import estimate_flow
    from .video import load_png, write_rvid

    a, b = load_png(args.a), load_png(args.b)
    flow = estimate_flow(a, b, cfg.flow)
    write_rvid(flow[None], args.out, dtype="f32")
    mag = np.hypot(flow[..., 0], flow[..., 1])
    print(f"mean_magnitude\t{float(mag.mean())!r}\nmax_magnitude\t{float(mag.max())!r}")
    return EXIT_OK


def cmd_restore(args, cfg: PipelineConfig) -> int:
    from .datagen import split_sidecar
    from .pipeline import restore
    from .training import load_checkpoint
    from .video import load_rvid, read_rvid, save_rvid

    model, manifest = load_checkpoint(args.checkpoint, scales=cfg.scales if args.config else None)
    lq = load_rvid(args.input)
    key_fwd = key_bwd = None
    if args.flows:
        key_fwd, key_bwd = split_sidecar(read_rvid(args.flows))
    out = restore(model, lq, key_fwd, key_bwd, cfg.flow)
    if not np.all(np.isfinite(out)):
        raise NumericalError("restored video contains non-finite values")
    save_rvid(out, args.out, dtype=args.dtype)
    print(f"shape\t{'x'.join(map(str, out.shape))}\ncheckpoint_steps\t{manifest.get('steps_done')}")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .plotting import plot_training
    from .training import DirectoryCorpus, SyntheticCorpus, train

    if args.iters is not None:
        cfg = replace(cfg, train=replace(cfg.train, iters=args.iters))
    tc = cfg.train
    if args.data:
        corpus = DirectoryCorpus(args.data, tc.crop_t, tc.crop_h, tc.crop_w, seed=cfg.seed, flow_cfg=cfg.flow)
    else:
        corpus = SyntheticCorpus(cfg.seed, tc.crop_t, tc.crop_h, tc.crop_w, cfg.model.channels)
    log_path = args.log or str(Path(args.out).with_suffix(".jsonl"))
    _, records = train(cfg, corpus, out=args.out, log_path=log_path)
    if not args.no_figures:
        plot_training(records, _figure_path(args.out))
    last = records[-1] if records else {}
    print("step\tlatent\trec\tperc\tconsis\ttotal")
    if last:
        print("\t".join([str(last["step"])] + [repr(last[k]) for k in ("latent", "rec", "perc", "consis", "total")]))
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    from .metrics import evaluate
    from .plotting import plot_report

    report = evaluate(args.restored, args.reference, args.out, cfg.flow, args.lp_seed)
    if not args.no_figures:
        plot_report(report, _figure_path(args.out))
    sys.stdout.write(Path(args.out).read_text())
    return EXIT_OK


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    from .pipeline import ABLATION_MODES, ablate, evaluate_model, heldout_items, write_ablation
    from .plotting import plot_ablation

    modes = args.modes or list(ABLATION_MODES)
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad:
        raise ConfigError(f"unknown ablation mode(s) {bad}; choose from {list(ABLATION_MODES)}")
    if args.iters is not None:
        cfg = replace(cfg, train=replace(cfg.train, iters=args.iters))
    results = ablate(modes, cfg, n_heldout=args.heldout)
    base = evaluate_model(None, heldout_items(cfg, args.heldout), cfg)
    write_ablation(results, args.out, baseline=base)
    if not args.no_figures:
        plot_ablation(results, _figure_path(args.out), baseline=base)
    sys.stdout.write(Path(args.out).read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="sectioned key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (overrides the config)")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="stvsr", parents=[common],
                                     description="Space-time video super-resolution toy pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="generate synthetic clips with true flows")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--frames", type=int, default=17)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.add_argument("--max-speed", type=int, default=1)
    p.add_argument("--dtype", choices=("u8", "f32"), default="f32")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("degrade", parents=[common], help="make a low-resolution, low-frame-rate clip")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=("u8", "f32"), default="f32")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("flow", parents=[common], help="block-matching flow between two PNG frames")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("restore", parents=[common], help="restore a degraded clip with a checkpoint")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flows", help="keyframe flow sidecar (forward then backward); estimated when absent")
    p.add_argument("--dtype", choices=("u8", "f32"), default="f32")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("train", parents=[common], help="train the toy model")
    p.add_argument("--data", help="directory of .rvid clips; synthetic clips when absent")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step metrics log (JSON lines)")
    p.add_argument("--iters", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score restored clips against references")
    p.add_argument("--restored", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lp-seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="matched-budget ablation of the aggregation arms")
    p.add_argument("--modes", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--heldout", type=int, default=8)
    p.add_argument("--iters", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args.config = getattr(args, "config", None)
    seed = getattr(args, "seed", None)

    from .losses import NonFiniteLossError
    from .metrics import InventoryError
    from .training import CheckpointError, TrainingAborted
    from .video import RvidError

    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if seed is not None:
            cfg = with_seed(cfg, seed)
        return args.func(args, cfg)
    except (NonFiniteLossError, TrainingAborted, NumericalError) as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except RvidError as e:
        log.error("bad RVID data: %s", e)
        return EXIT_IO
    except (ConfigError, CheckpointError, InventoryError, ValueError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except OSError as e:
        log.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
