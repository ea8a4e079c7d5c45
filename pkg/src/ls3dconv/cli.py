"""Command-line harness: train, eval, gradcheck, ablate, viz, bench.

Configuration is flat ``key = value`` text ('#' comments), overridable
with repeated ``--set key=value``; unknown keys are rejected. Every run
echoes the fully-resolved configuration and announces each artifact file
it writes.

Exit codes: 0 ok, 2 config error, 3 shape/task error, 4 numeric failure,
5 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .conv3d import Conv3dParams, conv3d_ref
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .gradcheck import gradcheck
from .ls3d import Ls3dConv, ls3d_forward, num_taps
from .net import Conv3dLayer, NetworkSpec, ResBlock, build_net, make_ls3d_layer
from .train import (TrainConfig, evaluate, load_checkpoint, make_dataset,
                    save_checkpoint, train_loop, write_loss_csv)
from .metrics import write_eval_csv
from .viz import emit_map_image, sampling_map

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SHAPE = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{s}'")


# key -> (parser, default). Defaults are the desk-scale experiment setup.
SCHEMA: dict = {
    "net.channels": (int, 32),
    "net.num_resblocks": (int, 6),
    "net.ls3d_blocks": (str, ""),            # "", "all", or "1,2,..."
    "net.temporal_deconv_after": (str, "auto"),
    "net.task": (str, "interpolate"),
    "net.branch_kernel": (int, 3),
    "net.encoder_relu": (_bool, True),
    "net.deconv_relu": (_bool, True),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 2),
    "train.learning_rate": (float, 1e-3),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.seed": (int, 0),
    "train.eval_every": (int, 5),
    "train.clips": (int, 16),
    "train.eval_clips": (int, 8),
    "train.grad_clip": (float, 10.0),
    "data.size": (int, 32),
    "data.num_frames": (int, 5),
    "data.motion": (float, 4.0),
    "data.num_objects": (int, 2),
    "data.noise_sigma": (float, 0.0),
    "data.background_freq": (float, 0.08),
    "eval.checkpoint": (str, ""),
    "viz.checkpoint": (str, ""),
    "viz.frame": (int, -1),                   # -1: middle output frame
    "viz.row": (int, -1),
    "viz.col": (int, -1),
    "ablate.seeds": (int, 3),
    "bench.channels": (int, 8),
    "bench.size": (int, 16),
    "bench.frames": (int, 3),
    "bench.repeats": (int, 3),
}

ABLATION_VARIANTS: tuple[tuple[str, str], ...] = (
    ("baseline", ""),
    ("res1,2", "1,2"),
    ("res3,4", "3,4"),
    ("res5,6", "5,6"),
    ("2-LS3D", "5,6"),
    ("4-LS3D", "3,4,5,6"),
    ("6-LS3D", "all"),
)


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = {key: default for key, (_, default) in SCHEMA.items()}

    def apply(key: str, raw: str, where: str):
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key '{key}' ({where})")
        parser, _ = SCHEMA[key]
        try:
            cfg[key] = parser(raw.strip())
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{key}': {raw.strip()} ({exc})") from exc

    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{line}'")
            key, raw = line.split("=", 1)
            apply(key, raw, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        apply(key, raw, "--set")
    return cfg


def echo_config(cfg: dict) -> None:
    print("# resolved configuration")
    for key in sorted(cfg):
        print(f"{key} = {cfg[key]}")


def _parse_block_set(raw: str, num_blocks: int, what: str) -> frozenset[int]:
    raw = raw.strip().lower()
    if raw in ("", "none"):
        return frozenset()
    if raw == "all":
        return frozenset(range(1, num_blocks + 1))
    try:
        return frozenset(int(tok) for tok in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad {what} '{raw}': {exc}") from exc


def network_spec(cfg: dict, ls3d_blocks: str | None = None) -> NetworkSpec:
    n = cfg["net.num_resblocks"]
    raw_td = cfg["net.temporal_deconv_after"]
    if raw_td.strip().lower() == "auto":
        td = frozenset() if cfg["net.task"] == "denoise" else frozenset({2, 4})
    else:
        td = _parse_block_set(raw_td, n, "net.temporal_deconv_after")
    blocks_raw = cfg["net.ls3d_blocks"] if ls3d_blocks is None else ls3d_blocks
    return NetworkSpec(
        channels=cfg["net.channels"],
        num_resblocks=n,
        ls3d_block_indices=_parse_block_set(blocks_raw, n, "net.ls3d_blocks"),
        temporal_deconv_after=td,
        task=cfg["net.task"],
        branch_kernel=cfg["net.branch_kernel"],
        encoder_relu=cfg["net.encoder_relu"],
        deconv_relu=cfg["net.deconv_relu"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        seed=cfg["train.seed"],
        task=cfg["net.task"],
        clips=cfg["train.clips"],
        eval_clips=cfg["train.eval_clips"],
        size=cfg["data.size"],
        num_frames=cfg["data.num_frames"],
        motion=cfg["data.motion"],
        num_objects=cfg["data.num_objects"],
        noise_sigma=cfg["data.noise_sigma"],
        eval_every=cfg["train.eval_every"],
        grad_clip=cfg["train.grad_clip"],
    )


def _announce(path) -> None:
    print(f"wrote {path}")


# --- commands ----------------------------------------------------------------

def cmd_train(cfg: dict, out: Path) -> int:
    spec = network_spec(cfg)
    tcfg = train_config(cfg)
    net = build_net(spec, seed=tcfg.seed)
    ckpt = out / "checkpoint.ls3d"
    result = train_loop(net, tcfg, abort_checkpoint_path=ckpt)
    echo = "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg))
    save_checkpoint(ckpt, net, result.adam_state, config_echo=echo)
    _announce(ckpt)
    loss_csv = out / "loss.csv"
    write_loss_csv(loss_csv, result.loss_rows)
    _announce(loss_csv)
    eval_set = make_dataset(tcfg, tcfg.eval_clips, seed_base=900_001)
    reports = evaluate(net, eval_set)
    eval_csv = out / "eval.csv"
    write_eval_csv(eval_csv, reports)
    _announce(eval_csv)
    mean_psnr = sum(r.psnr_mean for r in reports) / len(reports)
    mean_ssim = sum(r.ssim_mean for r in reports) / len(reports)
    print(f"final loss {result.epoch_losses[-1]:.6f}, eval PSNR {mean_psnr:.2f} dB, "
          f"SSIM {mean_ssim:.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    ckpt = cfg["eval.checkpoint"] or str(out / "checkpoint.ls3d")
    spec = network_spec(cfg)
    tcfg = train_config(cfg)
    net = build_net(spec, seed=tcfg.seed)
    load_checkpoint(ckpt, net)
    print(f"loaded {ckpt}")
    eval_set = make_dataset(tcfg, tcfg.eval_clips, seed_base=900_001)
    reports = evaluate(net, eval_set)
    eval_csv = out / "eval.csv"
    write_eval_csv(eval_csv, reports)
    _announce(eval_csv)
    mean_psnr = sum(r.psnr_mean for r in reports) / len(reports)
    mean_ssim = sum(r.ssim_mean for r in reports) / len(reports)
    print(f"eval PSNR {mean_psnr:.2f} dB, SSIM {mean_ssim:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    seed = cfg["train.seed"]
    rng = np.random.default_rng(seed)
    results = []

    w = rng.standard_normal((2, 2, 3, 3, 3))
    conv = Conv3dLayer(Conv3dParams(w, rng.standard_normal(2), padding=(1, 1, 1)), "conv")
    x = rng.standard_normal((1, 2, 3, 6, 6))
    results.append(("plain conv3d", gradcheck(conv, x, seed=seed), 1e-6))

    layer = make_ls3d_layer(rng, channels=2, name="ls3d", dtype=np.float64,
                            random_branches=True)
    layer.offset_shift = 0.3
    results.append(("ls3d layer", gradcheck(layer, x, seed=seed,
                                            max_entries_per_tensor=64), 1e-4))

    spec = NetworkSpec(channels=4, num_resblocks=2, ls3d_block_indices=frozenset({2}),
                       temporal_deconv_after=frozenset({1, 2}), task="interpolate",
                       branch_kernel=1, dtype=np.float64)
    net = build_net(spec, seed=seed)
    for p in net.parameters().values():
        if np.all(p == 0):
            p += 0.1 * rng.standard_normal(p.shape)
    for l in net.layers:
        if isinstance(l, ResBlock) and isinstance(l.first, Ls3dConv):
            l.first.offset_shift = 0.3
    xb = rng.standard_normal((1, 3, 2, 8, 8))
    results.append(("end-to-end net", gradcheck(net, xb, seed=seed,
                                                max_entries_per_tensor=24), 1e-4))

    ok = True
    for name, err, tol in results:
        status = "pass" if err < tol else "FAIL"
        ok = ok and err < tol
        print(f"gradcheck {name:16s} max relative error {err:.3e} (tol {tol:.0e}) {status}")
    print(f"gradcheck overall: {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _run_variant(args) -> tuple[str, int, float, float]:
    cfg, variant, blocks, seed = args
    spec = network_spec(cfg, ls3d_blocks=blocks)
    tcfg = train_config(cfg)
    tcfg.seed = seed
    net = build_net(spec, seed=seed)
    train_loop(net, tcfg)
    eval_set = make_dataset(tcfg, tcfg.eval_clips, seed_base=900_001)
    reports = evaluate(net, eval_set)
    psnr_m = sum(r.psnr_mean for r in reports) / len(reports)
    ssim_m = sum(r.ssim_mean for r in reports) / len(reports)
    return variant, seed, psnr_m, ssim_m


def cmd_ablate(cfg: dict, out: Path, threads: int) -> int:
    seeds = [cfg["train.seed"] + i for i in range(cfg["ablate.seeds"])]
    jobs = [(cfg, variant, blocks, seed)
            for variant, blocks in ABLATION_VARIANTS for seed in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(_run_variant, jobs))
    else:
        runs = [_run_variant(j) for j in jobs]
    for variant, seed, p, s in runs:
        print(f"variant {variant:10s} seed {seed}: PSNR {p:.2f} dB, SSIM {s:.4f}")

    table = []
    for variant, _ in ABLATION_VARIANTS:
        vruns = [(p, s) for v, _, p, s in runs if v == variant]
        psnr_m = sum(p for p, _ in vruns) / len(vruns)
        ssim_m = sum(s for _, s in vruns) / len(vruns)
        table.append((variant, psnr_m, ssim_m))
        print(f"variant {variant:10s} mean over {len(vruns)} seeds: "
              f"PSNR {psnr_m:.2f} dB, SSIM {ssim_m:.4f}")
    path = out / "ablation.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "psnr_db", "ssim"])
        for variant, p, s in table:
            writer.writerow([variant, repr(p), repr(s)])
    _announce(path)
    return EXIT_OK


def cmd_viz(cfg: dict, out: Path) -> int:
    spec = network_spec(cfg)
    tcfg = train_config(cfg)
    net = build_net(spec, seed=tcfg.seed)
    if cfg["viz.checkpoint"]:
        load_checkpoint(cfg["viz.checkpoint"], net)
        print(f"loaded {cfg['viz.checkpoint']}")
    sample = make_dataset(tcfg, 1, seed_base=700_007)[0]
    y_shape_t = 5 if spec.task == "interpolate" else tcfg.num_frames
    frame = cfg["viz.frame"] if cfg["viz.frame"] >= 0 else y_shape_t // 2
    row = cfg["viz.row"] if cfg["viz.row"] >= 0 else tcfg.size // 2
    col = cfg["viz.col"] if cfg["viz.col"] >= 0 else tcfg.size // 2
    smap = sampling_map(net, sample.inputs.astype(np.float64), (frame, row, col))
    if smap.all_zero:
        print("warning: sampling map is all zero (disconnected output)")
    for path in emit_map_image(smap, out):
        _announce(path)
    return EXIT_OK


def cmd_bench(cfg: dict, out: Path) -> int:
    c = cfg["bench.channels"]
    size = cfg["bench.size"]
    t = cfg["bench.frames"]
    repeats = cfg["bench.repeats"]
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, c, t, size, size)).astype(np.float32)
    w = rng.standard_normal((c, c, 3, 3, 3)).astype(np.float32)
    params = Conv3dParams(w, np.zeros(c, dtype=np.float32), padding=(1, 1, 1))
    taps = num_taps((3, 3, 3))
    offsets = (rng.standard_normal((1, 2 * taps, t, size, size)) * 0.7).astype(np.float32)
    masks = rng.uniform(0.2, 0.8, (1, taps, t, size, size)).astype(np.float32)

    macs = c * c * 27 * t * size * size  # multiply-adds per call, main kernel

    def timeit(fn):
        fn()  # warm up
        best = float("inf")
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - start)
        return best

    t_ref = timeit(lambda: conv3d_ref(x, params))
    t_ls3d = timeit(lambda: ls3d_forward(x, params, offsets, masks))
    rows = [("conv3d_ref", t_ref, 1.0 / t_ref, macs / t_ref),
            ("ls3d_forward", t_ls3d, 1.0 / t_ls3d, macs / t_ls3d)]
    print(f"shape (1,{c},{t},{size},{size}), kernel 3x3x3, best of {repeats}")
    for name, secs, calls, mps in rows:
        print(f"{name:14s} {secs * 1e3:9.2f} ms/call  {calls:8.2f} calls/s  "
              f"{mps / 1e6:9.1f} MMAC/s")
    path = out / "bench.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["op", "seconds_per_call", "calls_per_sec", "mac_per_sec"])
        for name, secs, calls, mps in rows:
            writer.writerow([name, repr(secs), repr(calls), repr(mps)])
    _announce(path)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ls3dconv",
        description="learnable-sampling 3D convolution experiments")
    parser.add_argument("command",
                        choices=["train", "eval", "gradcheck", "ablate", "viz", "bench"])
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override train.seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel variant workers for ablate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg["train.seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        echo_config(cfg)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        if args.command == "ablate":
            return cmd_ablate(cfg, out, args.threads)
        if args.command == "viz":
            return cmd_viz(cfg, out)
        return cmd_bench(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"shape/task error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
