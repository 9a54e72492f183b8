"""Command-line entry point.

Exit codes: 0 success, 1 io, 2 usage, 3 numeric divergence, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import gradcheck
from .cgan import (
    DiscriminatorConfig,
    DivergenceError,
    GeneratorConfig,
    TrainConfig,
    default_configs,
    generator_from_checkpoint,
    infer_volume,
    load_checkpoint,
    train,
)
from .degrade import ConditionKind, iter_training_pairs, load_pairs, write_pairs
from .errors import CTCGANError, CheckpointError, ConfigError, ShapeMismatchError
from .metrics import evaluate_pair
from .synth import PhantomSpec, generate_phantom
from .volume import (
    PreprocessParams,
    Volume,
    load_meta,
    load_volume,
    make_grid,
    meta_path,
    preprocess,
    save_meta,
    save_volume,
)

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4

log = logging.getLogger("ctcgan")


class UsageError(Exception):
    pass


def _dims(text: str):
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be three comma-separated integers, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=_positive_int, default=None)
    common.add_argument("--precision", choices=("f32", "f64"), default=None)
    common.add_argument("--config", type=Path, default=None, help="JSON file of option defaults")
    common.add_argument("--run-log", type=Path, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ctcgan", description="3D conditional GAN for CT volume blocks")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic phantom volumes")
    s.add_argument("--count", type=_positive_int, default=None)
    s.add_argument("--dims", type=_dims, default=None)
    s.add_argument("--out-dir", type=Path, default=None)

    s = sub.add_parser("prep", parents=[common], help="preprocess volumes into training pairs")
    s.add_argument("--in", dest="inputs", type=Path, nargs="+", default=None)
    s.add_argument("--out-dir", type=Path, default=None)
    s.add_argument("--condition", choices=("auto", "autoencoder", "noisy", "pixelated"), default=None)
    s.add_argument("--edge", type=int, default=None)
    s.add_argument("--peak", type=float, default=None)

    s = sub.add_parser("train", parents=[common], help="train the cGAN on a pair directory")
    s.add_argument("--pairs", type=Path, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch", type=int, default=None)
    s.add_argument("--lambda-l1", type=float, default=None)
    s.add_argument("--ckpt-dir", type=Path, default=None)
    s.add_argument("--resume", type=Path, default=None)
    s.add_argument("--base-channels", type=int, default=None)
    s.add_argument("--loss-mode", choices=("saturating", "non-saturating"), default=None)
    s.add_argument("--checkpoint-every", type=int, default=None)

    s = sub.add_parser("generate", parents=[common], help="run a trained generator over a volume")
    s.add_argument("--ckpt", type=Path, default=None)
    s.add_argument("--in", dest="input", type=Path, default=None)
    s.add_argument("--condition", choices=("auto", "autoencoder", "noisy", "pixelated"), default=None)
    s.add_argument("--out", type=Path, default=None)
    s.add_argument("--edge", type=int, default=None, help="expected block edge; must match the checkpoint")

    s = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM report for a volume pair")
    s.add_argument("--real", type=Path, default=None)
    s.add_argument("--generated", type=Path, default=None)
    s.add_argument("--mode", choices=("global", "windowed"), default=None)
    s.add_argument("--data-range", type=float, default=None)
    s.add_argument("--report", type=Path, default=None)

    s = sub.add_parser("blindtest", parents=[common], help="export real/generated slice pairs as PGM")
    s.add_argument("--real-dir", type=Path, default=None)
    s.add_argument("--gen-dir", type=Path, default=None)
    s.add_argument("--pairs", type=int, default=None)
    s.add_argument("--out-dir", type=Path, default=None)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification suite")
    s.add_argument("--h", type=float, default=None)
    s.add_argument("--ops", nargs="*", default=None)
    s.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    return p


DEFAULTS = {
    "common": {"seed": 0, "threads": 1, "precision": "f32", "verbose": False},
    "synth": {"count": 1, "dims": (64, 64, 64), "out_dir": Path("phantoms")},
    "prep": {"out_dir": Path("pairs"), "condition": "autoencoder", "edge": 32, "peak": 1024.0},
    "train": {"epochs": 50, "batch": 8, "lambda_l1": 100.0, "ckpt_dir": Path("checkpoints"),
              "base_channels": 16, "loss_mode": "non-saturating", "checkpoint_every": 1},
    "generate": {"condition": "autoencoder"},
    "evaluate": {"mode": "windowed"},
    "blindtest": {"pairs": 20, "out_dir": Path("blindtest")},
    "gradcheck": {"h": 1e-4, "ops": None},
}


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file, then built-in defaults."""
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
    merged = {**DEFAULTS["common"], **DEFAULTS.get(args.command, {})}
    for key, default in merged.items():
        if getattr(args, key, None) is None:
            value = file_cfg.get(key, file_cfg.get(key.replace("_", "-"), default))
            if isinstance(default, Path) and value is not None:
                value = Path(value)
            if key == "dims" and isinstance(value, str):
                value = _dims(value)
            setattr(args, key, value)
    return args


def _jsonable(ns: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) else v)
            for k, v in sorted(vars(ns).items())}


def _append_run_log(args, default_dir: Optional[Path]) -> None:
    path = args.run_log or ((default_dir / "run.log") if default_dir is not None else None)
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps({"time": time.strftime("%Y-%m-%dT%H:%M:%S"), **_jsonable(args)}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    names = []
    for i, s in enumerate(seeds):
        spec = PhantomSpec(tuple(args.dims), int(s))
        name = f"phantom{i:03d}.ctv"
        save_volume(generate_phantom(spec), args.out_dir / name)
        save_meta(args.out_dir / name, {"phantom": spec.to_dict()})
        names.append(name)
    (args.out_dir / "manifest.txt").write_text(f"# ctcgan phantoms\nseed {args.seed}\n" + "\n".join(names) + "\n")
    print(f"wrote {len(names)} phantoms to {args.out_dir}")
    return EXIT_OK


def cmd_prep(args) -> int:
    if not args.inputs:
        raise UsageError("prep needs --in")
    if args.edge < 2 or args.edge % 2:
        raise UsageError("--edge must be an even integer >= 2")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    volumes = []
    for i, path in enumerate(args.inputs):
        norm, params, bounds = preprocess(load_volume(path))
        grid = make_grid(norm.dims, args.edge, -1.0)
        save_meta(args.out_dir / f"vol{i}.ctv", {
            "source": str(path), "preprocess": params.to_dict(), "bounds": list(bounds), "grid": grid.to_dict(),
        })
        volumes.append(norm)
    keyed = iter_training_pairs(volumes, ConditionKind.parse(args.condition), args.seed, edge=args.edge,
                                peak=args.peak)
    manifest = write_pairs(args.out_dir, keyed, args.seed, args.condition, args.edge)
    print(f"wrote pairs to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.pairs is None:
        raise UsageError("train needs --pairs")
    if args.epochs < 1 or args.batch < 1:
        raise UsageError("--epochs and --batch must be >= 1")
    cond, target, info = load_pairs(args.pairs)
    edge = cond.shape[2]
    gcfg, dcfg = default_configs(edge, args.base_channels)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lambda_l1=args.lambda_l1, seed=args.seed,
                       generator_loss_mode=args.loss_mode, checkpoint_every=args.checkpoint_every)
    ckpt = train((cond, target), tcfg, gcfg, dcfg, args.ckpt_dir, resume=args.resume)
    print(f"trained {ckpt.epoch} epochs; checkpoints in {args.ckpt_dir}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.ckpt is None or args.input is None or args.out is None:
        raise UsageError("generate needs --ckpt, --in and --out")
    ckpt = load_checkpoint(args.ckpt)
    if args.edge is not None and args.edge != ckpt.gen_cfg.edge:
        raise ShapeMismatchError(f"checkpoint block edge {ckpt.gen_cfg.edge} does not match --edge {args.edge}")
    gen = generator_from_checkpoint(ckpt)
    v = load_volume(args.input)
    params = bounds = None
    if meta_path(args.input).exists():
        meta = load_meta(args.input)
        if "preprocess" in meta:
            params = PreprocessParams.from_dict(meta["preprocess"])
            bounds = tuple(meta["bounds"])
    out = infer_volume(gen, v, params, bounds, ConditionKind.parse(args.condition), args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(out, args.out)
    print(f"wrote {args.out} dims={out.dims}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.real is None or args.generated is None:
        raise UsageError("evaluate needs --real and --generated")
    real, gen = load_volume(args.real), load_volume(args.generated)
    if real.dims != gen.dims:
        raise ShapeMismatchError(f"dims differ: {real.dims} vs {gen.dims}")
    report = evaluate_pair(real, gen, args.data_range, args.mode)
    print(report.table())
    out = args.report or args.generated.with_name(args.generated.name.rsplit(".", 1)[0] + ".report.json")
    report.write(out)
    print(f"report written to {out}")
    return EXIT_OK


def write_pgm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header tokens are whitespace separated; exactly one whitespace byte
    # follows maxval, and pixel bytes may themselves look like whitespace
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[pos + 1:], dtype=np.uint8)
    if maxval != 255 or data.size != w * h:
        raise ValueError(f"{path}: malformed PGM")
    return data.reshape(h, w)


def _display_window(real_path: Path, real: Volume):
    if meta_path(real_path).exists():
        meta = load_meta(real_path)
        if "bounds" in meta and "preprocess" in meta:
            p = meta["preprocess"]
            return float(p["vmin"]), float(p["vmax"])
    return float(real.data.min()), float(real.data.max())


def _to_8bit(slice_: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(slice_.shape, dtype=np.uint8)
    return np.round(np.clip((slice_ - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def cmd_blindtest(args) -> int:
    if args.real_dir is None or args.gen_dir is None:
        raise UsageError("blindtest needs --real-dir and --gen-dir")
    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    real_files = {p.name: p for p in sorted(args.real_dir.glob("*.ctv"))}
    candidates = []
    volumes = {}
    for name in sorted(real_files):
        gp = args.gen_dir / name
        if not gp.exists():
            continue
        real, gen = load_volume(real_files[name]), load_volume(gp)
        if real.dims != gen.dims:
            continue
        volumes[name] = (real, gen, _display_window(real_files[name], real))
        candidates += [(name, z) for z in range(real.shape[0])]
    if len(candidates) < args.pairs:
        raise UsageError(f"only {len(candidates)} matched slices available, {args.pairs} requested")
    rng = np.random.default_rng(args.seed)
    chosen = rng.choice(len(candidates), args.pairs, replace=False)
    real_left = rng.integers(0, 2, args.pairs).astype(bool)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    key_lines = [f"# blind test answer key, seed {args.seed}", "# pair A B source slice"]
    for i, (ci, left) in enumerate(zip(chosen, real_left)):
        name, z = candidates[ci]
        real, gen, (lo, hi) = volumes[name]
        images = {"real": _to_8bit(real.data[z], lo, hi), "generated": _to_8bit(gen.data[z], lo, hi)}
        a, b = ("real", "generated") if left else ("generated", "real")
        write_pgm(args.out_dir / f"pair{i + 1:03d}_A.pgm", images[a])
        write_pgm(args.out_dir / f"pair{i + 1:03d}_B.pgm", images[b])
        key_lines.append(f"pair{i + 1:03d} {a} {b} {name} {z}")
    key = "\n".join(key_lines) + "\n"
    (args.out_dir / "answer_key.txt").write_text(key)
    (args.out_dir / "answer_key.sha256").write_text(hashlib.sha256(key.encode()).hexdigest() + "\n")
    print(f"exported {args.pairs} pairs to {args.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ctx = ad.corrupt_backward(args.corrupt) if args.corrupt else contextlib.nullcontext()
    with ctx:
        results = gradcheck.run_suite(h=args.h, ops=args.ops, seed=args.seed)
    ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        ok &= r.passed
        kinks = f"  ({r.skipped_kinks} kink crossings skipped)" if r.skipped_kinks else ""
        print(f"{r.name:<24} max rel err {r.error:.3e}  threshold {r.threshold:.1e}  {status}{kinks}")
    return EXIT_OK if ok else EXIT_VERIFY


def _parent(attr):
    return lambda a: getattr(a, attr).parent if getattr(a, attr) is not None else None


# command -> (handler, directory that receives run.log when --run-log is absent)
COMMANDS = {
    "synth": (cmd_synth, lambda a: a.out_dir),
    "prep": (cmd_prep, lambda a: a.out_dir),
    "train": (cmd_train, lambda a: a.ckpt_dir),
    "generate": (cmd_generate, _parent("out")),
    "evaluate": (cmd_evaluate, _parent("generated")),
    "blindtest": (cmd_blindtest, lambda a: a.out_dir),
    "gradcheck": (cmd_gradcheck, lambda a: Path(".")),
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, log_dir = COMMANDS[args.command]
    try:
        resolve(args)
        _append_run_log(args, log_dir(args))
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads), ad.precision(args.precision):
            return fn(args)
    except UsageError as e:
        print(f"ctcgan {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"ctcgan {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"ctcgan {args.command}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CTCGANError) as e:
        print(f"ctcgan {args.command}: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
