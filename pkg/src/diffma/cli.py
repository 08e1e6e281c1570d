"""``diffma`` command line: gen-data, pretrain-embedder, train, sample, eval,
bench and show-scan.

Every subcommand except ``show-scan`` works inside a run directory::

    <run>/config.txt        resolved configuration snapshot
    <run>/manifest.json     one entry per invocation
    <run>/data/             generated dataset
    <run>/checkpoints/      embedder.pt, model.pt
    <run>/samples/          generated, reference and baseline images + manifest
    <run>/metrics/          JSON reports
    <run>/logs/             one log file per subcommand

The run directory defaults to ``$DIFFMA_RUN_ROOT/default`` (``./runs`` when
the variable is unset). Values are resolved as: built-in defaults, then the
run's existing snapshot, then ``--config``, then ``--set`` and the dedicated
flags.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import pipeline, spiral
from .bench import DEFAULT_GRID, flops_estimate, scaling_benchmark
from .config import RunConfig, parse_value
from .embedder import load_embedder, save_embedder
from .errors import ConfigError, DependencyError, DiffMaError, RunLockedError
from .metrics import compute_metrics
from .model import preset_size_report
from .rawio import read_tensor, write_tensor
from .synthetic import PairedDataset, generate_synthetic_pairs

ENV_RUN_ROOT = "DIFFMA_RUN_ROOT"
MANIFEST_VERSION = 1
log = logging.getLogger("diffma")


# ---------------------------------------------------------------------------
# run directory


class Run:
    def __init__(self, root: Path, cfg: RunConfig):
        self.root = root
        self.cfg = cfg

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def embedder_path(self) -> Path:
        return self.root / "checkpoints" / "embedder.pt"

    @property
    def model_path(self) -> Path:
        return self.root / "checkpoints" / "model.pt"

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise DependencyError(str(path), hint)
        return path


def default_run_dir() -> Path:
    return Path(os.environ.get(ENV_RUN_ROOT, "runs")) / "default"


def resolve_config(args, run_dir: Path) -> RunConfig:
    snapshot = run_dir / "config.txt"
    if args.config:
        cfg = RunConfig.read(args.config)
    elif snapshot.exists():
        cfg = RunConfig.read(snapshot)
    else:
        cfg = RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        cfg.set(key, parse_value(raw, f"--set {key}"))
    for key, dest in getattr(args, "config_flags", {}).items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg.set(key, value)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    cfg.model_config()  # validates the model section
    return cfg


@contextmanager
def locked(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunLockedError(f"{run_dir} is locked by another process") from None
    try:
        yield
    finally:
        lock.release()


def _attach_log(run: Run, command: str) -> logging.Handler:
    handler = logging.FileHandler(run.path("logs", f"{command}.log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _record(run: Run, entry: dict) -> None:
    path = run.root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"schema_version": MANIFEST_VERSION, "runs": []}
    manifest["runs"].append(entry)
    path.write_text(json.dumps(manifest, indent=2))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# helpers shared by subcommands


def _load_data(run: Run, cfg: RunConfig):
    run.require(run.data_dir / "manifest.json", "run `diffma gen-data` first")
    ds = PairedDataset.open(run.data_dir)
    src, tgt = ds.arrays()
    mcfg = cfg.model_config()
    res = ds.manifest["resolution"]
    if res // 8 != mcfg.latent_shape[1] or res // 8 != mcfg.latent_shape[2]:
        raise ConfigError(
            f"dataset resolution {res} gives {res // 8}x{res // 8} latents, model expects "
            f"{mcfg.latent_shape[1]}x{mcfg.latent_shape[2]}"
        )
    n_eval = cfg.data.holdout
    if not 0 <= n_eval < len(ds):
        raise ConfigError(f"data.holdout={n_eval} must be smaller than the dataset ({len(ds)} pairs)")
    return src, tgt, len(ds) - n_eval


def _load_embedder(run: Run, cfg: RunConfig):
    mcfg = cfg.model_config()
    path = run.require(run.embedder_path, "run `diffma pretrain-embedder` first")
    return load_embedder(path, expect_patch_size=mcfg.patch_size, expect_grid=mcfg.grid, expect_dim=mcfg.dim)


def _write_images(folder: Path, images: np.ndarray, prefix: str) -> list[str]:
    folder.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"{prefix}_{i:05d}.bin"
        write_tensor(folder / name, np.ascontiguousarray(img, dtype=np.float32))
        names.append(name)
    return names


def _read_folder(folder: Path) -> tuple[list[str], np.ndarray]:
    if not folder.is_dir():
        raise DependencyError(str(folder), "folder of .bin images expected")
    names = sorted(p.name for p in folder.glob("*.bin"))
    if not names:
        raise DependencyError(str(folder), "no .bin images found")
    return names, np.stack([read_tensor(folder / n) for n in names])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run, args) -> dict:
    d = run.cfg.data
    manifest = generate_synthetic_pairs(d.count, d.seed, d.resolution, run.data_dir, workers=args.workers)
    log.info("wrote %d pairs at %dx%d to %s", d.count, d.resolution, d.resolution, run.data_dir)
    return {"dataset": str(run.data_dir), "count": manifest["count"]}


def cmd_pretrain(run: Run, args) -> dict:
    cfg = run.cfg
    mcfg = cfg.model_config()
    src, _, n_train = _load_data(run, cfg)
    codec = pipeline.make_codec(mcfg)
    z_src = pipeline.encode_images(codec, src[:n_train])
    embedder = pipeline.build_embedder(mcfg, cfg.seed)
    e = cfg.embedder
    losses = pipeline.run_pretraining(embedder, z_src, e.steps, e.batch_size, e.lr, cfg.seed)
    save_embedder(embedder, run.path("checkpoints", "embedder.pt"))
    run.path("metrics", "embedder_losses.json").write_text(json.dumps(losses))
    log.info("embedder loss %.4f -> %.4f over %d steps", losses[0] if losses else float("nan"),
             losses[-1] if losses else float("nan"), len(losses))
    return {"embedder": str(run.embedder_path), "embedder_sha": _sha(run.embedder_path),
            "final_loss": losses[-1] if losses else None}


def cmd_train(run: Run, args) -> dict:
    cfg = run.cfg
    mcfg = cfg.model_config()
    embedder = _load_embedder(run, cfg)
    src, tgt, n_train = _load_data(run, cfg)
    codec = pipeline.make_codec(mcfg)
    z_src = pipeline.encode_images(codec, src[:n_train])
    z_tgt = pipeline.encode_images(codec, tgt[:n_train])
    cond = pipeline.make_conditioner(embedder, mcfg)(z_src, torch.from_numpy(src[:n_train]))
    schedule = pipeline.schedule_from(cfg.schedule)
    model = pipeline.build_model(mcfg, cfg.seed)
    o, e = cfg.optim, cfg.ema
    t0 = time.perf_counter()
    result = pipeline.train_diffusion(
        model, schedule, z_tgt, cond, o.steps, o.batch_size, o.lr, o.weight_decay, e.decay, e.warmup,
        seed=cfg.seed, log_every=max(1, o.steps // 20),
    )
    digest = pipeline.save_model_checkpoint(run.path("checkpoints", "model.pt"), model, result.ema, embedder,
                                            schedule, o.steps)
    run.path("metrics", "train_losses.json").write_text(json.dumps(result.losses))
    log.info("trained %d steps in %.1fs, checkpoint %s", o.steps, time.perf_counter() - t0, digest)
    return {"checkpoint": str(run.model_path), "checkpoint_sha": digest,
            "final_loss": result.losses[-1] if result.losses else None}


def cmd_sample(run: Run, args) -> dict:
    cfg = run.cfg
    mcfg = cfg.model_config()
    embedder = _load_embedder(run, cfg)
    schedule = pipeline.schedule_from(cfg.schedule)
    ckpt = run.require(run.model_path, "run `diffma train` first")
    model, ema_model, payload = pipeline.load_model_checkpoint(ckpt, embedder, schedule)
    src, tgt, n_train = _load_data(run, cfg)
    sl = slice(n_train, None) if args.split == "holdout" else slice(0, n_train)
    src, tgt = src[sl], tgt[sl]
    codec = pipeline.make_codec(mcfg)
    cond = pipeline.make_conditioner(embedder, mcfg)(pipeline.encode_images(codec, src), torch.from_numpy(src))
    s = cfg.sample
    net = model if args.raw_weights else ema_model
    latents = pipeline.sample_latents(net, schedule, cond, s.steps, cfg.seed, s.batch_size, s.clip_x0)
    out = run.root / "samples"
    write_tensor(run.path("samples", "latents.bin"), latents.numpy())
    _write_images(out / "images", pipeline.decode_images(codec, latents), "sample")
    _write_images(out / "reference", pipeline.codec_matched(codec, tgt), "sample")
    _write_images(out / "baseline", pipeline.codec_matched(codec, src), "sample")
    manifest = {
        "seed": cfg.seed,
        "steps": s.steps,
        "batch_size": s.batch_size,
        "clip_x0": s.clip_x0,
        "split": args.split,
        "count": int(latents.shape[0]),
        "weights": "raw" if args.raw_weights else "ema",
        "schedule_fingerprint": schedule.fingerprint(),
        "schedule_digest": schedule.digest(),
        "checkpoint": str(ckpt),
        "checkpoint_sha": _sha(ckpt),
        "checkpoint_step": payload["step"],
        "embedder_fingerprint": embedder.fingerprint(),
    }
    run.path("samples", "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d samples to %s", latents.shape[0], out)
    return {"samples": str(out), "count": int(latents.shape[0])}


def cmd_eval(run: Run, args) -> dict:
    gen_dir = Path(args.generated) if args.generated else run.root / "samples" / "images"
    ref_dir = Path(args.reference) if args.reference else run.root / "samples" / "reference"
    gen_names, gen = _read_folder(gen_dir)
    ref_names, ref = _read_folder(ref_dir)
    if gen_names != ref_names:
        raise ConfigError(f"{gen_dir} and {ref_dir} do not hold the same file names")
    report = {"generated": str(gen_dir), "reference": str(ref_dir), **_as_dict(compute_metrics(gen, ref))}
    base_dir = Path(args.baseline) if args.baseline else run.root / "samples" / "baseline"
    if base_dir.is_dir() and any(base_dir.glob("*.bin")):
        base_names, base = _read_folder(base_dir)
        if base_names == ref_names:
            report["baseline"] = {"path": str(base_dir), **_as_dict(compute_metrics(base, ref))}
    run.path("metrics", "eval.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return {"metrics": str(run.root / "metrics" / "eval.json"), "ssim_pct": report["ssim_pct"]}


def _as_dict(r) -> dict:
    return {"ssim_pct": r.ssim_pct, "psnr_db": r.psnr_db, "mse_255": r.mse_255, "count": r.count}


def cmd_bench(run: Run, args) -> dict:
    grid = [int(v) for v in args.grid.split(",")] if args.grid else list(DEFAULT_GRID)
    report = scaling_benchmark(grid, dim=args.dim, state_size=args.state_size, repeats=args.repeats,
                               seed=run.cfg.seed)
    out = json.loads(report.to_json())
    out["flops"] = [
        dict(zip(("L", "D", "N", "attention", "spiral_scan"), (L, args.dim, args.state_size, *flops_estimate(L, args.dim, args.state_size))))
        for L in grid
    ]
    if args.presets:
        out["presets"] = preset_size_report()
    run.path("metrics", "bench.json").write_text(json.dumps(out, indent=2))
    print(f"scan slope {report.scan_slope:.3f}  attention slope (upper half) {report.attention_slope_upper:.3f}")
    if report.dim_doubling_ratio is not None:
        print(f"scan time ratio for doubled D: {report.dim_doubling_ratio:.2f}")
    if args.presets:
        for row in out["presets"]:
            print(f"{row['preset']:>3} p{row['patch_size']}  params {row['params'] / 1e6:7.2f}M "
                  f"(ref {row['ref_params'] / 1e6:7.2f}M, {100 * row['params_rel_dev']:+.1f}%)")
    return {"report": str(run.root / "metrics" / "bench.json"), "scan_slope": report.scan_slope,
            "attention_slope_upper": report.attention_slope_upper}


def cmd_show_scan(args) -> int:
    try:
        H, W = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid must look like 6x6, got {args.grid!r}") from None
    scheme = spiral.ScanScheme.from_id(args.scheme, spiral.Mode(args.mode))
    print(spiral.format_ranks(spiral.visit_ranks(H, W, scheme)))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic paired dataset"),
    "pretrain-embedder": (cmd_pretrain, "contrastively pretrain and freeze the vision embedder"),
    "train": (cmd_train, "train the diffusion model (needs a pretrained embedder)"),
    "sample": (cmd_sample, "sample target images for held-out sources with the EMA model"),
    "eval": (cmd_eval, "SSIM / PSNR / MSE between two folders of images"),
    "bench": (cmd_bench, "scan vs attention runtime scaling and FLOP counts"),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-dir", type=Path, help=f"run directory (default ${ENV_RUN_ROOT}/default or ./runs/default)")
    p.add_argument("--config", type=Path, help="config file of 'section.key = value' lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (config key 'seed')")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _flag(p, name, key, typ, help_text, flags: dict):
    dest = name.lstrip("-").replace("-", "_")
    p.add_argument(name, type=typ, dest=dest, help=f"{help_text} (config key '{key}')")
    flags[key] = dest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffma", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p)
        flags: dict = {}
        if name == "gen-data":
            _flag(p, "--count", "data.count", int, "number of pairs", flags)
            _flag(p, "--resolution", "data.resolution", int, "image side in pixels, divisible by 8", flags)
            _flag(p, "--data-seed", "data.seed", int, "generator seed", flags)
            p.add_argument("--workers", type=int, default=1, help="parallel generator threads")
        elif name == "pretrain-embedder":
            _flag(p, "--steps", "embedder.steps", int, "optimizer steps", flags)
            _flag(p, "--batch-size", "embedder.batch_size", int, "contrastive batch size", flags)
            _flag(p, "--lr", "embedder.lr", float, "learning rate", flags)
        elif name == "train":
            _flag(p, "--steps", "optim.steps", int, "optimizer steps", flags)
            _flag(p, "--batch-size", "optim.batch_size", int, "batch size", flags)
            _flag(p, "--lr", "optim.lr", float, "learning rate", flags)
            _flag(p, "--ema-decay", "ema.decay", float, "EMA decay", flags)
        elif name == "sample":
            _flag(p, "--steps", "sample.steps", int, "sampler steps", flags)
            _flag(p, "--batch-size", "sample.batch_size", int, "sampling batch size", flags)
            p.add_argument("--split", choices=("holdout", "train"), default="holdout", help="which pairs to translate")
            p.add_argument("--raw-weights", action="store_true", help="sample with the raw instead of the EMA weights")
        elif name == "eval":
            p.add_argument("--generated", help="folder of generated .bin images (default <run>/samples/images)")
            p.add_argument("--reference", help="folder of reference .bin images (default <run>/samples/reference)")
            p.add_argument("--baseline", help="optional third folder scored against the reference")
        elif name == "bench":
            p.add_argument("--grid", help=f"comma-separated sequence lengths (default {','.join(map(str, DEFAULT_GRID))})")
            p.add_argument("--dim", type=int, default=64, help="token width for the length sweep")
            p.add_argument("--state-size", type=int, default=16, help="SSM state size N")
            p.add_argument("--repeats", type=int, default=5, help="timed repeats per point (median, >= 5)")
            p.add_argument("--presets", action="store_true", help="also report parameter counts for all presets")
        p.set_defaults(config_flags=flags)

    p = sub.add_parser("show-scan", help="print a spiral scheme as a grid of visit ranks",
                       description="print a spiral scheme as a grid of visit ranks")
    p.add_argument("--scheme", type=int, required=True, help="scheme id 0-7 (2 * corner + chirality)")
    p.add_argument("--grid", default="6x6", help="grid size HxW")
    p.add_argument("--mode", choices=[m.value for m in spiral.Mode], default="forward")
    return parser


def run_command(args) -> int:
    if args.command == "show-scan":
        return cmd_show_scan(args)
    run_dir = args.run_dir or default_run_dir()
    fn, _ = COMMANDS[args.command]
    with locked(run_dir):
        cfg = resolve_config(args, run_dir)
        run = Run(run_dir, cfg)
        cfg.write(run.path("config.txt"))
        handler = _attach_log(run, args.command)
        entry = {
            "command": args.command,
            "argv": sys.argv[1:],
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "config_sha": _sha(run.root / "config.txt"),
        }
        try:
            entry["artifacts"] = fn(run, args)
            entry["status"] = "ok"
        except BaseException as exc:
            entry["status"] = "error"
            entry["error"] = f"{type(exc).__name__}: {exc}"
            raise
        finally:
            entry["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
            _record(run, entry)
            logging.getLogger().removeHandler(handler)
            handler.close()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if getattr(args, "verbose", False) else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    # basicConfig is a no-op when the host already configured logging
    log.setLevel(level)
    try:
        return run_command(args)
    except DiffMaError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
