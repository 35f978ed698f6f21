"""Command-line pipeline: synth, train, infer, eval, gradcheck.

Configuration is a flat `key = value` file plus flag overrides (flags win);
the effective configuration is echoed into every output directory as
`config.echo`. Exit codes: 0 success, 1 usage/data error, 2 numerical abort.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataset as ds
from . import gradcheck as gc
from . import metrics as mt
from .hdrio import HdrImage, HdrIoError, read_pnm, write_pfm, write_rgbe
from .nn import Generator, ParamsFormatError, generator_forward, load_params
from .tensor import Tensor
from .train import NonFiniteError, TrainConfig, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class CliError(ValueError):
    """Bad flags, config file, or input data."""


@dataclass
class ExperimentConfig:
    """Union of training, dataset, and metric options; file keys match the
    field names (the loss weight's key is spelled `lambda`)."""
    lambda_: float = 1e4
    alpha: float = 1e5
    batch_size: int = 6
    iterations: int = 80000
    lr0: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: Optional[int] = None
    seed: int = 0
    mode: str = "full"
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    checkpoint_every: int = 0
    patch_size: int = 512
    width_multiplier: float = 1.0
    adv_convention: str = "paper"
    clamp_eps: float = 1e-7
    mse_reduction: str = "image_sum"
    resize_to: int = 512
    peak_nits: float = 1000.0
    tmo_key: float = 0.18
    ldr_depth: int = 8
    mpsnr_gamma: float = 2.2
    mpsnr_exposures: str = "-2,-1,0,1,2"
    log_floor: float = 1e-4
    ssim_per_channel: bool = False

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_=self.lambda_, alpha=self.alpha, batch_size=self.batch_size,
            iterations=self.iterations, lr0=self.lr0,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_every=self.lr_decay_every, seed=self.seed, mode=self.mode,
            rmsprop_rho=self.rmsprop_rho, rmsprop_eps=self.rmsprop_eps,
            checkpoint_every=self.checkpoint_every, patch_size=self.patch_size,
            width_multiplier=self.width_multiplier,
            adv_convention=self.adv_convention, clamp_eps=self.clamp_eps,
            mse_reduction=self.mse_reduction)

    def to_metrics_config(self) -> mt.MetricsConfig:
        try:
            stops = tuple(int(s) for s in self.mpsnr_exposures.split(","))
        except ValueError as exc:
            raise CliError(f"bad mpsnr_exposures {self.mpsnr_exposures!r}: {exc}")
        return mt.MetricsConfig(exposures=stops, gamma=self.mpsnr_gamma,
                                log_floor=self.log_floor,
                                ssim_per_channel=self.ssim_per_channel)

    def to_synth_config(self) -> ds.SynthConfig:
        return ds.SynthConfig(resize_to=self.resize_to, peak_nits=self.peak_nits,
                              tmo_key=self.tmo_key, ldr_depth=self.ldr_depth)


def desk_preset() -> ExperimentConfig:
    """Laptop-scale sizes; loss weights keep their full-scale defaults."""
    return replace(ExperimentConfig(), batch_size=4, iterations=2000,
                   patch_size=64, width_multiplier=0.25, checkpoint_every=500,
                   resize_to=128)


PRESETS = {"paper": ExperimentConfig, "desk": desk_preset}

_FILE_KEYS = {("lambda" if f.name == "lambda_" else f.name): f.name
              for f in fields(ExperimentConfig)}


def _parse_value(field_name: str, raw: str):
    hints = {f.name: f.type for f in fields(ExperimentConfig)}
    hint = hints[field_name]
    raw = raw.strip()
    if "Optional[int]" in str(hint):
        return None if raw.lower() in ("none", "auto") else int(raw)
    if hint in ("int",):
        return int(raw)
    if hint in ("float",):
        return float(raw)
    if hint in ("bool",):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return raw


def load_config_file(path, base: ExperimentConfig) -> ExperimentConfig:
    """Flat `key = value` lines; # comments; unknown keys are rejected."""
    updates = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FILE_KEYS:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                updates[_FILE_KEYS[key]] = _parse_value(_FILE_KEYS[key], raw)
            except ValueError as exc:
                raise CliError(f"{path}:{lineno}: bad value for {key!r}: {exc}")
    return replace(base, **updates)


def echo_config(cfg: ExperimentConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for f in fields(cfg):
        key = "lambda" if f.name == "lambda_" else f.name
        val = getattr(cfg, f.name)
        lines.append(f"{key} = {'none' if val is None else val}")
    (out_dir / "config.echo").write_text("\n".join(lines) + "\n")


def _apply_flag_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    for f in fields(ExperimentConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            updates[f.name] = flag
    return replace(cfg, **updates) if updates else cfg


def _config_from_args(args) -> ExperimentConfig:
    cfg = PRESETS[args.preset]()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    return _apply_flag_overrides(cfg, args)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    try:
        index = ds.synth_pairs(args.hdr_dir, out_dir, cfg.to_synth_config())
    except (ValueError, OSError) as exc:
        print(f"synth failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    echo_config(cfg, out_dir)
    print(f"synthesized {len(index)} pairs ({index.skipped} skipped) -> {out_dir}")
    return EXIT_OK


def _sweep_cells(cfg: ExperimentConfig, specs: list[str]):
    """One-at-a-time sweep around the configured center, deduplicated.

    --sweep alpha=a1,a2 lambda=l1,l2 varies alpha at the center lambda and
    lambda at the center alpha (the grid of the parameter-sensitivity table).
    """
    lists: dict[str, list[float]] = {}
    for spec in specs:
        if "=" not in spec:
            raise CliError(f"bad sweep spec {spec!r}; expected name=v1,v2,...")
        name, raw = spec.split("=", 1)
        name = name.strip()
        if name not in ("alpha", "lambda"):
            raise CliError(f"sweep supports alpha and lambda, got {name!r}")
        try:
            lists[name] = [float(v) for v in raw.split(",") if v.strip()]
        except ValueError as exc:
            raise CliError(f"bad sweep values in {spec!r}: {exc}")
    cells: list[tuple[float, float]] = []
    for a in lists.get("alpha", []):
        cells.append((a, cfg.lambda_))
    for l in lists.get("lambda", []):
        cells.append((cfg.alpha, l))
    seen, unique = set(), []
    for cell in cells:
        if cell not in seen:
            seen.add(cell)
            unique.append(cell)
    return unique


def _fmt_value(v: float) -> str:
    return f"{v:g}".replace("+", "")


def _run_training(cfg: ExperimentConfig, data_path: Path, out_dir: Path) -> int:
    index = ds.load_index(data_path)
    echo_config(cfg, out_dir)
    train_loop(cfg.to_train_config(), index, out_dir)
    print(f"trained {cfg.iterations} iterations -> {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = _config_from_args(args)
        data_path = Path(args.data)
        if not data_path.exists():
            raise CliError(f"manifest {data_path} does not exist")
        out_dir = Path(args.out_dir)
        if args.sweep:
            cells = _sweep_cells(cfg, args.sweep)
            for alpha, lam in cells:
                cell_dir = out_dir / f"alpha{_fmt_value(alpha)}_lambda{_fmt_value(lam)}"
                _run_training(replace(cfg, alpha=alpha, lambda_=lam),
                              data_path, cell_dir)
            print(f"sweep complete: {len(cells)} cells")
            return EXIT_OK
        return _run_training(cfg, data_path, out_dir)
    except NonFiniteError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CliError, ValueError, OSError) as exc:
        print(f"train failed: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _pad_to_multiple(arr: np.ndarray, mult: int):
    h, w = arr.shape[:2]
    ph = (mult - h % mult) % mult
    pw = (mult - w % mult) % mult
    if ph == 0 and pw == 0:
        return arr, (0, 0)
    return np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="reflect"), (ph, pw)


def cmd_infer(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        net = load_params(args.model)
        if not isinstance(net, Generator):
            raise CliError(f"{args.model} holds a discriminator, not a generator")
    except (ParamsFormatError, OSError, CliError) as exc:
        print(f"infer failed: {exc}", file=sys.stderr)
        return EXIT_USAGE

    echo_config(cfg, out_dir)
    failures = 0
    for inp in args.inputs:
        try:
            ldr = read_pnm(inp).pixels
            h, w = ldr.shape[:2]
            if (h % 32 or w % 32) and not args.pad:
                raise CliError(f"{inp}: dims {h}x{w} are not divisible by 32 "
                               "(use --pad to reflect-pad)")
            padded, (ph, pw) = _pad_to_multiple(ldr, 32)
            x = Tensor(padded.transpose(2, 0, 1)[None])
            y = generator_forward(net, x, mode="eval")
            out = y.data[0].transpose(1, 2, 0)
            if ph:
                out = out[:-ph]
            if pw:
                out = out[:, :-pw]
            out = np.ascontiguousarray(out, dtype=np.float32)
            stem = Path(inp).stem
            hdr = HdrImage(out.shape[1], out.shape[0], out)
            write_pfm(hdr, out_dir / f"{stem}.pfm")
            if args.rgbe:
                scaled = HdrImage(hdr.width, hdr.height, out * cfg.peak_nits)
                write_rgbe(scaled, out_dir / f"{stem}.hdr")
            print(f"{inp} -> {out_dir / (stem + '.pfm')}")
        except (HdrIoError, CliError, ValueError, OSError) as exc:
            print(f"{inp}: {exc}", file=sys.stderr)
            failures += 1
    return EXIT_OK if failures == 0 else EXIT_USAGE


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    try:
        report = mt.evaluate_dirs(args.pred_dir, args.ref_dir,
                                  cfg.to_metrics_config())
    except (ValueError, OSError) as exc:
        print(f"eval failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    report.to_csv(out_dir / "report.csv")
    report.to_json(out_dir / "aggregate.json")
    agg = report.aggregates()
    print(f"evaluated {agg['count']} pairs: mpsnr={agg['mpsnr_db']:.2f}dB "
          f"ssim={agg['ssim']:.4f} log_psnr={agg['log_psnr_db']:.2f}dB")
    if report.unmatched:
        print(f"unmatched: {', '.join(report.unmatched)}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    return EXIT_OK if gc.run_all(tol=args.tol) else EXIT_USAGE


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, names: list[str]):
    defaults = ExperimentConfig()
    flag_type = {f.name: f.type for f in fields(ExperimentConfig)}
    for name in names:
        field_name = _FILE_KEYS[name]
        hint = flag_type[field_name]
        typ = float if hint == "float" else int if hint == "int" else str
        default = getattr(defaults, field_name)
        p.add_argument(f"--{name.replace('_', '-')}", dest=field_name, type=typ,
                       default=None, metavar="V",
                       help=f"{name} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itmn",
        description="LDR-to-HDR inverse tone mapping: dataset synthesis, "
                    "adversarially regularized training, inference, and "
                    "evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = dict(help="preset config block: 'paper' full-scale defaults, "
                       "'desk' laptop-scale (default: desk)")

    p = sub.add_parser("synth", help="build (LDR, HDR) training pairs from an HDR corpus")
    p.add_argument("hdr_dir")
    p.add_argument("out_dir")
    p.add_argument("--preset", choices=PRESETS, default="desk", **common)
    p.add_argument("--config", default=None, help="key = value config file")
    _add_config_flags(p, ["resize_to", "peak_nits", "tmo_key", "ldr_depth"])
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run the alternating min-max training loop")
    p.add_argument("--data", required=True, help="index.jsonl manifest from synth")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--preset", choices=PRESETS, default="desk", **common)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--mode", choices=("full", "no_dmse", "no_advreg"), default=None,
                   help="ablation mode (default: full)")
    p.add_argument("--sweep", nargs="+", metavar="NAME=V1,V2,...", default=None,
                   help="one-at-a-time sweep around the configured center, "
                        "e.g. --sweep alpha=1e3,1e5,1e7 lambda=1e2,1e4,1e6")
    _add_config_flags(p, ["lambda", "alpha", "batch_size", "iterations", "lr0",
                          "lr_decay_factor", "lr_decay_every", "seed",
                          "rmsprop_rho", "rmsprop_eps", "checkpoint_every",
                          "patch_size", "width_multiplier", "adv_convention",
                          "clamp_eps"])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="map LDR images (PPM) to HDR outputs (PFM)")
    p.add_argument("--model", required=True, help="generator parameter file")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("inputs", nargs="+", help="LDR input images (binary PPM)")
    p.add_argument("--pad", action="store_true",
                   help="reflect-pad inputs whose dims are not divisible by 32, "
                        "crop the output back")
    p.add_argument("--rgbe", action="store_true",
                   help="also write Radiance .hdr scaled by peak nits")
    p.add_argument("--preset", choices=PRESETS, default="desk", **common)
    p.add_argument("--config", default=None, help="key = value config file")
    _add_config_flags(p, ["peak_nits"])
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("pred_dir")
    p.add_argument("ref_dir")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--preset", choices=PRESETS, default="desk", **common)
    p.add_argument("--config", default=None, help="key = value config file")
    _add_config_flags(p, ["mpsnr_gamma", "mpsnr_exposures", "log_floor"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every differentiable op")
    p.add_argument("--tol", type=float, default=gc.TOLERANCE,
                   help=f"max relative error allowed (default: {gc.TOLERANCE})")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; our contract reserves 2 for
        # numerical aborts
        code = exc.code if isinstance(exc.code, int) else 0
        return EXIT_USAGE if code else EXIT_OK
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
