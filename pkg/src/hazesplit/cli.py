"""Command-line frontend: dehaze, transfer, eval, ablate, gradcheck.

BLAS thread pools are pinned to one thread per solve before numpy loads so
repeated runs and --jobs fan-out stay byte-identical.
"""

from __future__ import annotations

import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import argparse
import concurrent.futures
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck, imgio, metrics, solver, transfer
from .imgio import ImageIOError
from .losses import LossConfig
from .solver import NumericalError, SolverConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class CliError(RuntimeError):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _add_solver_flags(p):
    p.add_argument("--epochs", type=int, default=None, help="optimization epochs (default 500)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-3)")
    p.add_argument("--lambda", dest="lambda_reg", type=float, default=None,
                   help="smoothness weight on the airlight (default 0.1)")
    p.add_argument("--seed", type=int, default=None, help="seed for weights and sampling (default 0)")
    p.add_argument("--precision", choices=("f32", "f64"), default=None, help="compute precision")
    p.add_argument("--config", type=Path, default=None, help="key=value file mirroring the flags")


def build_parser():
    parser = _Parser(prog="hazesplit", description="Per-image self-supervised dehazing")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dehaze", help="disentangle hazy image(s) into J/T/A")
    d.add_argument("--input", nargs="+", required=True, type=Path, help="hazy image path(s)")
    d.add_argument("--ref", type=Path, default=None, help="ground-truth clean image for scoring")
    d.add_argument("--out", required=True, type=Path, help="output directory")
    d.add_argument("--force", action="store_true", help="overwrite existing outputs")
    d.add_argument("--jobs", type=int, default=1, help="images solved in parallel")
    _add_solver_flags(d)

    t = sub.add_parser("transfer", help="move haze from one image onto a clean one")
    t.add_argument("--hazy", required=True, type=Path, help="haze source image")
    t.add_argument("--clean", required=True, type=Path, help="clean target image")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--force", action="store_true")
    _add_solver_flags(t)

    e = sub.add_parser("eval", help="PSNR/SSIM between two images")
    e.add_argument("--pred", required=True, type=Path)
    e.add_argument("--ref", required=True, type=Path)

    a = sub.add_parser("ablate", help="run every single-term ablation plus the full loss")
    a.add_argument("--input", required=True, type=Path)
    a.add_argument("--ref", type=Path, default=None)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--force", action="store_true")
    _add_solver_flags(a)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--probes", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skip-end-to-end", action="store_true")
    return parser


def _read_config_file(path):
    values = {}
    try:
        text = path.read_text()
    except OSError as err:
        raise CliError(f"cannot read config file {path}: {err}", EXIT_IO) from err
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {raw!r}", EXIT_USAGE)
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


_CONFIG_KEYS = {
    "epochs": int,
    "lr": float,
    "lambda": float,
    "seed": int,
    "precision": str,
}


def _solver_config(args):
    """Merge config-file values under explicit flags and build a SolverConfig."""
    merged = {}
    if args.config is not None:
        for key, raw in _read_config_file(args.config).items():
            if key not in _CONFIG_KEYS:
                raise CliError(f"unknown config key {key!r} in {args.config}", EXIT_USAGE)
            try:
                merged[key] = _CONFIG_KEYS[key](raw)
            except ValueError as err:
                raise CliError(f"bad value for {key!r} in {args.config}: {raw!r}", EXIT_USAGE) from err
    for key, attr in (("epochs", "epochs"), ("lr", "lr"), ("lambda", "lambda_reg"),
                      ("seed", "seed"), ("precision", "precision")):
        flag = getattr(args, attr, None)
        if flag is not None:
            merged[key] = flag
    if merged.get("precision") not in (None, "f32", "f64"):
        raise CliError(f"precision must be f32 or f64, got {merged['precision']!r}", EXIT_USAGE)
    try:
        return SolverConfig(
            epochs=merged.get("epochs", 500),
            learning_rate=merged.get("lr", 1e-3),
            seed=merged.get("seed", 0),
            loss=LossConfig(lambda_reg=merged.get("lambda", 0.1)),
            dtype="float64" if merged.get("precision") == "f64" else "float32",
        )
    except ValueError as err:
        raise CliError(str(err), EXIT_USAGE) from err


def _prepare_out_dir(out, force, expected):
    out.mkdir(parents=True, exist_ok=True)
    if not force:
        existing = [name for name in expected if (out / name).exists()]
        if existing:
            raise CliError(
                f"refusing to overwrite {', '.join(existing)} in {out} (use --force)", EXIT_IO
            )


def _load(path):
    try:
        return imgio.load_image(path)
    except ImageIOError as err:
        raise CliError(str(err), EXIT_IO) from err


def _json_float(x):
    return "inf" if np.isinf(x) else float(x)


def _write_metrics(path, record, scores=None):
    payload = {
        "config": record.config,
        "seed": record.seed,
        "airlight_hint": list(record.airlight_hint),
        "epochs": [
            {"epoch": i + 1, "rec": bd.rec, "j": bd.j, "h": bd.h,
             "kl": bd.kl, "reg": bd.reg, "total": bd.total}
            for i, bd in enumerate(record.breakdowns)
        ],
        "timing_ms_per_epoch": float(np.mean(record.epoch_ms)),
    }
    if scores is not None:
        payload["psnr_db"] = _json_float(scores.psnr_db)
        payload["ssim"] = float(scores.ssim)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _dehaze_one(img, ref, out_dir, cfg, force):
    _prepare_out_dir(out_dir, force, ("dehazed.png", "transmission.png", "airlight.png", "metrics.json"))
    padded, dims = imgio.pad_to_multiple(img)
    result, record = solver.dehaze(padded, cfg)
    radiance = imgio.crop_to(result.radiance, dims)
    trans = imgio.crop_to(result.transmission, dims)
    airlight = imgio.crop_to(result.airlight, dims)
    imgio.save_image_u8(radiance, out_dir / "dehazed.png")
    imgio.save_gray16(trans, out_dir / "transmission.png")
    imgio.save_image_u8(airlight, out_dir / "airlight.png")
    scores = metrics.evaluate(radiance, ref) if ref is not None else None
    _write_metrics(out_dir / "metrics.json", record, scores)
    return radiance, scores


def cmd_dehaze(args):
    cfg = _solver_config(args)
    ref = _load(args.ref) if args.ref is not None else None
    inputs = list(args.input)
    if len(inputs) == 1:
        targets = [(inputs[0], args.out)]
    else:
        targets = [(p, args.out / p.stem) for p in inputs]
        if len({t[1] for t in targets}) != len(targets):
            raise CliError("duplicate input stems would collide in the output directory", EXIT_USAGE)

    def run(item):
        path, out_dir = item
        img = _load(path)
        _, scores = _dehaze_one(img, ref, out_dir, cfg, args.force)
        return path, scores

    if args.jobs > 1 and len(targets) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, targets))
    else:
        results = [run(t) for t in targets]
    for path, scores in results:
        line = f"dehazed {path}"
        if scores is not None:
            line += f"  psnr_db={scores.psnr_db:.2f} ssim={scores.ssim:.4f}"
        print(line)
    return EXIT_OK


def cmd_transfer(args):
    cfg = _solver_config(args)
    hazy = _load(args.hazy)
    clean = _load(args.clean)
    _prepare_out_dir(args.out, args.force,
                     ("synthesized.png", transfer.STYLE_T, transfer.STYLE_A, transfer.STYLE_META))
    padded, dims = imgio.pad_to_multiple(hazy)
    style = transfer.extract_style(padded, cfg)
    style = transfer.HazeStyle(
        transmission=imgio.crop_to(style.transmission, dims),
        airlight=imgio.crop_to(style.airlight, dims),
    )
    hazy_out = transfer.apply_style(clean, style)
    transfer.save_style(style, args.out)
    imgio.save_image_u8(hazy_out, args.out / "synthesized.png")
    print(f"transferred haze of {args.hazy} onto {args.clean} -> {args.out / 'synthesized.png'}")
    return EXIT_OK


def cmd_eval(args):
    pred = _load(args.pred)
    ref = _load(args.ref)
    try:
        report = metrics.evaluate(pred, ref)
    except ValueError as err:
        raise CliError(str(err), EXIT_USAGE) from err
    psnr_text = "inf" if np.isinf(report.psnr_db) else f"{report.psnr_db:.4f}"
    print(f"psnr_db: {psnr_text}")
    print(f"ssim: {report.ssim:.6f}")
    print(f"ssim_convention: {report.convention}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _solver_config(args)
    img = _load(args.input)
    ref = _load(args.ref) if args.ref is not None else None
    variants = [(term, term) for term in solver.ABLATABLE_TERMS] + [("full", None)]
    _prepare_out_dir(args.out, args.force, ("ablation.csv",))
    padded, dims = imgio.pad_to_multiple(img)
    rows = []
    for label, term in variants:
        out_dir = args.out / (f"without_{label}" if term else "full")
        run_cfg = cfg if term is None else replace(
            cfg, loss=replace(cfg.loss, **{f"enable_{term}": False})
        )
        _prepare_out_dir(out_dir, args.force,
                         ("dehazed.png", "transmission.png", "airlight.png", "metrics.json"))
        result, record = solver.dehaze(padded, run_cfg)
        radiance = imgio.crop_to(result.radiance, dims)
        imgio.save_image_u8(radiance, out_dir / "dehazed.png")
        imgio.save_gray16(imgio.crop_to(result.transmission, dims), out_dir / "transmission.png")
        imgio.save_image_u8(imgio.crop_to(result.airlight, dims), out_dir / "airlight.png")
        scores = metrics.evaluate(radiance, ref) if ref is not None else None
        _write_metrics(out_dir / "metrics.json", record, scores)
        rows.append((label, scores))

    lines = ["variant,psnr_db,ssim"]
    for label, scores in rows:
        if scores is None:
            lines.append(f"{label},,")
        else:
            lines.append(f"{label},{scores.psnr_db:.4f},{scores.ssim:.6f}")
    (args.out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"{'variant':<12}{'psnr_db':>10}{'ssim':>10}")
    for label, scores in rows:
        if scores is None:
            print(f"{label:<12}{'-':>10}{'-':>10}")
        else:
            print(f"{label:<12}{scores.psnr_db:>10.2f}{scores.ssim:>10.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.standard_suite(
        probes=args.probes, seed=args.seed, include_end_to_end=not args.skip_end_to_end
    )
    worst = 0.0
    for name, err in sorted(results.items()):
        status = "ok" if err <= gradcheck.REL_TOL else "FAIL"
        print(f"{name:<24} max_rel_err={err:.3e}  {status}")
        worst = max(worst, err)
    if worst > gradcheck.REL_TOL:
        print(f"worst relative error {worst:.3e} exceeds {gradcheck.REL_TOL}")
        return EXIT_NUMERICAL
    print(f"all ops within {gradcheck.REL_TOL}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "dehaze": cmd_dehaze,
        "transfer": cmd_transfer,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
