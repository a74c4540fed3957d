"""Command-line pipeline: synth, mask, train, eval, predict, distfit, dump-features.

Every artifact embeds a run manifest (command, inputs, seed, version) so a
rerun with identical inputs and seed reproduces identical bytes; wall-clock
timing goes to a separate timing.json. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, pgmio
from .checkpoint import load_checkpoint
from .data import (NormStats, SynthSpec, generate_synthetic, load_ct_stack,
                   load_dataset, parse_clinical_csv, write_dataset)
from .errors import DataError, MaskError, NumericalError
from .lungmask import MaskParams, dilate_circular, extract_lung_mask, \
    mask_path_for, region_grow
from .metrics import SigmaPolicy, fit_distributions
from .model import ModelConfig, context_gate, prepare_slice
from .plots import render_distribution_figure, render_loss_curves
from .slope import reconstruct_fvc
from .training import (TrainConfig, evaluate_checkpoint, evaluate_model,
                       run_training)

# flat JSON config schema; command-line flags override file values
CONFIG_KEYS = {
    "seed": int, "folds": int, "epochs": int, "batch_size": int,
    "learning_rate": float, "precision": str, "eval_every": int,
    "fallback_ones": bool,
    "image_size": int, "gate_channels": int, "gate_kernel": int,
    "cnn_channels": list, "vit_embed": int, "vit_heads": int,
    "vit_depth": int, "token_grid": int, "clinical_steps": int,
    "clinical_hidden": int, "clinical_out": int, "fusion_hidden": int,
    "tau": float, "connectivity": int, "dilation_radius": float,
    "border_margin": int,
    "sigma_policy": str, "sigma": float, "clip": list,
}


@dataclass
class RunManifest:
    """Reproducibility header embedded in every artifact."""

    command: str
    seed: Optional[int] = None
    inputs: list[str] = field(default_factory=list)
    config_path: Optional[str] = None
    version: str = __version__

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed,
                "inputs": self.inputs, "config_path": self.config_path,
                "version": self.version, "tool": "fvcprog"}

    def compact(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, out_dir: Path) -> None:
        (out_dir / "run_manifest.json").write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors on exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"bad config JSON {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config must be a flat JSON object: {p}")
    unknown = set(cfg) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _pick(args_value, cfg: dict, key: str, default):
    """Flag value if given, else config file value, else default."""
    if args_value is not None:
        return args_value
    if key in cfg:
        return cfg[key]
    return default


def _model_config(cfg: dict, image_size: Optional[int] = None) -> ModelConfig:
    defaults = ModelConfig()
    channels = cfg.get("cnn_channels", list(defaults.cnn_channels))
    size = image_size if image_size is not None else cfg.get("image_size", defaults.image_size)
    token_grid = cfg.get("token_grid", size // (2 ** len(channels)))
    return ModelConfig(
        image_size=size,
        gate_channels=cfg.get("gate_channels", defaults.gate_channels),
        gate_kernel=cfg.get("gate_kernel", defaults.gate_kernel),
        cnn_channels=tuple(channels),
        vit_embed=cfg.get("vit_embed", defaults.vit_embed),
        vit_heads=cfg.get("vit_heads", defaults.vit_heads),
        vit_depth=cfg.get("vit_depth", defaults.vit_depth),
        token_grid=token_grid,
        clinical_steps=cfg.get("clinical_steps", defaults.clinical_steps),
        clinical_hidden=cfg.get("clinical_hidden", defaults.clinical_hidden),
        clinical_out=cfg.get("clinical_out", defaults.clinical_out),
        fusion_hidden=cfg.get("fusion_hidden", defaults.fusion_hidden),
    )


def _mask_params(args, cfg: dict) -> MaskParams:
    defaults = MaskParams()
    return MaskParams(
        tau=_pick(getattr(args, "tau", None), cfg, "tau", defaults.tau),
        connectivity=_pick(getattr(args, "connectivity", None), cfg,
                           "connectivity", defaults.connectivity),
        dilation_radius=_pick(getattr(args, "dilation_radius", None), cfg,
                              "dilation_radius", defaults.dilation_radius),
        border_margin=_pick(getattr(args, "border_margin", None), cfg,
                            "border_margin", defaults.border_margin),
    )


def _config_name(path: Optional[str]) -> Optional[str]:
    """Record only the config file's name so artifacts stay path-independent."""
    return Path(path).name if path else None


def _parse_clip(text: Optional[str]):
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"--clip expects 'sigma_min,error_max', got {text!r}")
    return float(parts[0]), float(parts[1])


def _sigma_policy(args, cfg: dict) -> SigmaPolicy:
    mode = _pick(getattr(args, "sigma_policy", None), cfg, "sigma_policy",
                 "train-residual")
    clip_raw = getattr(args, "clip", None)
    clip = _parse_clip(clip_raw) if clip_raw is not None else \
        (tuple(cfg["clip"]) if cfg.get("clip") else None)
    if mode == "fixed":
        sigma = _pick(getattr(args, "sigma", None), cfg, "sigma", None)
        if sigma is None:
            raise ValueError("--sigma-policy fixed requires --sigma")
        return SigmaPolicy(mode="fixed", sigma=float(sigma), clip=clip)
    if mode == "train-residual":
        return SigmaPolicy(mode="train_residual_laplace", clip=clip)
    raise ValueError(f"unknown sigma policy {mode!r}")


def _load_model_from_checkpoint(path: str, dtype):
    params, header = load_checkpoint(path, dtype=dtype)
    meta = header.get("meta", {})
    try:
        mc = dict(meta["model_config"])
        mc["cnn_channels"] = tuple(mc["cnn_channels"])
        config = ModelConfig(**mc)
        norm = NormStats(**meta["norm_stats"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"checkpoint {path} missing model metadata: {exc}") from exc
    return params, config, norm, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SynthSpec(patients=args.patients, slices_per_patient=args.slices,
                     image_size=args.image_size, visits=args.visits)
    samples = generate_synthetic(spec, seed=args.seed)
    out = Path(args.out)
    manifest = RunManifest(command="synth", seed=args.seed)
    write_dataset(samples, out, comments=(manifest.compact(),))
    manifest.save(out)
    print(f"wrote {len(samples)} synthetic patients to {out}")
    return 0


def cmd_mask(args) -> int:
    cfg = _load_config(args.config)
    params = _mask_params(args, cfg)
    if args.manifest:
        manifest_paths = [Path(args.manifest)]
    else:
        root = Path(args.data)
        if not root.exists():
            raise DataError(f"data directory not found: {root}")
        manifest_paths = sorted(root.glob("*/manifest.json"))
        if not manifest_paths:
            raise DataError(f"no patient manifests under {root}")
    seed_point = None
    if args.seed_point:
        r, c = args.seed_point.split(",")
        seed_point = (int(r), int(c))
    run = RunManifest(command="mask",
                      inputs=[str(p.name) for p in manifest_paths],
                      config_path=_config_name(args.config))

    def one_mask(slice_hu, slice_path):
        if seed_point is not None:
            h, w = slice_hu.shape
            radius = params.dilation_radius * min(h, w) / params.reference_size
            mask = dilate_circular(
                region_grow(slice_hu, seed_point, params.tau, params.connectivity),
                radius)
            if not mask.any():
                raise MaskError(f"seed point {seed_point} grew an empty "
                                f"mask in {slice_path}")
            return mask, None
        try:
            return extract_lung_mask(slice_hu, params), None
        except MaskError as exc:
            if not args.fallback_ones:
                raise MaskError(f"{slice_path}: {exc}") from None
            return np.ones_like(slice_hu, dtype=bool), f"{slice_path}: {exc}"

    n_written = 0
    for mpath in manifest_paths:
        volume = load_ct_stack(mpath)
        rel_slices = json.loads(mpath.read_text())["slices"]
        indices = list(range(volume.depth) if args.all_slices
                       else volume.kept_indices())
        slice_paths = [mpath.parent / rel_slices[i] for i in indices]
        # extraction is pure per slice; parallelize, then write in order
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(one_mask,
                                    (volume.slices[i] for i in indices),
                                    slice_paths))
        for slice_path, (mask, warning) in zip(slice_paths, results):
            if warning is not None:
                print(f"warning: {warning}; writing all-ones mask",
                      file=sys.stderr)
            pgmio.write_mask(mask_path_for(slice_path), mask,
                             comments=(run.compact(),))
            n_written += 1
    print(f"wrote {n_written} masks")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_config = TrainConfig(
        folds=_pick(args.folds, cfg, "folds", 5),
        epochs=_pick(args.epochs, cfg, "epochs", 50),
        batch_size=_pick(args.batch_size, cfg, "batch_size", 8),
        learning_rate=_pick(args.lr, cfg, "learning_rate", 2e-4),
        seed=_pick(args.seed, cfg, "seed", 0),
        precision=_pick(args.precision, cfg, "precision", "f32"),
        eval_every=_pick(args.eval_every, cfg, "eval_every", 1),
        fallback_ones_mask=_pick(True if args.fallback_ones else None, cfg,
                                 "fallback_ones", True),
    )
    model_config = _model_config(cfg, image_size=args.image_size)
    mask_params = _mask_params(args, cfg)
    patients = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest(command="train", seed=train_config.seed,
                      inputs=["clinical.csv"], config_path=_config_name(args.config))
    results, log = run_training(patients, model_config, train_config,
                                mask_params=mask_params, out_dir=out,
                                run_meta=run.to_dict())
    log.save(out / "trainlog.jsonl")
    render_loss_curves(log.entries, out / "loss_curves.svg",
                       run_header=run.compact())
    run.save(out)
    (out / "timing.json").write_text(json.dumps(
        {"wall_clock_seconds": log.wall_clock, "run": run.to_dict()},
        indent=2, sort_keys=True) + "\n")
    for r in results:
        print(f"fold {r.fold}: best epoch {r.best_epoch}, "
              f"val LLL {r.val_report.lll:.4f}, val RMSE {r.val_report.rmse:.2f}, "
              f"sigma {r.sigma:.2f} -> {r.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    policy = _sigma_policy(args, cfg)
    dtype = np.float64 if (args.precision or cfg.get("precision")) == "f64" else np.float32
    patients = load_dataset(args.data)
    report = evaluate_checkpoint(args.checkpoint, patients, policy,
                                 mask_params=_mask_params(args, cfg),
                                 fallback_ones=args.fallback_ones,
                                 dtype=dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest(command="eval", inputs=["clinical.csv", Path(args.checkpoint).name],
                      config_path=_config_name(args.config))
    (out / "metrics.json").write_text(report.to_json(run=run.to_dict()) + "\n")
    print(f"evaluated {len(report.per_patient)} patients over {report.n_visits} "
          f"visits: RMSE {report.rmse:.2f}, LLL {report.lll:.4f} "
          f"(sigma {report.sigma:.2f})")
    return 0


def cmd_predict(args) -> int:
    dtype = np.float32
    params, model_config, norm, meta = _load_model_from_checkpoint(args.checkpoint, dtype)
    patients = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest(command="predict",
                      inputs=["clinical.csv", Path(args.checkpoint).name])
    policy = SigmaPolicy(mode="train_residual_laplace")
    report = evaluate_model(params, model_config, patients, norm, policy,
                            sigma_value=meta.get("sigma_train_residual"),
                            fallback_ones=args.fallback_ones)
    slope_of = {p.patient_id: p.predicted_slope for p in report.per_patient}
    with (out / "predictions.csv").open("w", newline="") as fh:
        fh.write(f"# {run.compact()}\n")
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "week", "fvc_true", "fvc_pred", "slope"])
        for patient in patients:
            slope = slope_of[patient.patient_id]
            times = patient.fvc.rezeroed_times()
            raw_weeks = patient.fvc.times
            preds = reconstruct_fvc(slope, patient.fvc.baseline, times)
            for week, true_v, pred_v in zip(raw_weeks, patient.fvc.values, preds):
                writer.writerow([patient.patient_id, f"{week:g}", f"{true_v:g}",
                                 f"{pred_v:.2f}", f"{slope:.4f}"])
    print(f"wrote predictions for {len(patients)} patients to "
          f"{out / 'predictions.csv'}")
    return 0


def cmd_distfit(args) -> int:
    rows = parse_clinical_csv(Path(args.data) / "clinical.csv")
    values = [fvc for _, _, fvc, _ in rows]
    fit = fit_distributions(values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest(command="distfit", inputs=["clinical.csv"])
    centers = (fit.bin_edges[:-1] + fit.bin_edges[1:]) / 2.0
    widths = fit.bin_edges[1:] - fit.bin_edges[:-1]
    density = fit.counts / (fit.counts.sum() * widths)
    gauss = fit.gaussian_pdf(centers)
    lap = fit.laplace_pdf(centers)
    with (out / "distfit.csv").open("w", newline="") as fh:
        fh.write(f"# {run.compact()}\n")
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count", "density",
                         "gaussian_pdf", "laplace_pdf"])
        for i in range(len(centers)):
            writer.writerow([f"{fit.bin_edges[i]:.6g}", f"{fit.bin_edges[i+1]:.6g}",
                             int(fit.counts[i]), f"{density[i]:.8g}",
                             f"{gauss[i]:.8g}", f"{lap[i]:.8g}"])
    (out / "distfit.json").write_text(json.dumps({
        "gaussian": {"mean": fit.gaussian_mean, "sd": fit.gaussian_sd},
        "laplace": {"mu": fit.laplace.mu, "b": fit.laplace.b},
        "n_values": len(values),
        "run": run.to_dict(),
    }, indent=2, sort_keys=True) + "\n")
    render_distribution_figure(fit, out / "distfit.svg",
                               run_header=run.compact())
    print(f"fit {len(values)} FVC values: Gaussian({fit.gaussian_mean:.1f}, "
          f"{fit.gaussian_sd:.1f}), Laplace({fit.laplace.mu:.1f}, {fit.laplace.b:.1f})")
    return 0


def cmd_dump_features(args) -> int:
    params, model_config, _, _ = _load_model_from_checkpoint(args.checkpoint,
                                                             np.float32)
    manifest_path = Path(args.data) / args.patient / "manifest.json"
    volume = load_ct_stack(manifest_path)
    idx = args.slice_index if args.slice_index is not None else \
        (volume.keep_range[0] + volume.keep_range[1]) // 2
    if not 0 <= idx < volume.depth:
        raise DataError(f"slice index {idx} out of range for depth {volume.depth}")
    slice_hu = volume.slices[idx]
    try:
        mask = extract_lung_mask(slice_hu, MaskParams())
    except MaskError as exc:
        print(f"warning: {exc}; using all-ones mask", file=sys.stderr)
        mask = np.ones_like(slice_hu, dtype=bool)
    img, msk = prepare_slice(slice_hu, mask, model_config.image_size)
    gated = context_gate(params, img[None], msk[None]).data[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest(command="dump-features",
                      inputs=[f"{args.patient}/manifest.json",
                              Path(args.checkpoint).name])
    for ch in range(gated.shape[0]):
        fmap = gated[ch]
        span = float(fmap.max() - fmap.min())
        norm01 = (fmap - fmap.min()) / span if span > 0 else np.zeros_like(fmap)
        pgmio.write_pgm(out / f"features_{args.patient}_s{idx:03d}_c{ch:02d}.pgm",
                        np.rint(norm01 * 255).astype(np.uint8), maxval=255,
                        comments=(run.compact(),))
    print(f"wrote {gated.shape[0]} gate channels for {args.patient} slice {idx}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fvcprog",
                     description="FVC decline prognosis pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--patients", type=int, default=8)
    p.add_argument("--slices", type=int, default=6, help="CT slices per patient")
    p.add_argument("--visits", type=int, default=6, help="FVC visits per patient")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="batch lung-mask extraction to .mask.pgm")
    p.add_argument("--data", help="dataset root with per-patient manifests")
    p.add_argument("--manifest", help="single CT manifest instead of --data")
    p.add_argument("--config")
    p.add_argument("--tau", type=float, help="region-growing intensity tolerance (HU)")
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.add_argument("--dilation-radius", type=float, dest="dilation_radius")
    p.add_argument("--border-margin", type=int, dest="border_margin")
    p.add_argument("--seed-point", help="manual 'row,col' seed overriding auto selection")
    p.add_argument("--fallback-ones", action="store_true",
                   help="write an all-ones mask instead of failing")
    p.add_argument("--all-slices", action="store_true", dest="all_slices",
                   help="mask every listed slice, not just the keep range")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="cross-validated training run")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--tau", type=float)
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.add_argument("--dilation-radius", type=float, dest="dilation_radius")
    p.add_argument("--border-margin", type=int, dest="border_margin")
    p.add_argument("--fallback-ones", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MetricsReport from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--sigma-policy", choices=("train-residual", "fixed"),
                   dest="sigma_policy")
    p.add_argument("--sigma", type=float)
    p.add_argument("--clip", help="'sigma_min,error_max' clamping before scoring")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--fallback-ones", action="store_true", default=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-patient slope + reconstructed FVC CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fallback-ones", action="store_true", default=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("distfit", help="FVC histogram + Gaussian/Laplace fits")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distfit)

    p = sub.add_parser("dump-features", help="context-gate channels as PGM images")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--slice-index", type=int, dest="slice_index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_features)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = getattr(args, "command", "?")
    try:
        if command == "mask" and not (args.data or args.manifest):
            raise ValueError("mask needs --data or --manifest")
        return args.func(args)
    except (ValueError, TypeError) as exc:
        print(f"fvcprog {command}: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"fvcprog {command}: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"fvcprog {command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"fvcprog {command}: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
