"""Fold loop: slope targets, batched L1 training with AdamW, evaluation.

Each fold re-initializes the model, computes closed-form slope targets for
its training patients, standardizes them with training-fold statistics,
and iterates shuffled per-slice batches. Validation Laplace log-likelihood
(sigma from training residuals) selects the checkpoint kept per fold.
Everything is deterministic given the run seed.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NormStats, PatientSample, encode_clinical, kfold_split
from .errors import DataError, MaskError, NumericalError, SingularDesignError
from .lungmask import MaskParams, extract_lung_mask
from .metrics import (MetricsReport, PatientScore, SigmaPolicy, estimate_sigma,
                      laplace_ll_mean, rmse)
from .model import (ModelConfig, forward_model, init_params, predict_slope,
                    prepare_slice, set_target_stats)
from .optim import AdamWState, ParamStore, adamw_step, evaluate_with_gradients
from .slope import DesignPair, ols_fit, reconstruct_fvc

logger = logging.getLogger(__name__)

TARGET_SD_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    folds: int = 5
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0
    precision: str = "f32"
    eval_every: int = 1
    fallback_ones_mask: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self) -> dict:
        return {"folds": self.folds, "epochs": self.epochs,
                "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "seed": self.seed, "precision": self.precision,
                "eval_every": self.eval_every,
                "fallback_ones_mask": self.fallback_ones_mask}


@dataclass
class TrainLog:
    """Per-epoch losses and per-fold summaries; serializes to JSON lines.

    Wall-clock time is kept on the object only, never in the serialized
    log, so identical-seed runs produce byte-identical files.
    """

    header: dict
    entries: list[dict] = field(default_factory=list)
    fold_summaries: list[dict] = field(default_factory=list)
    wall_clock: Optional[float] = None

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "header", **self.header}, sort_keys=True)]
        lines += [json.dumps({"type": "epoch", **e}, sort_keys=True)
                  for e in self.entries]
        lines += [json.dumps({"type": "fold_summary", **s}, sort_keys=True)
                  for s in self.fold_summaries]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def l1_slope_loss(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Mean absolute difference between predicted and true slopes."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("l1_slope_loss of empty batch")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(t - p)))


def patient_slope_target(patient: PatientSample) -> float:
    """Ground-truth decline rate via the closed-form least-squares fit."""
    pair = DesignPair(times=patient.fvc.rezeroed_times(), values=patient.fvc.values)
    return ols_fit(pair).slope


@dataclass
class _PatientData:
    """Preprocessed per-patient tensors shared by training and evaluation."""

    patient_id: str
    clin: np.ndarray          # (4,)
    images: np.ndarray        # (n_slices, 1, s, s)
    masks: np.ndarray         # (n_slices, 1, s, s)
    times: np.ndarray         # re-zeroed weeks
    values: np.ndarray        # FVC mL
    baseline: float
    target_slope: float


def _prepare_patient(patient: PatientSample, norm_stats: NormStats,
                     model_config: ModelConfig, mask_params: MaskParams,
                     fallback_ones: bool, dtype) -> _PatientData:
    clin = encode_clinical(patient.clinical, norm_stats).astype(dtype)
    try:
        target = patient_slope_target(patient)
    except SingularDesignError:
        target = float("nan")  # only reachable for report rows of test patients
    images, masks = [], []
    for idx in patient.volume.kept_indices():
        slice_hu = patient.volume.slices[idx]
        try:
            mask = extract_lung_mask(slice_hu, mask_params)
        except MaskError as exc:
            if not fallback_ones:
                raise
            logger.warning("patient %s slice %d: %s; using all-ones mask",
                           patient.patient_id, idx, exc)
            mask = np.ones_like(slice_hu, dtype=bool)
        img, msk = prepare_slice(slice_hu, mask, model_config.image_size, dtype=dtype)
        images.append(img)
        masks.append(msk)
    return _PatientData(
        patient_id=patient.patient_id,
        clin=clin,
        images=np.stack(images),
        masks=np.stack(masks),
        times=patient.fvc.rezeroed_times(),
        values=patient.fvc.values,
        baseline=patient.fvc.baseline,
        target_slope=target,
    )


def _predict_patient_slope(params: ParamStore, pdata: _PatientData,
                           config: ModelConfig) -> float:
    """Mean of per-slice predictions; invariant to slice order."""
    n = pdata.images.shape[0]
    clin = np.tile(pdata.clin, (n, 1))
    return float(np.mean(predict_slope(params, pdata.images, pdata.masks, clin, config)))


def _fvc_residuals(params: ParamStore, pdatas: Sequence[_PatientData],
                   config: ModelConfig) -> np.ndarray:
    """truth - pred over all non-baseline visits of all patients."""
    residuals = []
    for pdata in pdatas:
        s_hat = _predict_patient_slope(params, pdata, config)
        pred = reconstruct_fvc(s_hat, pdata.baseline, pdata.times[1:])
        residuals.extend((pdata.values[1:] - pred).tolist())
    return np.asarray(residuals, dtype=np.float64)


def evaluate_patients(params: ParamStore, pdatas: Sequence[_PatientData],
                      config: ModelConfig, sigma: float,
                      clip: Optional[tuple[float, float]],
                      sigma_policy: SigmaPolicy) -> MetricsReport:
    """Score reconstructed FVC at non-baseline visits, pooled over patients."""
    if not pdatas:
        raise ValueError("no patients to evaluate")
    rows = []
    all_pred, all_true = [], []
    for pdata in pdatas:
        s_hat = _predict_patient_slope(params, pdata, config)
        pred = reconstruct_fvc(s_hat, pdata.baseline, pdata.times[1:])
        true = pdata.values[1:]
        rows.append(PatientScore(
            patient_id=pdata.patient_id,
            visits_scored=int(true.size),
            predicted_slope=s_hat,
            true_slope=pdata.target_slope,
            rmse=rmse(pred, true),
            lll=laplace_ll_mean(pred, true, sigma, clip),
        ))
        all_pred.extend(pred.tolist())
        all_true.extend(true.tolist())
    residuals = (np.asarray(all_true) - np.asarray(all_pred)).tolist()
    return MetricsReport(
        per_patient=rows,
        rmse=rmse(all_pred, all_true),
        lll=laplace_ll_mean(all_pred, all_true, sigma, clip),
        sigma=sigma,
        sigma_policy=sigma_policy.to_dict(),
        n_visits=len(all_true),
        residuals=residuals,
    )


def evaluate_model(params: ParamStore, model_config: ModelConfig,
                   patients: Sequence[PatientSample], norm_stats: NormStats,
                   sigma_policy: SigmaPolicy,
                   train_residuals: Optional[Sequence[float]] = None,
                   sigma_value: Optional[float] = None,
                   mask_params: Optional[MaskParams] = None,
                   fallback_ones: bool = True) -> MetricsReport:
    """MetricsReport for a patient set under a sigma policy.

    With the train-residual policy, sigma comes from train_residuals when
    given, else from sigma_value (e.g. the value stored at training time).
    """
    if not patients:
        raise ValueError("no patients to evaluate")
    if sigma_policy.mode == "fixed":
        sigma = float(sigma_policy.sigma)
    elif train_residuals is not None:
        sigma = estimate_sigma(train_residuals)
    elif sigma_value is not None:
        sigma = float(sigma_value)
    else:
        raise ValueError("train-residual sigma policy needs train_residuals "
                         "or sigma_value")
    mask_params = mask_params or MaskParams()
    dtype = params["target_mean"].data.dtype
    pdatas = [_prepare_patient(p, norm_stats, model_config, mask_params,
                               fallback_ones, dtype) for p in patients]
    return evaluate_patients(params, pdatas, model_config, sigma,
                             sigma_policy.clip, sigma_policy)


def evaluate_checkpoint(checkpoint_path: str | Path,
                        patients: Sequence[PatientSample],
                        sigma_policy: SigmaPolicy,
                        mask_params: Optional[MaskParams] = None,
                        fallback_ones: bool = True,
                        dtype=np.float32) -> MetricsReport:
    """Evaluate straight from a checkpoint archive.

    Model config, normalization stats and the stored training-residual
    sigma all come from the checkpoint metadata; the config hash is
    verified against the reconstructed configuration.
    """
    params, header = load_checkpoint(checkpoint_path, dtype=dtype)
    meta = header.get("meta", {})
    try:
        mc = dict(meta["model_config"])
        mc["cnn_channels"] = tuple(mc["cnn_channels"])
        model_config = ModelConfig(**mc)
        norm_stats = NormStats(**meta["norm_stats"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"checkpoint {checkpoint_path} missing model "
                        f"metadata: {exc}") from exc
    if model_config.config_hash() != header.get("config_hash"):
        raise DataError(f"checkpoint {checkpoint_path}: config hash mismatch")
    return evaluate_model(params, model_config, patients, norm_stats,
                          sigma_policy,
                          sigma_value=meta.get("sigma_train_residual"),
                          mask_params=mask_params,
                          fallback_ones=fallback_ones)


@dataclass
class FoldResult:
    fold: int
    params: ParamStore
    norm_stats: NormStats
    sigma: float
    best_epoch: int
    val_report: MetricsReport
    checkpoint_path: Optional[Path] = None


def _batch_graph(config: ModelConfig, images, masks, clins, targets_z):
    def graph(params: ParamStore) -> ad.Tensor:
        z = forward_model(params, images, masks, clins, config)
        return ad.tmean(ad.absolute(ad.add(z, ad.Tensor(-targets_z))))
    return graph


def run_training(patients: Sequence[PatientSample], model_config: ModelConfig,
                 train_config: TrainConfig,
                 mask_params: Optional[MaskParams] = None,
                 out_dir: Optional[str | Path] = None,
                 run_meta: Optional[dict] = None
                 ) -> tuple[list[FoldResult], TrainLog]:
    """Full cross-validation training; returns per-fold results and the log.

    run_meta, when given, is echoed into the log header and every
    checkpoint (the CLI passes its run manifest through it).
    """
    if not patients:
        raise ValueError("empty dataset")
    mask_params = mask_params or MaskParams()
    dtype = train_config.dtype
    t_start = time.perf_counter()

    log = TrainLog(header={
        "config": train_config.to_dict(),
        "model_config": json.loads(model_config.to_json()),
        "config_hash": model_config.config_hash(),
        "n_patients": len(patients),
        "mask_params": {"tau": mask_params.tau,
                        "connectivity": mask_params.connectivity,
                        "dilation_radius": mask_params.dilation_radius,
                        "border_margin": mask_params.border_margin},
    })
    if run_meta is not None:
        log.header["run"] = run_meta

    folds = kfold_split(patients, train_config.folds, train_config.seed)
    fold_seeds = np.random.SeedSequence(train_config.seed).spawn(train_config.folds)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for fold_idx, (train_p, test_p) in enumerate(folds):
        train_ids = {p.patient_id for p in train_p}
        test_ids = {p.patient_id for p in test_p}
        assert not train_ids & test_ids, \
            f"fold {fold_idx}: patient leakage {train_ids & test_ids}"

        usable_train = []
        for p in train_p:
            try:
                patient_slope_target(p)
            except SingularDesignError as exc:
                logger.warning("skipping patient %s: %s", p.patient_id, exc)
                continue
            usable_train.append(p)
        if not usable_train:
            raise NumericalError(f"fold {fold_idx}: no trainable patients")

        norm_stats = NormStats.from_records([p.clinical for p in usable_train])
        train_data = [_prepare_patient(p, norm_stats, model_config, mask_params,
                                       train_config.fallback_ones_mask, dtype)
                      for p in usable_train]
        test_data = [_prepare_patient(p, norm_stats, model_config, mask_params,
                                      train_config.fallback_ones_mask, dtype)
                     for p in test_p]

        targets = np.array([d.target_slope for d in train_data])
        # targets must match the closed-form oracle exactly (shared code path)
        for p, d in zip(usable_train, train_data):
            assert d.target_slope == patient_slope_target(p)
        t_mean = float(np.mean(targets))
        t_sd = max(float(np.std(targets)), TARGET_SD_FLOOR)

        # flatten to per-slice training samples tagged with the patient slope
        samples = []
        for d in train_data:
            assert d.patient_id in train_ids
            z = (d.target_slope - t_mean) / t_sd
            for s in range(d.images.shape[0]):
                samples.append((d.images[s], d.masks[s], d.clin, z))

        seed_init, seed_shuffle = fold_seeds[fold_idx].spawn(2)
        params = init_params(model_config,
                             seed=int(seed_init.generate_state(1)[0]), dtype=dtype)
        set_target_stats(params, t_mean, t_sd)
        state = AdamWState(lr=train_config.learning_rate)
        shuffle_rng = np.random.default_rng(seed_shuffle)

        best_lll = -np.inf
        best_epoch = 0
        best_params = params.astype(dtype)
        best_sigma = None
        best_report = None

        for epoch in range(1, train_config.epochs + 1):
            order = shuffle_rng.permutation(len(samples))
            total_abs = 0.0
            for lo in range(0, len(order), train_config.batch_size):
                idx = order[lo:lo + train_config.batch_size]
                images = np.stack([samples[i][0] for i in idx])
                masks = np.stack([samples[i][1] for i in idx])
                clins = np.stack([samples[i][2] for i in idx])
                tz = np.array([samples[i][3] for i in idx], dtype=dtype)
                graph = _batch_graph(model_config, images, masks, clins, tz)
                loss, grads = evaluate_with_gradients(graph, [], params)
                if not np.isfinite(loss):
                    raise NumericalError(f"fold {fold_idx} epoch {epoch}: "
                                         f"non-finite loss")
                adamw_step(params, grads, state)
                total_abs += loss * len(idx)
            train_loss = total_abs / len(samples)

            entry = {"fold": fold_idx, "epoch": epoch,
                     "train_loss": train_loss,
                     "train_loss_mlw": train_loss * t_sd,
                     "val_lll": None, "val_rmse": None}
            if epoch % train_config.eval_every == 0 or epoch == train_config.epochs:
                sigma = estimate_sigma(_fvc_residuals(params, train_data, model_config))
                report = evaluate_patients(
                    params, test_data, model_config, sigma, None,
                    SigmaPolicy(mode="train_residual_laplace"))
                entry["val_lll"] = report.lll
                entry["val_rmse"] = report.rmse
                if report.lll > best_lll:
                    best_lll = report.lll
                    best_epoch = epoch
                    best_params = params.astype(dtype)
                    best_sigma = sigma
                    best_report = report
            log.entries.append(entry)

        set_target_stats(best_params, t_mean, t_sd)
        ckpt_path = None
        meta = {
            "fold": fold_idx,
            "best_epoch": best_epoch,
            "sigma_train_residual": best_sigma,
            "norm_stats": {"age_min": norm_stats.age_min,
                           "age_max": norm_stats.age_max},
            "model_config": json.loads(model_config.to_json()),
            "target_mean": t_mean,
            "target_sd": t_sd,
        }
        if run_meta is not None:
            meta["run"] = run_meta
        if out_dir is not None:
            ckpt_path = out_dir / f"fold{fold_idx}.ckpt"
            save_checkpoint(ckpt_path, best_params,
                            config_hash=model_config.config_hash(), meta=meta)
        log.fold_summaries.append({
            "fold": fold_idx,
            "best_epoch": best_epoch,
            "best_val_lll": best_report.lll,
            "best_val_rmse": best_report.rmse,
            "sigma": best_sigma,
            "target_mean": t_mean,
            "target_sd": t_sd,
            "n_train_patients": len(usable_train),
            "n_test_patients": len(test_p),
        })
        results.append(FoldResult(fold=fold_idx, params=best_params,
                                  norm_stats=norm_stats, sigma=best_sigma,
                                  best_epoch=best_epoch, val_report=best_report,
                                  checkpoint_path=ckpt_path))
    log.wall_clock = time.perf_counter() - t_start
    return results, log
