"""Training loop, evaluation report, model selection, linear baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .autodiff import mse_loss
from .data import CellRecord, batches, ensure_features, feature_matrix, \
    target_vector
from .errors import DegenerateInputError, NumericError
from .features import ScalerParams, fit_scaler, FeatureVector, protocol_columns
from .model import SarcNetConfig, SarcNetParams, config_for_protocol, \
    init_params, load_checkpoint, save_checkpoint, sarcnet_forward
from .optim import adam_init, adam_step, zero_grads

log = logging.getLogger(__name__)

HIST_EDGES = np.arange(0.5, 5.51, 0.5)  # 10 bins of width 0.5 over [0.5, 5.5]
SCORE_MIN, SCORE_MAX = 1.0, 5.0


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 40
    epochs: int = 100
    protocol: str = "p2"
    model: SarcNetConfig | None = None
    seed: int = 0
    checkpoint_dir: Path = Path(".")
    eval_batch_size: int = 64
    threads: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise DegenerateInputError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise DegenerateInputError("epochs and batch_size must be >= 1")
        if self.model is None:
            self.model = config_for_protocol(self.protocol, seed=self.seed)
        self.checkpoint_dir = Path(self.checkpoint_dir)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_spearman: float | None
    val_mae: float
    val_mse: float
    val_r2: float | None


def predict(params: SarcNetParams, records: list[CellRecord],
            scaler: ScalerParams, batch_size: int = 64,
            cache: dict | None = None) -> np.ndarray:
    """Eval-mode raw scores for every record, in record order."""
    preds = []
    for images, feats, _ in batches(records, batch_size,
                                    params.config.input_size, scaler,
                                    cache=cache):
        out = sarcnet_forward(images, feats, params, mode="eval")
        preds.append(out.data[:, 0])
    return np.concatenate(preds).astype(np.float64)


def _safe_metrics(preds: np.ndarray, targets: np.ndarray) -> dict:
    """All four metrics; Spearman/R2 become None (flagged) when degenerate."""
    out = {"mae": M.mae(preds, targets), "mse": M.mse(preds, targets),
           "spearman": None, "r2": None, "degenerate": None}
    try:
        out["spearman"] = M.spearman(preds, targets)
    except DegenerateInputError as exc:
        out["degenerate"] = str(exc)
    try:
        out["r2"] = M.r2(preds, targets)
    except DegenerateInputError as exc:
        out["degenerate"] = str(exc)
    return out


def train(train_records: list[CellRecord], val_records: list[CellRecord],
          cfg: TrainConfig) -> tuple[SarcNetParams, list[EpochLog], ScalerParams]:
    """Minibatch MSE/Adam training with per-epoch validation.

    The checkpoint is rewritten whenever validation Spearman strictly
    exceeds the incumbent (ties keep the earlier epoch); the returned
    parameters are reloaded from that best checkpoint. If no epoch ever
    produced a defined Spearman the final parameters are returned as-is.

    lr = 0 freezes the whole model state: besides the (vacuous) optimizer
    updates this also skips batchnorm running-stat updates, so every
    epoch is a true no-op.
    """
    if not train_records or not val_records:
        raise DegenerateInputError("train and validation splits must be nonempty")
    ensure_features(train_records, cfg.protocol, cfg.threads)
    ensure_features(val_records, cfg.protocol, cfg.threads)
    scaler = fit_scaler(
        [FeatureVector(cfg.protocol, row)
         for row in feature_matrix(train_records, cfg.protocol)])

    params = init_params(cfg.model)
    state = adam_init(params.tensors, lr=cfg.lr)
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = cfg.checkpoint_dir / "best.ckpt"
    scaler_meta = {"mean": scaler.mean.tolist(), "std": scaler.std.tolist(),
                   "protocol": scaler.protocol, "fitted_on": scaler.fitted_on}
    adam_meta = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                 "epsilon": state.epsilon}

    cache: dict = {}
    logs: list[EpochLog] = []
    best_spearman = -math.inf
    best_epoch = None
    forward_mode = "train" if cfg.lr > 0 else "eval"
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, n_seen = 0.0, 0
        for batch_num, (images, feats, targets) in enumerate(
                batches(train_records, cfg.batch_size, cfg.model.input_size,
                        scaler, shuffle_seed=cfg.seed, epoch=epoch,
                        cache=cache), start=1):
            preds = sarcnet_forward(images, feats, params, mode=forward_mode)
            loss = mse_loss(preds, targets)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch {batch_num}"
                )
            zero_grads(params.tensors)
            loss.backward()
            adam_step(params.tensors, params.grads(), state)
            loss_sum += value * targets.shape[0]
            n_seen += targets.shape[0]

        val_preds = predict(params, val_records, scaler,
                            cfg.eval_batch_size, cache)
        vm = _safe_metrics(val_preds, target_vector(val_records))
        logs.append(EpochLog(epoch, loss_sum / n_seen, vm["spearman"],
                             vm["mae"], vm["mse"], vm["r2"]))
        log.info("epoch %d: train_loss=%.4f val_spearman=%s val_mae=%.4f",
                 epoch, loss_sum / n_seen,
                 "nan" if vm["spearman"] is None else f"{vm['spearman']:.4f}",
                 vm["mae"])
        if vm["spearman"] is not None and vm["spearman"] > best_spearman:
            best_spearman = vm["spearman"]
            best_epoch = epoch
            save_checkpoint(params, ckpt_path,
                            meta={"best_epoch": epoch,
                                  "val_spearman": vm["spearman"],
                                  "scaler": scaler_meta, "adam": adam_meta,
                                  "normalization": "per-image-zscore"})
    if best_epoch is None:
        log.warning("no epoch produced a defined validation Spearman; "
                    "returning final parameters")
        params.meta.update({"scaler": scaler_meta, "adam": adam_meta,
                            "normalization": "per-image-zscore"})
        return params, logs, scaler
    best = load_checkpoint(ckpt_path)
    return best, logs, scaler


def scaler_from_params(params: SarcNetParams) -> ScalerParams:
    """Rebuild the feature scaler stored in a checkpoint's metadata."""
    meta = params.meta.get("scaler")
    if not meta:
        raise DegenerateInputError("checkpoint carries no scaler metadata")
    return ScalerParams(meta["protocol"], np.asarray(meta["mean"]),
                        np.asarray(meta["std"]), meta.get("fitted_on", "train"))


def write_train_log(logs: list[EpochLog], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_spearman,val_mae,val_mse,val_r2\n")
        for e in logs:
            def fmt(v):
                return "nan" if v is None else f"{v:.6f}"
            fh.write(f"{e.epoch},{e.train_loss:.6f},{fmt(e.val_spearman)},"
                     f"{e.val_mae:.6f},{e.val_mse:.6f},{fmt(e.val_r2)}\n")


# ---------------------------------------------------------------------------
# evaluation report


@dataclass
class EvalReport:
    """Per-cell predictions plus summary metrics and per-day histograms."""

    rows: list[tuple]                 # (cell_id, ground_truth, prediction, day)
    metrics: dict
    histograms: dict[int, np.ndarray]  # day -> counts over HIST_EDGES bins
    epoch: int | None = None
    bin_edges: np.ndarray = field(default_factory=lambda: HIST_EDGES.copy())

    def predictions(self) -> np.ndarray:
        return np.asarray([r[2] for r in self.rows], dtype=np.float64)

    def targets(self) -> np.ndarray:
        return np.asarray([r[1] for r in self.rows], dtype=np.float64)

    def days(self) -> list[int]:
        return [r[3] for r in self.rows]


def day_histogram(preds: np.ndarray) -> np.ndarray:
    clamped = np.clip(preds, SCORE_MIN, SCORE_MAX)
    counts, _ = np.histogram(clamped, bins=HIST_EDGES)
    return counts


def evaluate(params: SarcNetParams, records: list[CellRecord],
             scaler: ScalerParams, batch_size: int = 64,
             cache: dict | None = None, threads: int = 1) -> EvalReport:
    """Score every record in eval mode and compile the report.

    Metrics are computed on raw predictions; clamping to [1,5] happens
    only for histogram binning. Degenerate Spearman/R2 are reported as
    flagged nulls rather than raised."""
    if not records:
        raise DegenerateInputError("cannot evaluate zero records")
    ensure_features(records, scaler.protocol, threads)
    preds = predict(params, records, scaler, batch_size, cache)
    targets = target_vector(records)
    rows = [(r.cell_id, r.ground_truth, float(p), r.day)
            for r, p in zip(records, preds)]
    metrics = _safe_metrics(preds, targets)
    histograms = {}
    for day in sorted({r.day for r in records}):
        sel = np.asarray([r.day == day for r in records])
        histograms[day] = day_histogram(preds[sel])
    return EvalReport(rows, metrics, histograms,
                      epoch=params.meta.get("best_epoch"))


# ---------------------------------------------------------------------------
# linear-regression baseline


def linear_baseline_fit(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Ordinary least squares with intercept via normal equations.

    Falls back to ridge (lambda = 1e-8) when the Gram matrix is singular
    or ill-conditioned; a still-singular system is an error.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    n, f = X.shape
    if n < f + 1:
        raise DegenerateInputError(
            f"need at least {f + 1} rows to fit {f} features, got {n}"
        )
    X1 = np.hstack([np.ones((n, 1)), X])
    gram = X1.T @ X1
    rhs = X1.T @ y
    try:
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        ridged = gram + 1e-8 * np.eye(f + 1)
        try:
            w = np.linalg.solve(ridged, rhs)
        except np.linalg.LinAlgError as exc:
            raise DegenerateInputError(
                f"normal equations singular even with ridge: {exc}"
            ) from exc
        if not np.all(np.isfinite(w)):
            raise DegenerateInputError("ridge fallback produced non-finite weights")
        return w


def linear_baseline_predict(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    return weights[0] + X @ weights[1:]
