"""Mini-batch Adam training with validation-driven early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from wisernet.autodiff.optim import Adam
from wisernet.autodiff.tensor import Tensor, no_grad
from wisernet.config import TrainConfig
from wisernet.exceptions import NumericalError, UsageError
from wisernet.losses import lambda_schedule, total_loss
from wisernet.metrics import CLASS_NAMES, binarize, dsc
from wisernet.segnet import WaveSegNet, model_forward

logger = logging.getLogger(__name__)

# Named sub-streams of the run seed.
STREAM_DATA, STREAM_INIT, STREAM_SHUFFLE = 0, 1, 2

HISTORY_COLUMNS = (
    "epoch",
    "loss_total",
    "loss_main",
    "loss_ds",
    "loss_ortho",
    "val_dsc_od",
    "val_dsc_oc",
    "val_dsc_mean",
    "lambda",
    "improved",
)


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_main: float
    loss_ds: float
    loss_ortho: float
    val_dsc_od: float
    val_dsc_oc: float
    val_dsc_mean: float
    lam: float
    improved: bool
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def column(self, name: str) -> List[float]:
        return [getattr(r, "lam" if name == "lambda" else name) for r in self.records]

    def to_csv(self, path) -> None:
        """One row per epoch; wall-clock times are excluded so reruns compare equal."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow([
                    r.epoch,
                    f"{r.loss_total:.8f}",
                    f"{r.loss_main:.8f}",
                    f"{r.loss_ds:.8f}",
                    f"{r.loss_ortho:.8f}",
                    f"{r.val_dsc_od:.6f}",
                    f"{r.val_dsc_oc:.6f}",
                    f"{r.val_dsc_mean:.6f}",
                    f"{r.lam:.8f}",
                    int(r.improved),
                ])

    def timings_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("epoch", "wall_time"))
            for r in self.records:
                writer.writerow([r.epoch, f"{r.wall_time:.3f}"])


class EarlyStopping:
    """Track the best validation score; signal a stop after ``patience`` flat epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, score: float) -> Tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.wait = 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def predict_proba(model: WaveSegNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            res = model_forward(Tensor(images[start : start + batch_size]), model)
            out.append(res.main_probs.data)
    return np.concatenate(out, axis=0)


def mean_dsc(probs: np.ndarray, masks: np.ndarray, threshold: float = 0.5) -> Dict[str, float]:
    pred = binarize(probs, threshold)
    gt = masks > 0.5
    scores = {}
    for c, name in enumerate(CLASS_NAMES):
        scores[name] = float(np.mean([dsc(pred[i, c], gt[i, c]) for i in range(len(pred))]))
    scores["mean"] = float(np.mean([scores[n] for n in CLASS_NAMES]))
    return scores


def _check_split(name: str, images: np.ndarray, masks: np.ndarray) -> None:
    if len(images) == 0:
        raise UsageError(f"{name} split is empty")
    if len(images) != len(masks):
        raise UsageError(f"{name} split has {len(images)} images but {len(masks)} masks")


def fit(
    model: WaveSegNet,
    train: Tuple[np.ndarray, np.ndarray],
    val: Tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[WaveSegNet, TrainHistory]:
    """Train ``model`` in place and restore the best-validation weights.

    Batches are drawn from a permutation seeded by ``cfg.seed``; epochs are
    numbered from 1 for the decorrelation ramp.

    Raises:
        NumericalError: when a batch loss is not finite; ``diagnostics``
            holds the loss components, epoch and step.
    """
    x_train, y_train = train
    x_val, y_val = val
    _check_split("train", x_train, y_train)
    _check_split("validation", x_val, y_val)
    dtype = model.parameters()[0].dtype
    x_train = np.asarray(x_train, dtype=dtype)
    y_train = np.asarray(y_train, dtype=dtype)
    x_val = np.asarray(x_val, dtype=dtype)

    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    shuffle_rng = np.random.default_rng([cfg.seed, STREAM_SHUFFLE])
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory()
    best_state = model.state_dict()
    n = len(x_train)

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sums = {"total": 0.0, "main": 0.0, "ds": 0.0, "ortho": 0.0}
        batches = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            out = model_forward(Tensor(x_train[idx], dtype=dtype), model)
            loss, parts = total_loss(out, y_train[idx], cfg, epoch)
            if not all(math.isfinite(v) for v in parts.values()):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    {**parts, "epoch": epoch, "step": step},
                )
            loss.backward()
            opt.step()
            for key in sums:
                sums[key] += parts[key]
            batches += 1

        scores = mean_dsc(predict_proba(model, x_val), y_val, cfg.threshold)
        improved, stop = stopper.update(epoch, scores["mean"])
        if improved:
            best_state = model.state_dict()
        record = EpochRecord(
            epoch=epoch,
            loss_total=sums["total"] / batches,
            loss_main=sums["main"] / batches,
            loss_ds=sums["ds"] / batches,
            loss_ortho=sums["ortho"] / batches,
            val_dsc_od=scores["od"],
            val_dsc_oc=scores["oc"],
            val_dsc_mean=scores["mean"],
            lam=lambda_schedule(epoch, cfg.warmup_epochs, cfg.ramp_epochs, cfg.lambda_max),
            improved=improved,
            wall_time=time.perf_counter() - started,
        )
        history.records.append(record)
        logger.info(
            "epoch %d loss %.4f val dsc od %.2f oc %.2f lambda %.3f",
            epoch, record.loss_total, scores["od"], scores["oc"], record.lam,
        )
        if on_epoch is not None:
            on_epoch(record)
        if stop:
            history.stopped_early = True
            break

    model.load_state_dict(best_state)
    history.best_epoch = stopper.best_epoch
    return model, history
