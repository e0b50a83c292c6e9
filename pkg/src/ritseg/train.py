"""Training loop with Adam, validation-plateau LR decay and best-model selection."""
from __future__ import annotations

import contextlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import (
    AugmentConfig,
    DataError,
    DatasetSplit,
    Sample,
    augment,
    preprocess_split,
    default_starburst,
    sample_rng,
)
from .losses import (
    LossWeights,
    ScheduleConfig,
    boundary_mask,
    distance_targets,
    schedule,
    total_loss,
)
from .metrics import ScoreReport, score_predictions
from .model import RITnet, build_model, count_parameters
from .optim import Adam

log = logging.getLogger(__name__)


@contextlib.contextmanager
def thread_limit(n: int | None):
    """Cap BLAS threads (``RITSEG_THREADS`` when ``n`` is None); no-op without threadpoolctl."""
    if n is None:
        env = os.environ.get("RITSEG_THREADS")
        n = int(env) if env else None
    if n is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=n):
        yield


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 175
    plateau_factor: float = 10.0
    patience: int = 5
    min_delta: float = 1e-4
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_dir: str | Path | None = None
    select_by: str = "miou"  # or "loss"
    deterministic: bool = True
    preprocess: bool = True
    normalize_distance: bool = False
    gdl_absent: str = "exclude"
    eval_batch_size: int = 8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning rate, batch size and epochs must be positive")
        if self.patience < 1 or self.plateau_factor <= 1:
            raise ValueError("patience must be >= 1 and the plateau factor > 1")
        if self.select_by not in ("miou", "loss"):
            raise ValueError(f"unknown selection criterion {self.select_by!r}")


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 1e-3
    best_score: float = -np.inf
    best_epoch: int = -1
    best_val_loss: float = np.inf
    plateau_count: int = 0
    reductions: int = 0


def lr_plateau_step(state: TrainState, validation_loss: float, factor: float = 10.0,
                    patience: int = 5, min_delta: float = 1e-4) -> bool:
    """Advance the plateau counter; divide the LR once it exceeds ``patience``.

    Returns True when the learning rate was reduced.
    """
    if validation_loss < state.best_val_loss - min_delta:
        state.best_val_loss = validation_loss
        state.plateau_count = 0
        return False
    state.plateau_count += 1
    if state.plateau_count > patience:
        state.lr /= factor
        state.plateau_count = 0
        state.reductions += 1
        return True
    return False


@dataclass
class Targets:
    boundary: np.ndarray  # H x W float 0/1
    phi: np.ndarray  # C x H x W


def make_targets(label: np.ndarray, normalize: bool = False) -> Targets:
    return Targets(boundary_mask(label).astype(np.float64), distance_targets(label, normalize))


class TargetCache:
    """Boundary and distance targets per sample; recomputed when augmentation moved the label."""

    def __init__(self, samples: Sequence[Sample], normalize: bool):
        self.samples = samples
        self.normalize = normalize
        self._store: dict[int, Targets] = {}

    def get(self, index: int, label: np.ndarray | None = None) -> Targets:
        base = self.samples[index].label
        if label is not None and not np.array_equal(label, base):
            return make_targets(label, self.normalize)
        if index not in self._store:
            self._store[index] = make_targets(base, self.normalize)
        return self._store[index]


def _stack_images(images: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
    return np.stack(images).astype(dtype)[:, None]


def check_split(samples: Sequence[Sample], name: str) -> None:
    if not samples:
        raise DataError(f"the {name} split is empty")
    for s in samples:
        h, w = s.image.shape
        if h % 16 or w % 16:
            raise DataError(f"{name}/{s.id}: size {h}x{w} is not divisible by 16")


def batch_loss(model: RITnet, images, labels, targets: Sequence[Targets], weights: LossWeights,
               mode: str, absent: str = "exclude"):
    probs = model.forward(T.Tensor(_stack_images(images)), mode)
    bundle = total_loss(
        probs,
        np.stack(labels),
        np.stack([t.phi for t in targets]),
        weights,
        boundary=np.stack([t.boundary for t in targets]),
        absent=absent,
    )
    return probs, bundle


def predict_samples(model: RITnet, samples: Sequence[Sample], batch_size: int = 8) -> list[np.ndarray]:
    preds: list[np.ndarray] = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        preds.extend(model.predict(T.Tensor(_stack_images([s.image for s in chunk]))))
    return preds


def evaluate_model(model: RITnet, samples: Sequence[Sample], batch_size: int = 8) -> ScoreReport:
    """Infer-mode argmax scoring of already pre-processed samples."""
    check_split(samples, "evaluation")
    preds = predict_samples(model, samples, batch_size)
    return score_predictions(preds, [s.label for s in samples], count_parameters(model))


def evaluate(checkpoint: Checkpoint | RITnet, samples: Sequence[Sample], preprocess: bool = True,
             batch_size: int = 8) -> ScoreReport:
    model = checkpoint.to_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    if preprocess:
        samples = preprocess_split(list(samples))
    return evaluate_model(model, samples, batch_size)


def validation_pass(model: RITnet, samples: Sequence[Sample], cache: TargetCache, weights: LossWeights,
                    config: TrainConfig) -> tuple[float, float]:
    """Mean validation loss and per-image mIoU."""
    losses, preds = [], []
    bs = config.eval_batch_size
    for i in range(0, len(samples), bs):
        chunk = samples[i : i + bs]
        probs, bundle = batch_loss(
            model,
            [s.image for s in chunk],
            [s.label for s in chunk],
            [cache.get(i + j) for j in range(len(chunk))],
            weights,
            "infer",
            config.gdl_absent,
        )
        losses.append(bundle.total.item() * len(chunk))
        preds.extend(probs.data.argmax(axis=1).astype(np.uint8))
    report = score_predictions(preds, [s.label for s in samples], count_parameters(model))
    return float(np.sum(losses) / len(samples)), report.miou


def train(
    config: TrainConfig,
    data: DatasetSplit,
    model: RITnet | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    start_epoch: int = 0,
) -> Checkpoint:
    """Train and return the best checkpoint by validation mIoU (or loss).

    When ``config.checkpoint_dir`` is set, ``best.ritn``, ``last.ritn`` and a
    tab-separated ``train_log.tsv`` are written there. ``on_epoch`` receives
    each epoch's log row and may return True to stop early.
    """
    check_split(data.train, "train")
    val_split = data.validation if data.validation else data.train
    check_split(val_split, "validation")
    train_set = preprocess_split(data.train) if config.preprocess else list(data.train)
    val_set = preprocess_split(val_split) if config.preprocess else list(val_split)

    aug = config.augment
    if aug.use_starburst and aug.aug_prob > 0 and aug.starburst is None:
        h, w = train_set[0].image.shape
        asset = default_starburst(list(data.train), h, w, config.seed)
        aug = AugmentConfig(**{**aug.__dict__, "starburst": asset})

    if model is None:
        model = build_model(seed=config.seed)
    optim = Adam(model.parameters(), lr=config.lr)
    state = TrainState(epoch=start_epoch, lr=config.lr)
    train_cache = TargetCache(train_set, config.normalize_distance)
    val_cache = TargetCache(val_set, config.normalize_distance)

    out_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = (out_dir / "train_log.tsv").open("w")
        log_file.write("epoch\tlr\ttrain_loss\tval_loss\tval_miou\tl3\tl4\n")
    else:
        log_file = None

    best: Checkpoint | None = None
    n = len(train_set)
    try:
        with thread_limit(1 if config.deterministic else None):
            for epoch in range(start_epoch, start_epoch + config.epochs):
                state.epoch = epoch
                weights = schedule(epoch, config.schedule)
                order = np.random.default_rng([config.seed, epoch]).permutation(n)
                running = 0.0
                for start in range(0, n, config.batch_size):
                    idx = order[start : start + config.batch_size]
                    batch = [augment(train_set[i], aug, sample_rng(config.seed, epoch, int(i))) for i in idx]
                    targets = [train_cache.get(int(i), s.label) for i, s in zip(idx, batch)]
                    with T.Tape() as tape:
                        _, bundle = batch_loss(
                            model,
                            [s.image for s in batch],
                            [s.label for s in batch],
                            targets,
                            weights,
                            "train",
                            config.gdl_absent,
                        )
                    tape.backward(bundle.total)
                    optim.lr = state.lr
                    optim.step()
                    optim.zero_grad()
                    running += bundle.total.item() * len(idx)
                train_loss = running / n

                val_loss, val_miou = validation_pass(model, val_set, val_cache, weights, config)
                lr_used = state.lr
                lr_plateau_step(state, val_loss, config.plateau_factor, config.patience, config.min_delta)

                score = val_miou if config.select_by == "miou" else -val_loss
                if score > state.best_score:
                    state.best_score = score
                    state.best_epoch = epoch
                    best = Checkpoint.from_model(model, epoch, val_miou if config.select_by == "miou" else val_loss)
                    if out_dir is not None:
                        (out_dir / "best.ritn").write_bytes(best.to_bytes())
                row = {
                    "epoch": epoch,
                    "lr": lr_used,
                    "train_loss": train_loss,
                    "val_loss": val_loss,
                    "val_miou": val_miou,
                    "weights": weights.as_tuple(),
                }
                log.info("epoch %d lr %.2e train %.4f val %.4f mIoU %.4f", epoch, lr_used, train_loss,
                         val_loss, val_miou)
                if log_file is not None:
                    log_file.write(
                        f"{epoch}\t{lr_used:.6g}\t{train_loss:.6f}\t{val_loss:.6f}\t{val_miou:.6f}"
                        f"\t{weights.l3:.4f}\t{weights.l4:.4f}\n"
                    )
                    log_file.flush()
                if on_epoch is not None and on_epoch(row):
                    break
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        (out_dir / "last.ritn").write_bytes(Checkpoint.from_model(model, state.epoch, best.best_score).to_bytes())
    return best
