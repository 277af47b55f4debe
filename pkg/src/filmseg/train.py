"""Losses, optimizers and the patch-based training loop."""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from filmseg import FilmSegError
from filmseg.metrics import SegmentationMask, dice
from filmseg.phantom import DceStudy
from filmseg.pipeline import Manifest, TrainingSample, Triplet, build_triplets, sample_patch
from filmseg.tensor import Tape, Tensor, backward, log_softmax_channel, softmax_channel
from filmseg.unet import (ArchitectureConfig, Checkpoint, ModelParams, build_model, forward,
                          load_checkpoint, predict_mask, save_checkpoint)

logger = logging.getLogger(__name__)

DICE_EPSILON = 1e-5
POLY_EXPONENT = 0.9
OPTIMIZERS = ("sgd", "adamw")
LR_SCHEDULES = ("poly", "constant")

# Used when the configuration leaves learning rate or weight decay unset.
OPTIMIZER_DEFAULTS = {
    "sgd": {"learning_rate": 0.01, "weight_decay": 0.0},
    "adamw": {"learning_rate": 1e-3, "weight_decay": 1e-2},
}

BEST_CHECKPOINT = "checkpoint_best.fseg"
LAST_CHECKPOINT = "checkpoint_last.fseg"
HISTORY_FILE = "history.csv"
HISTORY_COLUMNS = ("epoch", "train_loss", "val_dice", "lr")


class TrainingError(FilmSegError):
    """Error raised when training cannot start or diverges."""
    pass


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: Optional[float] = None
    momentum: float = 0.99
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    weight_decay: Optional[float] = None
    lr_schedule: str = "poly"
    epochs: int = 30
    batches_per_epoch: int = 20
    batch_size: int = 2
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    fg_probability: float = 0.5
    loss_weights: Tuple[float, float] = (1.0, 1.0)
    validation_overlap: float = 0.5
    # 0 keeps the manifest's train/val tags; k >= 2 trains on fold ``fold`` of k
    folds: int = 0
    fold: int = 0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.patch_size = tuple(self.patch_size)
        self.loss_weights = tuple(self.loss_weights)

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return OPTIMIZER_DEFAULTS[self.optimizer]["learning_rate"]

    @property
    def decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return OPTIMIZER_DEFAULTS[self.optimizer]["weight_decay"]

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"Unknown optimizer '{self.optimizer}'. Valid optimizers: {', '.join(OPTIMIZERS)}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise TrainingError(f"Unknown lr_schedule '{self.lr_schedule}'")
        if self.epochs < 1 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise TrainingError("epochs, batches_per_epoch and batch_size must be >= 1")
        if self.lr <= 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.lr}")
        if self.decay < 0:
            raise TrainingError(f"weight_decay must be >= 0, got {self.decay}")
        if min(self.loss_weights) < 0 or sum(self.loss_weights) == 0:
            raise TrainingError(f"Loss weights must be >= 0 and not both 0, got {self.loss_weights}")
        if not 0 <= self.fg_probability <= 1:
            raise TrainingError(f"fg_probability must be in [0, 1], got {self.fg_probability}")
        if self.folds == 1 or self.folds < 0:
            raise TrainingError(f"folds must be 0 (no cross-validation) or >= 2, got {self.folds}")
        if self.folds and not 0 <= self.fold < self.folds:
            raise TrainingError(f"fold must be in [0, {self.folds}), got {self.fold}")


def soft_dice_loss(probs: Tensor, target: np.ndarray, epsilon: float = DICE_EPSILON) -> Tensor:
    """1 - soft Dice of the foreground channel, averaged over the batch."""
    y = Tensor(np.asarray(target, dtype=np.float64))
    fg = probs[:, 1]
    axes = (1, 2, 3)
    overlap = (fg * y).sum(axis=axes)
    total = fg.sum(axis=axes) + y.sum(axis=axes)
    score = (2.0 * overlap + epsilon) / (total + epsilon)
    return 1.0 - score.mean()


def cross_entropy_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean voxelwise negative log-likelihood of the target class."""
    target = np.asarray(target)
    classes = logits.shape[1]
    one_hot = Tensor(np.stack([target == c for c in range(classes)], axis=1))
    voxels = target.size
    return (log_softmax_channel(logits) * one_hot).sum() * (-1.0 / voxels)


def combined_loss(logits: Tensor, target: np.ndarray, weights: Sequence[float] = (1.0, 1.0)) -> Tensor:
    """Weighted sum of soft Dice and cross-entropy."""
    dice_weight, ce_weight = weights
    loss = soft_dice_loss(softmax_channel(logits), target) * dice_weight
    return loss + cross_entropy_loss(logits, target) * ce_weight


class Optimizer:
    """Base class: holds the parameter list and per-parameter state buffers."""

    kind = "optimizer"
    buffer_names: Tuple[str, ...] = ()

    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)
        self.step_count = 0
        self.buffers: Dict[str, List[np.ndarray]] = {
            name: [np.zeros_like(p.data) for p in self.params] for name in self.buffer_names
        }

    def _grad(self, param: Tensor) -> np.ndarray:
        return np.zeros_like(param.data) if param.grad is None else param.grad

    def step(self, learning_rate: float) -> None:
        raise NotImplementedError

    def state_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "step": self.step_count,
            "buffers": {name: [b.copy() for b in bufs] for name, bufs in self.buffers.items()},
        }

    def load_state_dict(self, state: Dict) -> None:
        if state.get("kind") != self.kind:
            raise TrainingError(f"Cannot load {state.get('kind')} state into a {self.kind} optimizer")
        for name, bufs in state["buffers"].items():
            if [b.shape for b in bufs] != [p.shape for p in self.params]:
                raise TrainingError(f"Optimizer buffer '{name}' does not match the parameters")
            self.buffers[name] = [b.copy() for b in bufs]
        self.step_count = int(state["step"])


class SGDNesterov(Optimizer):
    """v <- mu*v - lr*g ; p <- p + mu*v - lr*g, with optional L2 weight decay."""

    kind = "sgd"
    buffer_names = ("velocity",)

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.99, weight_decay: float = 0.0):
        super().__init__(params)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, learning_rate: float) -> None:
        mu = self.momentum
        for param, velocity in zip(self.params, self.buffers["velocity"]):
            grad = self._grad(param)
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            velocity *= mu
            velocity -= learning_rate * grad
            param.data += mu * velocity - learning_rate * grad
        self.step_count += 1


class AdamW(Optimizer):
    """Adam with decoupled weight decay applied before the moment update."""

    kind = "adamw"
    buffer_names = ("first_moment", "second_moment")

    def __init__(self, params: Sequence[Tensor], betas: Tuple[float, float] = (0.9, 0.999),
                 epsilon: float = 1e-8, weight_decay: float = 1e-2):
        super().__init__(params)
        self.beta1, self.beta2 = betas
        self.epsilon = epsilon
        self.weight_decay = weight_decay

    def step(self, learning_rate: float) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for param, m, v in zip(self.params, self.buffers["first_moment"], self.buffers["second_moment"]):
            grad = self._grad(param)
            if self.weight_decay:
                param.data -= learning_rate * self.weight_decay * param.data
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / correction1
            v_hat = v / correction2
            param.data -= learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


def build_optimizer(params: Sequence[Tensor], config: TrainConfig) -> Optimizer:
    """SGD with Nesterov momentum or AdamW, as configured."""
    if config.optimizer == "sgd":
        return SGDNesterov(params, momentum=config.momentum, weight_decay=config.decay)
    if config.optimizer == "adamw":
        return AdamW(params, betas=config.betas, epsilon=config.adam_epsilon, weight_decay=config.decay)
    raise TrainingError(f"Unknown optimizer '{config.optimizer}'")


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Rate for the zero-based ``epoch``; poly decays as (1 - epoch/epochs)^0.9."""
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * (1.0 - epoch / config.epochs) ** POLY_EXPONENT


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def train_losses(self) -> List[float]:
        return [r.train_loss for r in self.records]

    def best(self) -> EpochRecord:
        """First epoch with the highest validation Dice, the one kept as checkpoint_best."""
        if not self.records:
            raise TrainingError("No epoch has been recorded")
        return max(self.records, key=lambda r: r.val_dice)


def write_history_csv(history: TrainingHistory, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for r in history.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_dice), repr(r.lr)])


def read_history_csv(path: str) -> TrainingHistory:
    history = TrainingHistory()
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            history.append(EpochRecord(epoch=int(row["epoch"]), train_loss=float(row["train_loss"]),
                                       val_dice=float(row["val_dice"]), lr=float(row["lr"])))
    return history


def _draw_sample(studies: List[DceStudy], triplets: Dict[str, List[Triplet]], config: TrainConfig,
                 rng: np.random.Generator) -> TrainingSample:
    study = studies[rng.integers(len(studies))]
    case_triplets = triplets[study.case_id]
    triplet = case_triplets[rng.integers(len(case_triplets))]
    return sample_patch(triplet, study.truth_mask, config.patch_size, config.fg_probability, rng,
                        case_id=study.case_id)


def validation_dice(model: ModelParams, studies: Sequence[DceStudy], config: TrainConfig) -> float:
    scores = []
    for study in studies:
        predicted = predict_mask(model, study, patch_size=config.patch_size, overlap=config.validation_overlap)
        scores.append(dice(predicted, SegmentationMask(study.truth_mask, study.spacing)))
    return float(np.mean(scores))


def _require_labelled(studies: List[DceStudy], split: str) -> None:
    if not studies:
        raise TrainingError(f"The {split} split is empty")
    unlabelled = [s.case_id for s in studies if s.truth_mask is None]
    if unlabelled:
        raise TrainingError(f"Cases without a truth mask in the {split} split: {', '.join(unlabelled)}")


def train(manifest: Manifest, architecture: ArchitectureConfig, config: TrainConfig,
          output_dir: str, progress: bool = False) -> Tuple[Checkpoint, TrainingHistory]:
    """Train one model and return its best-by-validation-Dice checkpoint with the history.

    Writes the best and last checkpoints and the history CSV to ``output_dir``.
    With ``config.folds`` set, the train and val cases are re-partitioned and
    fold ``config.fold`` is used; the partition does not depend on the seed.

    Args:
        manifest: Dataset manifest with train and val cases
        architecture: Network to build
        config: Optimization settings
        output_dir: Run directory
        progress: Show a progress bar over epochs

    Returns:
        Tuple[Checkpoint, TrainingHistory]: Best checkpoint and per-epoch records

    Raises:
        TrainingError: If a split is empty or unlabelled, or the loss is not finite
    """
    config.validate()
    if config.folds:
        manifest = manifest.fold(config.fold, config.folds)
    train_studies = manifest.load("train")
    val_studies = manifest.load("val")
    _require_labelled(train_studies, "train")
    _require_labelled(val_studies, "val")
    triplets = {s.case_id: build_triplets(s) for s in train_studies}

    os.makedirs(output_dir, exist_ok=True)
    best_path = os.path.join(output_dir, BEST_CHECKPOINT)
    last_path = os.path.join(output_dir, LAST_CHECKPOINT)

    model = build_model(architecture)
    optimizer = build_optimizer(model.parameters(), config)
    rng = np.random.default_rng(config.seed)
    history = TrainingHistory()
    best_dice = -math.inf
    logger.info("Training placement=%s on %d cases (%d validation), %d parameters",
                architecture.placement.value, len(train_studies), len(val_studies),
                model.count_parameters()["total"])

    for epoch in tqdm(range(config.epochs), desc="epochs", disable=not progress):
        lr = learning_rate_at(config, epoch)
        losses = []
        for batch_index in range(config.batches_per_epoch):
            samples = [_draw_sample(train_studies, triplets, config, rng) for _ in range(config.batch_size)]
            x = Tensor(np.stack([s.channels for s in samples]))
            labels = np.stack([s.label for s in samples])
            model.zero_grad()
            with Tape() as tape:
                logits = forward(model, x, [s.times for s in samples])
                loss = combined_loss(logits, labels, config.loss_weights)
            value = loss.item()
            if not math.isfinite(value):
                cases = ", ".join(s.case_id for s in samples)
                raise TrainingError(
                    f"Non-finite loss {value} at epoch {epoch + 1}, batch {batch_index} (cases: {cases})")
            backward(tape, loss)
            optimizer.step(lr)
            losses.append(value)

        val_dice = validation_dice(model, val_studies, config)
        record = EpochRecord(epoch=epoch + 1, train_loss=float(np.mean(losses)), val_dice=val_dice, lr=lr)
        history.append(record)
        logger.info("epoch %d: loss %.4f, val dice %.4f, lr %.5f", record.epoch, record.train_loss, val_dice, lr)

        if val_dice > best_dice:
            best_dice = val_dice
            save_checkpoint(model, best_path, epoch=record.epoch, extra={"val_dice": val_dice})
        save_checkpoint(model, last_path, epoch=record.epoch, extra={"val_dice": val_dice})

    write_history_csv(history, os.path.join(output_dir, HISTORY_FILE))
    return load_checkpoint(best_path), history
