"""Per-fold training with best-weights retention, and the cross-validation driver."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import LANDMARKS, LandmarkAnnotation, encode_targets, make_folds, resize_bilinear
from .evaluation import PixelSpacing, decode_stack, radial_error_cm
from .nn import Model, ModelConfig, atomic_write, build_model, dumps_weights, forward
from .optim import AdamState, DivergenceError, adam_step, mse_loss, pixel_accuracy
from .tensor import Graph, Tensor, no_grad

HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_accuracy_proxy", "seconds")


class TrainingError(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass
class LandmarkDataset:
    """Network-resolution images and targets, plus the annotations they came from."""

    images: np.ndarray                    # [N, 1, H, W]
    targets: np.ndarray                   # [N, L, H, W]
    annotations: list[LandmarkAnnotation]
    landmarks: tuple[str, ...]
    sigma: float

    def __len__(self) -> int:
        return len(self.images)

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def get_batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=int)
        return self.images[idx], self.targets[idx]


def prepare_dataset(images: Sequence[np.ndarray], annotations: Sequence[LandmarkAnnotation],
                    target_hw: tuple[int, int], sigma: float,
                    landmarks: Sequence[str] = LANDMARKS) -> LandmarkDataset:
    """Resize images to ``target_hw`` and encode each annotation as heatmaps."""
    if len(images) != len(annotations):
        raise ValueError(f"{len(images)} images but {len(annotations)} annotations")
    xs, ys = [], []
    for img, ann in zip(images, annotations):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        if img.shape[1:] != tuple(ann.original_hw):
            raise ValueError(f"{ann.image_id}: image is {img.shape[1:]}, annotation says "
                             f"{ann.original_hw}")
        xs.append(resize_bilinear(img, target_hw))
        ys.append(encode_targets(ann, target_hw, sigma, landmarks).data)
    h, w = target_hw
    return LandmarkDataset(
        np.stack(xs) if xs else np.zeros((0, 1, h, w)),
        np.stack(ys) if ys else np.zeros((0, len(landmarks), h, w)),
        list(annotations), tuple(landmarks), sigma)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 80
    batch_size: int = 2
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma: float = 5.0
    tau: float = 0.5
    shuffle: bool = True
    checkpoint_dir: Path | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.model.validate()

    def digest(self) -> str:
        import hashlib
        d = asdict(self)
        d["checkpoint_dir"] = None
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_csv(self, with_seconds: bool = False) -> bytes:
        """Serialize; ``seconds`` is left blank unless asked for, so files stay reproducible."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_accuracy),
                        f"{r.seconds:.3f}" if with_seconds else ""])
        return buf.getvalue().encode("utf-8")


def predict(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    outs = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            outs.append(forward(model, Tensor._wrap(images[s:s + batch_size])).data)
    if not outs:
        return np.zeros((0, model.config.out_channels, *model.config.input_hw))
    return np.concatenate(outs)


def _evaluate(model: Model, dataset: LandmarkDataset, idx: np.ndarray, config: TrainConfig):
    x, y = dataset.get_batch(idx)
    pred = predict(model, x, config.batch_size)
    diff = pred - y
    return float(np.mean(diff * diff)), pixel_accuracy(pred, y, config.tau)


def select_best_weights(history: TrainHistory, checkpoints: Mapping[int, object]):
    """Checkpoint of the epoch with the lowest validation loss; earliest epoch wins ties."""
    if not checkpoints:
        raise LookupError("no checkpoints to select from")
    losses = {r.epoch: r.val_loss for r in history.records}
    best = min(checkpoints, key=lambda ep: (losses.get(ep, math.inf), ep))
    return checkpoints[best]


def _write_checkpoint(directory: Path, state, epoch: int, val_loss: float, config: TrainConfig) -> None:
    atomic_write(directory / "best.weights", dumps_weights(state))
    meta = {"epoch": epoch, "val_loss": val_loss, "config_hash": config.digest()}
    atomic_write(directory / "best.json", (json.dumps(meta, indent=1) + "\n").encode())


def train_fold(dataset: LandmarkDataset, fold: tuple[Sequence[int], Sequence[int]],
               config: TrainConfig) -> tuple[dict[str, np.ndarray], TrainHistory]:
    """Train one model on ``fold``'s train indices, validating on its test indices every epoch.

    Returns the weights of the best validation epoch.  When
    ``config.checkpoint_dir`` is set, every improvement is written there.
    """
    config.validate()
    train_idx = np.asarray(fold[0], dtype=int)
    test_idx = np.asarray(fold[1], dtype=int)
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError("fold needs non-empty train and test sets")
    n = len(dataset)
    if train_idx.max() >= n or test_idx.max() >= n or min(train_idx.min(), test_idx.min()) < 0:
        raise IndexError(f"fold indices exceed dataset of size {n}")
    if dataset.hw != tuple(config.model.input_hw):
        raise ValueError(f"dataset is {dataset.hw}, model expects {config.model.input_hw}")
    if dataset.targets.shape[1] != config.model.out_channels:
        raise ValueError(f"dataset has {dataset.targets.shape[1]} landmarks, model outputs "
                         f"{config.model.out_channels}")

    model = build_model(config.model)
    state = AdamState(config.alpha, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_loss, best_state = math.inf, None
    ckpt = Path(config.checkpoint_dir) if config.checkpoint_dir is not None else None

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx) if config.shuffle else train_idx
        total = 0.0
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            with Graph() as g:
                x, y = dataset.get_batch(order[s:s + config.batch_size])
                loss = mse_loss(forward(model, Tensor._wrap(x)), y)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {b + 1}")
            model.zero_grad()
            g.backward(loss)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            try:
                model.params, state = adam_step(model.params, grads, state)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b + 1}: {exc}") from None
            total += value * len(x)
        train_loss = total / len(order)
        val_loss, val_acc = _evaluate(model, dataset, test_idx, config)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.records.append(EpochRecord(epoch, train_loss, val_loss, val_acc,
                                           time.perf_counter() - t0))
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.state_dict()
            history.best_epoch = epoch
            if ckpt is not None:
                _write_checkpoint(ckpt, best_state, epoch, val_loss, config)
    return best_state, history


@dataclass
class FoldResult:
    fold: int
    weights: dict[str, np.ndarray]
    history: TrainHistory
    test_indices: np.ndarray
    errors_cm: dict[str, list[float]]

    @property
    def best_val_loss(self) -> float:
        return min(self.history.val_losses)

    @property
    def mean_error_cm(self) -> float:
        vals = [v for errs in self.errors_cm.values() for v in errs]
        return math.fsum(vals) / len(vals) if vals else float("nan")


def fold_config(config: TrainConfig, fold: int) -> TrainConfig:
    """Per-fold copy with seeds offset by the fold index."""
    ckpt = Path(config.checkpoint_dir) / f"fold{fold + 1}" if config.checkpoint_dir else None
    return replace(config, seed=config.seed + fold, checkpoint_dir=ckpt,
                   model=replace(config.model, seed=config.model.seed + fold))


def landmark_errors(model: Model, dataset: LandmarkDataset, indices: Sequence[int],
                    spacing: PixelSpacing, batch_size: int = 8,
                    heatmaps: np.ndarray | None = None) -> dict[str, list[float]]:
    """Radial error (cm) per landmark over ``indices``, against the original annotations."""
    idx = np.asarray(indices, dtype=int)
    if heatmaps is None:
        heatmaps = predict(model, dataset.images[idx], batch_size)
    errors: dict[str, list[float]] = {name: [] for name in dataset.landmarks}
    for stack, i in zip(heatmaps, idx):
        ann = dataset.annotations[i]
        for name, pt in zip(dataset.landmarks, decode_stack(stack)):
            errors[name].append(radial_error_cm(pt, ann.points[name], dataset.hw,
                                                ann.original_hw, spacing))
    return errors


def run_cross_validation(dataset: LandmarkDataset, config: TrainConfig, k: int = 5,
                         spacing: PixelSpacing | None = None, jobs: int = 1) -> list[FoldResult]:
    """Train and evaluate one model per contiguous fold."""
    plan = make_folds(len(dataset), k)
    spacing = spacing if spacing is not None else PixelSpacing(1.0, 1.0)

    def run(i: int) -> FoldResult:
        cfg = fold_config(config, i)
        train_idx, test_idx = plan.folds[i]
        try:
            weights, history = train_fold(dataset, (train_idx, test_idx), cfg)
            model = build_model(cfg.model)
            model.load_state_dict(weights)
            errors = landmark_errors(model, dataset, test_idx, spacing, cfg.batch_size)
        except Exception as exc:
            raise TrainingError(i + 1, exc) from exc
        return FoldResult(i + 1, weights, history, test_idx, errors)

    if jobs <= 1:
        return [run(i) for i in range(k)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, range(k)))


def cv_summary(results: Sequence[FoldResult]) -> dict[str, float]:
    vals = [r.best_val_loss for r in results]
    errs = [r.mean_error_cm for r in results]
    return {
        "mean_best_val_loss": math.fsum(vals) / len(vals),
        "mean_error_cm": math.fsum(errs) / len(errs),
    }
