"""Training loop, validation, checkpoint I/O."""
from __future__ import annotations

import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import load_image
from .model import ModelConfig, RDModel
from .objective import LossWeights, distillation_loss, per_sample_losses
from .teacher import BackboneSpec, Teacher

LOGGER = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rdfabric-checkpoint/1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 100
    batch_size: int = 4
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    early_stop_patience: int = 20
    seed: int = 0
    device: str = "cpu"
    adam_betas: Tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        # a zero rate is allowed so a run can be frozen on purpose
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ValueError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")


@dataclass
class CheckpointRecord:
    epoch: int
    val_loss: float
    model_state: dict
    model_config: ModelConfig
    backbone: BackboneSpec
    train_config: TrainConfig
    loss_weights: LossWeights
    teacher_checksum: str
    history: List[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def build_model(self) -> RDModel:
        model = RDModel(self.model_config)
        model.load_state_dict(self.model_state)
        return model.eval()


def load_images(records: Sequence, size: int, mean, std) -> np.ndarray:
    """Stack normalized images (N x S x S x 3) for records or paths."""
    return np.stack([load_image(r, size, mean, std) for r in records])


@torch.no_grad()
def teacher_features(teacher: Teacher, images: np.ndarray, batch_size: int = 16,
                     device: str = "cpu") -> List[torch.Tensor]:
    """Run the frozen teacher once over N x S x S x 3 images; returns the 4 stacked taps."""
    taps: List[List[torch.Tensor]] = [[], [], [], []]
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(
            images[start:start + batch_size].transpose(0, 3, 1, 2))).float().to(device)
        for i, f in enumerate(teacher(x)):
            taps[i].append(f.cpu())
    return [torch.cat(t) for t in taps]


def _index(feats: Sequence[torch.Tensor], idx, device: str) -> List[torch.Tensor]:
    return [f[idx].to(device) for f in feats]


@torch.no_grad()
def validate_features(feats: Sequence[torch.Tensor], model: RDModel, weights: LossWeights,
                      batch_size: int = 8, device: str = "cpu") -> float:
    """Mean per-sample grand total over cached teacher features."""
    n = len(feats[0])
    if n == 0:
        raise TrainingError("empty validation set")
    was_training = model.training
    model.eval()
    losses = []
    for start in range(0, n, batch_size):
        t = _index(feats, slice(start, start + batch_size), device)
        s, a, b = model(t)
        losses.append(per_sample_losses(t, s, weights, a, b).double().cpu())
    model.train(was_training)
    return float(torch.cat(losses).mean())


def validate(val_images: np.ndarray, model: RDModel, teacher: Teacher,
             weights: Optional[LossWeights] = None, batch_size: int = 8,
             device: str = "cpu") -> float:
    """Validation loss for N x S x S x 3 normalized images."""
    if len(val_images) == 0:
        raise TrainingError("empty validation set")
    feats = teacher_features(teacher, val_images, batch_size, device)
    return validate_features(feats, model, weights or LossWeights(), batch_size, device)


def _snapshot(model: RDModel) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def fit(train_images: np.ndarray, val_images: np.ndarray, model: RDModel, teacher: Teacher,
        cfg: TrainConfig = TrainConfig(), weights: Optional[LossWeights] = None,
        log_path=None, step_log_path=None, on_epoch=None) -> CheckpointRecord:
    """Train ``model`` against the frozen ``teacher``; returns the best-validation checkpoint.

    The model is left holding the best weights.
    """
    weights = weights or LossWeights()
    if len(train_images) == 0 or len(val_images) == 0:
        raise TrainingError("training and validation sets must be non-empty")
    device = cfg.device
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    teacher = teacher.to(device).eval()
    model = model.to(device)
    checksum = teacher.checksum()
    if any(p.requires_grad for p in teacher.parameters()):
        raise TrainingError("teacher must be frozen")

    t0 = time.perf_counter()
    train_feats = teacher_features(teacher, train_images, device=device)
    val_feats = teacher_features(teacher, val_images, device=device)
    LOGGER.info("cached teacher features for %d/%d images in %.1fs",
                len(train_images), len(val_images), time.perf_counter() - t0)

    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate,
                           betas=cfg.adam_betas)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience,
        eps=0.0)
    n = len(train_images)
    best_val, best_epoch, best_state = math.inf, 0, None
    stale = 0
    history: List[dict] = []
    step = 0
    log_fh = open(log_path, "a") if log_path else None
    step_fh = open(step_log_path, "a") if step_log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = torch.randperm(n, generator=gen)
            total, count = 0.0, 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                t = _index(train_feats, idx, device)
                s, a, b = model(t)
                loss = distillation_loss(t, s, weights, a, b)
                if not torch.isfinite(loss.grand_total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step}: {loss.as_log(step)}")
                opt.zero_grad()
                loss.grand_total.backward()
                opt.step()
                step += 1
                total += float(loss.grand_total.detach()) * len(idx)
                count += len(idx)
                if step_fh:
                    step_fh.write(json.dumps(loss.as_log(step)) + "\n")
            val = validate_features(val_feats, model, weights, device=device)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
            lr = opt.param_groups[0]["lr"]
            row = {"epoch": epoch, "train_loss": total / count, "val_loss": val, "lr": lr}
            history.append(row)
            LOGGER.info("epoch %d train %.5f val %.5f lr %.2e", epoch, row["train_loss"], val, lr)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(row)
            sched.step(val)
            if val < best_val:
                best_val, best_epoch, best_state = val, epoch, _snapshot(model)
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    LOGGER.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
            if teacher.checksum() != checksum:
                raise TrainingError("teacher parameters changed during training")
    finally:
        if log_fh:
            log_fh.close()
        if step_fh:
            step_fh.close()

    model.load_state_dict(best_state)
    model.eval()
    backbone = replace(teacher.spec, weights="random" if teacher.source == "random"
                       else teacher.source)
    return CheckpointRecord(
        epoch=best_epoch, val_loss=best_val, model_state=best_state,
        model_config=model.cfg, backbone=backbone, train_config=cfg,
        loss_weights=weights, teacher_checksum=checksum, history=history)


def save_checkpoint(record: CheckpointRecord, path) -> Path:
    """Atomically write a checkpoint archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": record.epoch,
        "val_loss": record.val_loss,
        "model_state": {k: v.cpu() for k, v in record.model_state.items()},
        "model_config": record.model_config.to_dict(),
        "backbone": record.backbone.to_dict(),
        "train_config": asdict(record.train_config),
        "loss_weights": asdict(record.loss_weights),
        "teacher_checksum": record.teacher_checksum,
        "history": record.history,
        "extra": record.extra,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> CheckpointRecord:
    try:
        with open(path, "rb") as fh:
            payload = torch.load(io.BytesIO(fh.read()), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise CheckpointError(f"checkpoint format {found!r} != {CHECKPOINT_FORMAT!r}")
    try:
        record = CheckpointRecord(
            epoch=payload["epoch"], val_loss=payload["val_loss"],
            model_state=payload["model_state"],
            model_config=ModelConfig.from_dict(payload["model_config"]),
            backbone=BackboneSpec.from_dict(payload["backbone"]),
            train_config=TrainConfig(**payload["train_config"]),
            loss_weights=LossWeights(**payload["loss_weights"]),
            teacher_checksum=payload["teacher_checksum"],
            history=payload.get("history", []), extra=payload.get("extra", {}))
        record.build_model()
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return record


def load_teacher_for(record: CheckpointRecord) -> Teacher:
    """Rebuild the teacher a checkpoint was trained against and verify its checksum."""
    teacher = Teacher(record.backbone)
    if teacher.checksum() != record.teacher_checksum:
        raise CheckpointError(
            f"teacher checksum mismatch: rebuilt {teacher.source} does not match the checkpoint")
    return teacher
