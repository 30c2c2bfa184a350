"""Record-level glue shared by the command line and the acceptance harness."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .data import DatasetError, SampleRecord, SplitConfig, load_mask, split_train_val
from .metrics import EvalReport, auroc, coverage_triple, pixel_auroc
from .model import ModelConfig, RDModel
from .objective import LossWeights
from .scoring import AnomalyMap, Scorer, image_score
from .teacher import BackboneSpec, Teacher
from .trainer import CheckpointRecord, TrainConfig, fit, load_images, save_checkpoint

LOGGER = logging.getLogger(__name__)


def train_from_records(records: Sequence[SampleRecord], model_cfg: ModelConfig,
                       backbone: BackboneSpec, train_cfg: TrainConfig,
                       weights: LossWeights, split: SplitConfig, out_dir,
                       on_epoch=None, teacher: Optional[Teacher] = None) -> CheckpointRecord:
    """Split training records, fit a fresh model and write ``checkpoint.pt`` + logs."""
    train_recs = [r for r in records if r.split == "train"]
    if not train_recs:
        raise DatasetError("no training images found")
    fit_recs, val_recs = split_train_val(train_recs, split)
    if not val_recs:
        raise DatasetError("validation split is empty; need at least two training images")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    teacher = teacher or Teacher(backbone)
    x = load_images(fit_recs, backbone.input_size, backbone.mean, backbone.std)
    v = load_images(val_recs, backbone.input_size, backbone.mean, backbone.std)
    torch.manual_seed(train_cfg.seed)
    model = RDModel(model_cfg)
    record = fit(x, v, model, teacher, train_cfg, weights,
                 log_path=out_dir / "train_log.jsonl",
                 step_log_path=out_dir / "step_log.jsonl", on_epoch=on_epoch)
    record.extra.update({"classes": sorted({r.class_name for r in train_recs}),
                         "n_train": len(fit_recs), "n_val": len(val_recs)})
    save_checkpoint(record, out_dir / "checkpoint.pt")
    return record


@dataclass
class ScoredSet:
    records: List[SampleRecord]
    maps: List[AnomalyMap]
    scores: np.ndarray
    labels: np.ndarray


def score_records(scorer: Scorer, records: Sequence[SampleRecord], batch_size: int = 32) -> ScoredSet:
    maps: List[AnomalyMap] = []
    size = scorer.input_size
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        maps.extend(scorer.score_batch(load_images(chunk, size, scorer.mean, scorer.std)))
    scores = np.array([image_score(m).score for m in maps])
    labels = np.array([r.is_defective for r in records], dtype=bool)
    return ScoredSet(list(records), maps, scores, labels)


def evaluate_records(scorer: Scorer, records: Sequence[SampleRecord], class_name: str,
                     pixel: bool = False, coverage: bool = False,
                     batch_size: int = 32) -> tuple:
    """Image AUROC (plus optional pixel AUROC and coverage) on test records.

    Returns ``(EvalReport, ScoredSet)``. Raises ValueError when the test split
    does not hold both labels.
    """
    test = [r for r in records if r.split == "test"]
    n_def = sum(r.is_defective for r in test)
    if not test or n_def == 0 or n_def == len(test):
        raise ValueError(f"{class_name}: test split needs good and defective images "
                         f"({len(test) - n_def} good, {n_def} defective)")
    scored = score_records(scorer, test, batch_size)
    report = EvalReport(class_name, auroc(scored.scores, scored.labels),
                        len(test) - n_def, n_def)
    if pixel:
        # defective images without a mask cannot label their pixels, so they sit out
        usable = [i for i, r in enumerate(test) if not r.is_defective or r.mask_path]
        if any(test[i].is_defective for i in usable):
            masks = [load_mask(test[i].mask_path, scorer.input_size) for i in usable]
            report.pixel_auroc = pixel_auroc([scored.maps[i].map for i in usable], masks)
        else:
            LOGGER.warning("%s: no ground-truth masks, pixel AUROC skipped", class_name)
    if coverage:
        report.coverage = coverage_triple(scored.scores, scored.labels)
    return report, scored
