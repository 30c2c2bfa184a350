"""Image/pixel AUROC, coverage at full precision and recall, throughput benchmark."""
from __future__ import annotations

import csv
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from filelock import FileLock
from scipy.stats import rankdata

COVERAGE_TOLERANCES = (0.0, 0.02, 0.05)


class MetricError(ValueError):
    pass


def _split_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores for {labels.size} labels")
    if labels.all() or not labels.any():
        raise MetricError("both good and defective samples are required")
    return scores, labels


def auroc(scores, labels) -> float:
    """P(defective score > good score) with ties counted as one half (Mann-Whitney)."""
    scores, labels = _split_labels(scores, labels)
    ranks = rankdata(scores)  # average ranks for ties
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """AUROC pooled over every pixel of every image."""
    if len(maps) != len(masks):
        raise MetricError(f"{len(maps)} maps for {len(masks)} masks")
    flat_scores, flat_labels = [], []
    for m, g in zip(maps, masks):
        m = getattr(m, "map", m)
        m, g = np.asarray(m), np.asarray(g)
        if m.shape != g.shape:
            raise MetricError(f"map {m.shape} and mask {g.shape} are not aligned")
        flat_scores.append(m.ravel())
        flat_labels.append(g.ravel() > 0)
    labels = np.concatenate(flat_labels)
    if not labels.any():
        raise MetricError("no defective pixels in the ground truth")
    return auroc(np.concatenate(flat_scores), labels)


def coverage_at_full_precision_recall(scores, labels, tolerance: float = 0.0) -> float:
    """Fraction of samples decided automatically with zero false positives and negatives.

    Samples inside the closed band [min defect - tol, max good + tol] go to a
    human; the band is empty when the classes are separated by more than 2*tol.
    """
    if tolerance < 0:
        raise MetricError("tolerance must be non-negative")
    scores, labels = _split_labels(scores, labels)
    lo = scores[labels].min() - tolerance
    hi = scores[~labels].max() + tolerance
    if lo > hi:
        return 1.0
    ambiguous = (scores >= lo) & (scores <= hi)
    return float(1.0 - ambiguous.mean())


def minmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    span = s.max() - s.min()
    return (s - s.min()) / span if span > 0 else np.zeros_like(s)


def coverage_triple(scores, labels, tolerances=COVERAGE_TOLERANCES) -> Dict[str, float]:
    """Coverage at each tolerance on min-max normalized scores."""
    s = minmax(scores)
    return {f"tol_{t:g}": coverage_at_full_precision_recall(s, labels, t) for t in tolerances}


@dataclass
class EvalReport:
    class_name: str
    image_auroc: float
    n_good: int
    n_defective: int
    pixel_auroc: Optional[float] = None
    coverage: Optional[Dict[str, float]] = None

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


CSV_COLUMNS = ("class", "image_auroc", "pixel_auroc", "coverage_0", "coverage_002",
               "coverage_005", "n_good", "n_def")


def write_aggregate_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            cov = r.coverage or {}
            w.writerow([r.class_name, r.image_auroc,
                        "" if r.pixel_auroc is None else r.pixel_auroc,
                        cov.get("tol_0", ""), cov.get("tol_0.02", ""), cov.get("tol_0.05", ""),
                        r.n_good, r.n_defective])


@dataclass
class ThroughputReport:
    batch_size: int
    n_patches: int
    n_batches: int
    ms_per_patch: float
    patches_per_second: float
    whole_image_ms: float
    hardware: str
    batch_ms: List[float] = field(default_factory=list)


def hardware_descriptor(device: str = "cpu") -> str:
    if device.startswith("cuda") and torch.cuda.is_available():
        return f"{torch.cuda.get_device_name(0)} / torch {torch.__version__}"
    return (f"{platform.processor() or platform.machine()} x{torch.get_num_threads()} threads"
            f" / {platform.system()} / torch {torch.__version__}")


def benchmark_throughput(scorer, n_patches: int = 96, batch_size: int = 32,
                         warmup_batches: int = 1, lock_path: Optional[str] = None,
                         seed: int = 0) -> ThroughputReport:
    """Time full patch scoring (teacher, student, maps, smoothing) after warm-up.

    ``ms_per_patch`` uses the median batch time; ``whole_image_ms`` is the
    wall-clock for all ``n_patches``.
    """
    if batch_size < 1 or n_patches < batch_size:
        raise MetricError("need n_patches >= batch_size >= 1")
    lock_path = lock_path or str(Path.cwd() / ".rdfabric-bench.lock")
    size = scorer.input_size
    rng = np.random.default_rng(seed)
    patches = rng.standard_normal((n_patches, size, size, 3)).astype(np.float32)
    n_batches = math.ceil(n_patches / batch_size)
    with FileLock(lock_path):
        for _ in range(warmup_batches):
            scorer.score_batch(patches[:batch_size])
        times = []
        start = time.perf_counter()
        for b in range(n_batches):
            t0 = time.perf_counter()
            scorer.score_batch(patches[b * batch_size:(b + 1) * batch_size])
            if scorer.device.startswith("cuda"):
                torch.cuda.synchronize()
            times.append(time.perf_counter() - t0)
        total = time.perf_counter() - start
    full = [t for b, t in enumerate(times) if (b + 1) * batch_size <= n_patches] or times
    ms_per_patch = 1000.0 * float(np.median(full)) / batch_size
    return ThroughputReport(
        batch_size=batch_size, n_patches=n_patches, n_batches=n_batches,
        ms_per_patch=ms_per_patch, patches_per_second=1000.0 / ms_per_patch,
        whole_image_ms=1000.0 * total, hardware=hardware_descriptor(scorer.device),
        batch_ms=[1000.0 * t for t in times])
