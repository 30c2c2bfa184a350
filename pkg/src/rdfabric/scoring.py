"""Localization maps, image scores and patch-wise scoring of large images."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .data import PatchGrid, normalize, resize, tile_image
from .model import RDModel
from .objective import pixel_distance_map
from .teacher import Teacher

DEFAULT_SIGMA = 4.0
TRUNCATE = 4.0


@dataclass
class AnomalyMap:
    map: np.ndarray
    per_layer_maps: List[np.ndarray] = field(default_factory=list)
    sigma: float = DEFAULT_SIGMA


@dataclass
class ImageScore:
    score: float
    argmax_location: Tuple[int, int]


def upsample(m: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(np.asarray(m, dtype=np.float64))[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def build_localization_map(per_layer_maps: Sequence[np.ndarray], target_size,
                           sigma: float = DEFAULT_SIGMA) -> AnomalyMap:
    """Upsample every layer map to ``target_size``, sum, then Gaussian-smooth."""
    if not per_layer_maps:
        raise ValueError("no layer maps given")
    if sigma is None or sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if np.isscalar(target_size):
        target_size = (int(target_size), int(target_size))
    total = np.zeros(target_size, dtype=np.float64)
    for m in per_layer_maps:
        if np.any(np.asarray(m) < 0):
            raise ValueError("layer maps must be non-negative")
        total += upsample(m, target_size)
    smoothed = gaussian_filter(total, sigma=sigma, mode="reflect", truncate=TRUNCATE)
    return AnomalyMap(np.maximum(smoothed, 0.0), [np.asarray(m) for m in per_layer_maps], sigma)


def image_score(amap) -> ImageScore:
    m = amap.map if isinstance(amap, AnomalyMap) else np.asarray(amap)
    idx = np.unravel_index(int(np.argmax(m)), m.shape)
    return ImageScore(float(m[idx]), (int(idx[0]), int(idx[1])))


def layer_maps(teacher_feats: Sequence[torch.Tensor], student_feats: Sequence[torch.Tensor]
               ) -> List[np.ndarray]:
    """Per-layer distance maps, each B x h_l x w_l, as float64 arrays."""
    return [pixel_distance_map(t, s).detach().cpu().double().numpy()
            for t, s in zip(teacher_feats, student_feats)]


class Scorer:
    """Frozen teacher + trained model wrapped for inference on normalized images."""

    def __init__(self, teacher: Teacher, model: RDModel, sigma: float = DEFAULT_SIGMA,
                 mean=None, std=None, device: str = "cpu"):
        self.teacher = teacher.to(device).eval()
        self.model = model.to(device).eval()
        self.sigma = sigma
        self.device = device
        self.mean = mean if mean is not None else teacher.spec.mean
        self.std = std if std is not None else teacher.spec.std
        self.input_size = teacher.spec.input_size

    @torch.no_grad()
    def layer_maps(self, images: np.ndarray) -> List[np.ndarray]:
        """``images``: N x S x S x 3 normalized float array."""
        x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()
        x = x.to(self.device)
        t = self.teacher(x)
        s, _, _ = self.model(t)
        return layer_maps(t, s)

    def score_batch(self, images: np.ndarray, target_size: Optional[int] = None) -> List[AnomalyMap]:
        target = target_size or images.shape[1]
        per_layer = self.layer_maps(images)
        return [build_localization_map([m[i] for m in per_layer], target, self.sigma)
                for i in range(images.shape[0])]

    def score_raw(self, raw_images: Sequence[np.ndarray], batch_size: int = 32) -> List[AnomalyMap]:
        """Score [0, 1] RGB arrays of any size; maps come back at each image's own size."""
        out = []
        for start in range(0, len(raw_images), batch_size):
            chunk = raw_images[start:start + batch_size]
            batch = np.stack([normalize(resize(im, self.input_size), self.mean, self.std)
                              for im in chunk])
            per_layer = self.layer_maps(batch)
            for i, im in enumerate(chunk):
                out.append(build_localization_map([m[i] for m in per_layer],
                                                  im.shape[:2], self.sigma))
        return out


@dataclass
class WholeImageResult:
    patch_scores: List[float]
    patch_argmax: List[Tuple[int, int]]
    stitched: np.ndarray
    score: float
    argmax_patch: int
    grid: PatchGrid

    @property
    def argmax_location(self) -> Tuple[int, int]:
        x, y = self.grid.offsets[self.argmax_patch]
        r, c = self.patch_argmax[self.argmax_patch]
        return (y + r, x + c)


def score_whole_image(image: np.ndarray, grid: PatchGrid, scorer: Scorer,
                      batch_size: int = 32) -> WholeImageResult:
    """Tile a [0, 1] RGB image, score every patch, stitch the patch maps.

    The whole-image score is the maximum patch score.
    """
    patches = tile_image(image, grid)
    maps = scorer.score_raw(list(patches), batch_size=batch_size)
    p = grid.patch_size
    stitched = np.zeros(grid.covered_shape, dtype=np.float32)
    scores, argmaxes = [], []
    for (x, y), amap in zip(grid.offsets, maps):
        stitched[y:y + p, x:x + p] = amap.map
        s = image_score(amap)
        scores.append(s.score)
        argmaxes.append(s.argmax_location)
    best = int(np.argmax(scores))
    return WholeImageResult(scores, argmaxes, stitched, scores[best], best, grid)


def export_heatmap(amap: np.ndarray, out_stem, extra: Optional[dict] = None) -> List[Path]:
    """Write ``<stem>.png`` (min-max 8-bit), ``<stem>.npy`` (float32) and ``<stem>.json``."""
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    m = np.asarray(amap, dtype=np.float32)
    lo, hi = float(m.min()), float(m.max())
    scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    png = out_stem.with_suffix(".png")
    raw = out_stem.with_suffix(".npy")
    side = out_stem.with_suffix(".json")
    Image.fromarray((scaled * 255.0 + 0.5).astype(np.uint8)).save(png)
    np.save(raw, m)
    s = image_score(m)
    meta = {"score": s.score, "argmax_location": list(s.argmax_location),
            "normalization_bounds": [lo, hi]}
    meta.update(extra or {})
    side.write_text(json.dumps(meta, indent=2))
    return [png, raw, side]
