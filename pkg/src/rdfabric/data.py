"""Dataset discovery, tiling, splitting and synthetic texture generation."""
from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .teacher import IMAGENET_MEAN, IMAGENET_STD

LOGGER = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
GOOD = "good"
DEFECTIVE = "defective"
TRAIN = "train"
TEST = "test"


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    class_name: str
    split: str
    label: str
    defect_type: str = ""
    mask_path: Optional[str] = None

    def __post_init__(self):
        if self.split not in (TRAIN, TEST):
            raise ValueError(f"bad split {self.split!r}")
        if self.label not in (GOOD, DEFECTIVE):
            raise ValueError(f"bad label {self.label!r}")
        if self.label == GOOD and self.mask_path:
            raise ValueError("good samples carry no mask")
        if self.split == TRAIN and self.label != GOOD:
            raise ValueError("training samples must be defect-free")

    @property
    def is_defective(self) -> bool:
        return self.label == DEFECTIVE


def _image_files(folder: Path) -> List[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def scan_mvtec_layout(root, class_name: str, mask_suffix: str = "_mask") -> List[SampleRecord]:
    """Index ``root/class_name`` laid out like MVTec AD.

    Defective test images are matched to ``ground_truth/<defect>/<stem><mask_suffix>.*``.
    A missing mask is logged and leaves ``mask_path`` empty.
    """
    base = Path(root) / class_name
    train_dir = base / "train" / GOOD
    if not train_dir.is_dir():
        raise DatasetError(f"missing training folder {train_dir}")
    records = [SampleRecord(str(p), class_name, TRAIN, GOOD) for p in _image_files(train_dir)]

    test_dir = base / "test"
    if test_dir.is_dir():
        for sub in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            files = _image_files(sub)
            if sub.name == GOOD:
                records.extend(SampleRecord(str(p), class_name, TEST, GOOD) for p in files)
                continue
            gt_dir = base / "ground_truth" / sub.name
            masks = {m.stem: m for m in _image_files(gt_dir)}
            for p in files:
                mask = masks.get(p.stem + mask_suffix)
                if mask is None:
                    LOGGER.warning("no ground-truth mask for %s", p)
                records.append(SampleRecord(str(p), class_name, TEST, DEFECTIVE, sub.name,
                                            str(mask) if mask else None))
    return records


def export_index(records: Iterable[SampleRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_index(path) -> List[SampleRecord]:
    with open(path) as fh:
        return [SampleRecord(**json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class PatchGrid:
    source_width: int
    source_height: int
    patch_size: int
    rows: int
    cols: int
    offsets: Tuple[Tuple[int, int], ...]

    def __len__(self):
        return len(self.offsets)

    @property
    def covered_shape(self) -> Tuple[int, int]:
        """(height, width) of the tiled area."""
        return self.rows * self.patch_size, self.cols * self.patch_size


def extract_patches(image_width: int, image_height: int, patch_size: int = 256) -> PatchGrid:
    """Non-overlapping floor tiling, row-major; remainder margins are dropped."""
    if patch_size <= 0:
        raise ValueError("patch size must be positive")
    if image_width < patch_size or image_height < patch_size:
        raise ValueError(
            f"image {image_width}x{image_height} is smaller than patch size {patch_size}")
    rows = image_height // patch_size
    cols = image_width // patch_size
    offsets = tuple((c * patch_size, r * patch_size) for r in range(rows) for c in range(cols))
    return PatchGrid(image_width, image_height, patch_size, rows, cols, offsets)


def tile_image(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Cut an H x W x C array into N x P x P x C patches following ``grid``."""
    h, w = image.shape[:2]
    if (w, h) != (grid.source_width, grid.source_height):
        raise ValueError(f"grid built for {grid.source_width}x{grid.source_height}, image is {w}x{h}")
    p = grid.patch_size
    return np.stack([image[y:y + p, x:x + p] for x, y in grid.offsets])


@dataclass
class SplitConfig:
    train_fraction: float = 0.70
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")


def split_train_val(records: Sequence[SampleRecord], cfg: SplitConfig = SplitConfig()
                    ) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    if any(r.split != TRAIN for r in records):
        raise ValueError("only training records can be split")
    n = len(records)
    if n == 0:
        raise DatasetError("cannot split an empty training set")
    if n == 1:
        LOGGER.warning("single training sample: validation set is empty")
        return list(records), []
    order = list(range(n))
    random.Random(cfg.seed).shuffle(order)
    n_train = int(round(cfg.train_fraction * n))
    n_train = min(max(n_train, 1), n)
    return [records[i] for i in order[:n_train]], [records[i] for i in order[n_train:]]


def build_dg_corpus(roots: Sequence[Tuple[str, str]], mask_suffix: str = "_mask"
                    ) -> List[SampleRecord]:
    """Pool the training records of several classes for a domain-generalized model."""
    pairs = [(str(Path(r)), c) for r, c in roots]
    if len(set(pairs)) != len(pairs):
        raise DatasetError(f"duplicate (root, class) pairs in {roots}")
    if len(pairs) < 2:
        raise DatasetError("a domain-generalized corpus needs at least two classes")
    out: List[SampleRecord] = []
    for root, cls in pairs:
        out.extend(r for r in scan_mvtec_layout(root, cls, mask_suffix) if r.split == TRAIN)
    return out


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    return ((image - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32)


def to_rgb_array(img: Image.Image) -> np.ndarray:
    """PIL image -> H x W x 3 float32 in [0, 1]; grayscale is replicated."""
    return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return to_rgb_array(img)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return image
    pil = Image.fromarray(np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8))
    return to_rgb_array(pil.resize((size, size), Image.BILINEAR))


def load_image(record, target_size: int = 256, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Read, resize and normalize; returns target_size x target_size x 3 float32."""
    path = record.image_path if isinstance(record, SampleRecord) else record
    return normalize(resize(read_image(path), target_size), mean, std)


def load_mask(path: Optional[str], target_size: int = 256) -> np.ndarray:
    """Binary mask (nonzero = defect) resized with nearest neighbour; zeros if ``path`` is empty."""
    if not path:
        return np.zeros((target_size, target_size), dtype=np.uint8)
    try:
        with Image.open(path) as img:
            m = img.convert("L")
            if m.size != (target_size, target_size):
                m = m.resize((target_size, target_size), Image.NEAREST)
            return (np.asarray(m) > 0).astype(np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from exc


# --- synthetic textures -----------------------------------------------------

PATTERNS = ("plain", "stripes", "checker")
DEFECTS = ("none", "rectangle", "blob", "line_cut")


@dataclass
class SyntheticTextureSpec:
    pattern: str = "plain"
    base_color: Tuple[float, float, float] = (0.55, 0.45, 0.35)
    noise_std: float = 0.03
    defect: str = "none"
    defect_magnitude: float = 0.3
    size: int = 256
    # rectangle: (height, width); blob: (diameter, diameter); line_cut: (length, thickness)
    defect_size: Optional[Tuple[int, int]] = None
    period: int = 16
    contrast: float = 0.15

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}")
        if self.defect not in DEFECTS:
            raise ValueError(f"defect must be one of {DEFECTS}")
        if self.size < 64:
            raise ValueError("synthetic textures need size >= 64")


def _base_texture(spec: SyntheticTextureSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n]
    phase = rng.integers(0, spec.period)
    if spec.pattern == "plain":
        modulation = np.zeros((n, n))
    elif spec.pattern == "stripes":
        modulation = np.where(((xx + phase) // (spec.period // 2)) % 2 == 0, 1.0, -1.0)
    else:
        modulation = np.where((((xx + phase) // (spec.period // 2))
                               + ((yy + phase) // (spec.period // 2))) % 2 == 0, 1.0, -1.0)
    base = np.asarray(spec.base_color, dtype=np.float64)[None, None, :]
    img = base + 0.5 * spec.contrast * modulation[..., None]
    # thread-like grain shared by all channels plus a little per-channel noise
    grain = rng.normal(0.0, spec.noise_std, size=(n, n, 1))
    img = img + grain + rng.normal(0.0, spec.noise_std * 0.3, size=(n, n, 3))
    return np.clip(img, 0.0, 1.0)


def _defect_mask(spec: SyntheticTextureSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    mask = np.zeros((n, n), dtype=bool)
    if spec.defect == "none":
        return mask
    if spec.defect == "rectangle":
        h, w = spec.defect_size or tuple(rng.integers(12, 33, size=2))
        y, x = rng.integers(0, n - h + 1), rng.integers(0, n - w + 1)
        mask[y:y + h, x:x + w] = True
    elif spec.defect == "blob":
        d = (spec.defect_size or (int(rng.integers(14, 33)),) * 2)[0]
        r = d / 2.0
        cy, cx = rng.uniform(r, n - r, size=2)
        yy, xx = np.mgrid[0:n, 0:n]
        mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    else:
        length, thick = spec.defect_size or (int(rng.integers(n // 4, n // 2)), 2)
        if rng.random() < 0.5:
            y, x = rng.integers(0, n - thick + 1), rng.integers(0, n - length + 1)
            mask[y:y + thick, x:x + length] = True
        else:
            y, x = rng.integers(0, n - length + 1), rng.integers(0, n - thick + 1)
            mask[y:y + length, x:x + thick] = True
    return mask


def apply_defect(clean: np.ndarray, mask: np.ndarray, magnitude: float) -> np.ndarray:
    """Shift masked pixels away from mid-grey by ``magnitude`` (clipped to [0, 1]).

    Every masked pixel changes whenever magnitude > 0.
    """
    out = clean.copy()
    if magnitude == 0 or not mask.any():
        return out
    region = out[mask]
    direction = np.where(region < 0.5, 1.0, -1.0)
    out[mask] = np.clip(region + direction * magnitude, 0.0, 1.0)
    return out


def generate_synthetic(spec: SyntheticTextureSpec, seed: int,
                       return_clean: bool = False):
    """Texture image (H x W x 3 float32 in [0, 1]) and uint8 defect mask.

    The clean texture depends only on the seed, so ``return_clean`` yields
    the defect-free twin as a third element.
    """
    rng = np.random.default_rng(seed)
    clean = _base_texture(spec, rng)
    mask = _defect_mask(spec, rng)
    image = apply_defect(clean, mask, spec.defect_magnitude)
    out = (image.astype(np.float32), mask.astype(np.uint8))
    if return_clean:
        return out + (clean.astype(np.float32),)
    return out


def save_png(array: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if array.ndim == 2 and array.dtype == np.uint8 and array.max() <= 1:
        Image.fromarray(array * 255).save(path)
        return
    Image.fromarray(np.clip(array * 255.0 + 0.5, 0, 255).astype(np.uint8)).save(path)


@dataclass
class SyntheticClassSpec:
    """Counts and texture for one synthetic class written in MVTec layout."""
    name: str
    texture: SyntheticTextureSpec = field(default_factory=SyntheticTextureSpec)
    n_train: int = 200
    n_test_good: int = 20
    n_test_defective: int = 20
    defect: str = "rectangle"
    seed: int = 0


def write_synthetic_class(root, spec: SyntheticClassSpec) -> Path:
    """Render a synthetic class to ``root/spec.name`` with MVTec folders and masks."""
    base = Path(root) / spec.name
    rng = np.random.default_rng(spec.seed)
    seeds = rng.integers(0, 2 ** 31 - 1, size=spec.n_train + spec.n_test_good + spec.n_test_defective)
    clean_spec = SyntheticTextureSpec(**{**asdict(spec.texture), "defect": "none"})
    defect_spec = SyntheticTextureSpec(**{**asdict(spec.texture), "defect": spec.defect})
    k = 0
    for i in range(spec.n_train):
        img, _ = generate_synthetic(clean_spec, int(seeds[k])); k += 1
        save_png(img, base / "train" / GOOD / f"{i:03d}.png")
    for i in range(spec.n_test_good):
        img, _ = generate_synthetic(clean_spec, int(seeds[k])); k += 1
        save_png(img, base / "test" / GOOD / f"{i:03d}.png")
    for i in range(spec.n_test_defective):
        img, mask = generate_synthetic(defect_spec, int(seeds[k])); k += 1
        save_png(img, base / "test" / spec.defect / f"{i:03d}.png")
        save_png(mask, base / "ground_truth" / spec.defect / f"{i:03d}_mask.png")
    return base
