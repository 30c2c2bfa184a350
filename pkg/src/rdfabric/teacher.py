"""Frozen ResNet-34 teacher with four feature taps."""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torchvision

LOGGER = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# torchvision's published ImageNet weights for resnet34
IMAGENET_WEIGHTS_FILE = "resnet34-b627a593.pth"
WEIGHTS_DIR_ENV = "RDFABRIC_WEIGHTS_DIR"

TAP_NAMES = ("pre_block", "stage1", "stage2", "stage3")
TAP_CHANNELS = (64, 64, 128, 256)
TAP_STRIDES = (4, 4, 8, 16)


class TeacherError(RuntimeError):
    pass


@dataclass
class BackboneSpec:
    architecture: str = "resnet34"
    tap_names: Tuple[str, ...] = TAP_NAMES
    input_size: int = 256
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD
    # "auto" tries the ImageNet file and falls back to a seeded random init;
    # "imagenet" requires the file; "random" never looks; anything else is a path.
    weights: str = "auto"
    weights_sha256: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.architecture != "resnet34":
            raise ValueError(f"unsupported architecture {self.architecture!r}")
        if tuple(self.tap_names) != TAP_NAMES:
            raise ValueError(f"tap names must be {TAP_NAMES}, got {self.tap_names}")
        self.tap_names = tuple(self.tap_names)
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)

    def tap_shapes(self) -> List[Tuple[int, int, int]]:
        """(channels, height, width) of every tap for the configured input size."""
        return [(c, self.input_size // s, self.input_size // s)
                for c, s in zip(TAP_CHANNELS, TAP_STRIDES)]

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "tap_names": list(self.tap_names),
            "input_size": self.input_size,
            "mean": list(self.mean),
            "std": list(self.std),
            "weights": self.weights,
            "weights_sha256": self.weights_sha256,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _candidate_weight_files() -> List[Path]:
    dirs = []
    if os.environ.get(WEIGHTS_DIR_ENV):
        dirs.append(Path(os.environ[WEIGHTS_DIR_ENV]))
    dirs.append(Path(torch.hub.get_dir()) / "checkpoints")
    return [d / IMAGENET_WEIGHTS_FILE for d in dirs]


def resolve_weights(spec: BackboneSpec) -> Optional[Path]:
    """Return the weight file to load, or None for a seeded random init."""
    if spec.weights == "random":
        return None
    if spec.weights in ("auto", "imagenet"):
        for path in _candidate_weight_files():
            if path.is_file():
                return path
        if spec.weights == "imagenet":
            raise TeacherError(
                f"ImageNet weights {IMAGENET_WEIGHTS_FILE} not found; set {WEIGHTS_DIR_ENV} "
                f"or place the file in {torch.hub.get_dir()}/checkpoints")
        LOGGER.warning("pretrained teacher weights not found, using seeded random init (seed=%d)",
                       spec.seed)
        return None
    path = Path(spec.weights)
    if not path.is_file():
        raise TeacherError(f"teacher weights file not found: {path}")
    return path


class Teacher(nn.Module):
    """ResNet-34 truncated after stage 3, returning the four taps shallow to deep.

    The first tap is the stem output after max-pooling. Parameters never
    require grad and the module stays in eval mode whatever ``train()`` says.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        weights_path = resolve_weights(spec)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            net = torchvision.models.resnet34(weights=None)
        self.source = "random"
        if weights_path is not None:
            if spec.weights_sha256:
                digest = file_sha256(weights_path)
                if digest != spec.weights_sha256:
                    raise TeacherError(
                        f"checksum mismatch for {weights_path}: {digest} != {spec.weights_sha256}")
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
            self.source = str(weights_path)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        # running statistics stay fixed so targets are deterministic
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        size = self.spec.input_size
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (size, size):
            raise ValueError(f"teacher expects B x 3 x {size} x {size} input, got {tuple(x.shape)}")
        t0 = self.stem(x)
        t1 = self.layer1(t0)
        t2 = self.layer2(t1)
        t3 = self.layer3(t2)
        return [t0, t1, t2, t3]

    def checksum(self) -> str:
        return parameter_checksum(self)


def load_pretrained_teacher(spec: Optional[BackboneSpec] = None) -> Teacher:
    return Teacher(spec or BackboneSpec())


@torch.no_grad()
def extract_features(teacher: Teacher, images: torch.Tensor) -> List[torch.Tensor]:
    return teacher(images)
