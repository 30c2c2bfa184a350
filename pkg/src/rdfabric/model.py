"""Residual reverse-distillation network: fusion, bottleneck embedding, student decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import BasicBlock

from .teacher import TAP_CHANNELS, Teacher

STANDARD = "standard"
DOMAIN_GENERALIZED = "domain_generalized"
MODES = (STANDARD, DOMAIN_GENERALIZED)


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    mode: str = STANDARD
    link_taps: Tuple[int, ...] = (0, 1)
    injection: str = "add"
    attention_reduction: int = 8
    sspcab_reduction: int = 8
    fusion_width: int = 256
    embed_channels: int = 512
    input_size: int = 256
    tap_channels: Tuple[int, ...] = TAP_CHANNELS

    def __post_init__(self):
        self.link_taps = tuple(sorted(set(int(t) for t in self.link_taps)))
        self.tap_channels = tuple(int(c) for c in self.tap_channels)
        if self.mode not in MODES:
            raise ModelConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == DOMAIN_GENERALIZED and self.link_taps:
            raise ModelConfigError("domain_generalized mode does not allow residual links")
        if any(t < 0 or t >= len(self.tap_channels) for t in self.link_taps):
            raise ModelConfigError(f"link taps out of range: {self.link_taps}")
        if self.injection not in ("add", "concat"):
            raise ModelConfigError(f"injection must be 'add' or 'concat', got {self.injection!r}")
        if self.input_size % 32:
            raise ModelConfigError("input size must be a multiple of 32")

    @property
    def tap_sizes(self) -> Tuple[int, ...]:
        s = self.input_size
        return (s // 4, s // 4, s // 8, s // 16)

    @property
    def fusion_size(self) -> int:
        # half the deepest tap's spatial size
        return self.tap_sizes[-1] // 2

    @property
    def seed_size(self) -> int:
        return self.fusion_size // 2

    def link_target_shapes(self) -> List[Tuple[int, int, int]]:
        """Shape of the student hidden state fed to the block that produces s_l."""
        sizes = self.tap_sizes
        c = self.tap_channels
        return [
            (c[0], sizes[0], sizes[0]),            # s1 feeds the same-resolution block
            (c[2], sizes[1], sizes[1]),            # upsampled s2
            (c[3], sizes[2], sizes[2]),            # upsampled s3
            (self.embed_channels, sizes[3], sizes[3]),
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["link_taps"] = list(self.link_taps)
        d["tap_channels"] = list(self.tap_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def conv1x1(cin: int, cout: int, stride: int = 1, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=1, stride=stride, bias=bias)


def _check_channels(x: torch.Tensor, channels: int, who: str):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"{who} expects {channels} channels, got input of shape {tuple(x.shape)}")


class AttentionBlock(nn.Module):
    """Gate ``x * sigmoid(W2 relu(W1 x))`` built from two 1x1 convolutions."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.squeeze = conv1x1(channels, hidden)
        self.expand = conv1x1(hidden, channels)
        nn.init.zeros_(self.squeeze.bias)
        nn.init.zeros_(self.expand.bias)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.expand(F.relu(self.squeeze(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "attention block")
        return x * self.gate(x)


class ResidualLink(nn.Module):
    """Teacher tap -> student hidden state: pool, 1x1 projection, attention."""

    def __init__(self, tap_channels: int, target_shape: Tuple[int, int, int], reduction: int = 8):
        super().__init__()
        channels, h, w = target_shape
        self.target_shape = tuple(target_shape)
        self.tap_channels = tap_channels
        self.pool = nn.AdaptiveAvgPool2d((h, w))
        self.proj = conv1x1(tap_channels, channels)
        nn.init.zeros_(self.proj.bias)
        self.attention = AttentionBlock(channels, reduction)

    def forward(self, tap: torch.Tensor) -> torch.Tensor:
        _check_channels(tap, self.tap_channels, "residual link")
        return self.attention(self.proj(self.pool(tap)))


class SSPCAB(nn.Module):
    """Masked corner convolution followed by squeeze-excitation channel attention.

    Output position (i, j) only reads the four input positions at
    (i +- off, j +- off) with ``off = kernel_dim + dilation``; the centre is
    never seen, so the block learns to predict it from its surroundings.
    """

    def __init__(self, channels: int, kernel_dim: int = 1, dilation: int = 1, reduction: int = 8):
        super().__init__()
        self.channels = channels
        self.pad = kernel_dim + dilation
        self.border = kernel_dim + 2 * dilation + 1
        self.corners = nn.ModuleList(
            nn.Conv2d(channels, channels, kernel_size=kernel_dim) for _ in range(4))
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def masked_conv(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "SSPCAB")
        p, b = self.pad, self.border
        x = F.pad(x, (p, p, p, p))
        out = self.corners[0](x[:, :, :-b, :-b])
        out = out + self.corners[1](x[:, :, b:, :-b])
        out = out + self.corners[2](x[:, :, :-b, b:])
        out = out + self.corners[3](x[:, :, b:, b:])
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.masked_conv(x))
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(y.mean(dim=(2, 3))))))
        return y * w[:, :, None, None]


class FeatureFusion(nn.Module):
    """Project every tap to ``width`` channels, average-pool to a common size, concatenate."""

    def __init__(self, tap_channels: Sequence[int], width: int, size: int):
        super().__init__()
        self.tap_channels = tuple(tap_channels)
        self.size = size
        self.proj = nn.ModuleList(conv1x1(c, width) for c in tap_channels)
        for conv in self.proj:
            nn.init.zeros_(conv.bias)

    def forward(self, taps: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(taps) != len(self.proj):
            raise ValueError(f"expected {len(self.proj)} taps, got {len(taps)}")
        out = [F.adaptive_avg_pool2d(conv(t), self.size) for conv, t in zip(self.proj, taps)]
        return torch.cat(out, dim=1)


class Bottleneck(nn.Module):
    """SSPCAB head, then 1x1 conv/ReLU/BN layers; the last one has stride 2."""

    def __init__(self, in_channels: int, embed_channels: int, size: int, sspcab_reduction: int = 8):
        super().__init__()
        self.in_channels = in_channels
        self.size = size
        self.sspcab = SSPCAB(in_channels, reduction=sspcab_reduction)
        self.inner = nn.Sequential(
            conv1x1(in_channels, embed_channels), nn.ReLU(), nn.BatchNorm2d(embed_channels))
        self.final = nn.Sequential(
            conv1x1(embed_channels, embed_channels, stride=2), nn.ReLU(),
            nn.BatchNorm2d(embed_channels))

    def forward(self, fused: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if fused.dim() != 4 or tuple(fused.shape[1:]) != (self.in_channels, self.size, self.size):
            raise ValueError(
                f"bottleneck expects B x {self.in_channels} x {self.size} x {self.size}, "
                f"got {tuple(fused.shape)}")
        sspcab_out = self.sspcab(fused)
        return self.final(self.inner(sspcab_out)), sspcab_out


def _basic_block(cin: int, cout: int) -> BasicBlock:
    downsample = None
    if cin != cout:
        downsample = nn.Sequential(conv1x1(cin, cout, bias=False), nn.BatchNorm2d(cout))
    return BasicBlock(cin, cout, downsample=downsample)


class StudentDecoder(nn.Module):
    """Reversed ResNet-18 style decoder, one basic block per resolution.

    Blocks run seed stage, s3, s2, s1, s0. ``merge(l, h)`` is called on the
    input ``h`` of the block producing s_l, so residual links land one stage
    before the output they are compared against.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.tap_channels
        e = cfg.embed_channels
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.seed_stage = _basic_block(e, e)
        self.block3 = _basic_block(e, c[3])
        self.block2 = _basic_block(c[3], c[2])
        self.block1 = _basic_block(c[2], c[1])
        self.block0 = _basic_block(c[1], c[0])

    def forward(self, seed: torch.Tensor, merge) -> List[torch.Tensor]:
        h = self.seed_stage(self.up(seed))
        s3 = self.block3(merge(3, self.up(h)))
        s2 = self.block2(merge(2, self.up(s3)))
        s1 = self.block1(merge(1, self.up(s2)))
        s0 = self.block0(merge(0, s1))
        return [s0, s1, s2, s3]


class ForwardOutput(NamedTuple):
    student: List[torch.Tensor]
    teacher: List[torch.Tensor]
    sspcab_in: torch.Tensor
    sspcab_out: torch.Tensor


class RDModel(nn.Module):
    """Everything trainable: fusion, bottleneck, residual links and the student."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        cfg = self.cfg
        self.fusion = FeatureFusion(cfg.tap_channels, cfg.fusion_width, cfg.fusion_size)
        self.bottleneck = Bottleneck(cfg.fusion_width * len(cfg.tap_channels), cfg.embed_channels,
                                     cfg.fusion_size, cfg.sspcab_reduction)
        self.student = StudentDecoder(cfg)
        targets = cfg.link_target_shapes()
        self.links = nn.ModuleDict({
            str(t): ResidualLink(cfg.tap_channels[t], targets[t], cfg.attention_reduction)
            for t in cfg.link_taps})
        if cfg.injection == "concat":
            self.merges = nn.ModuleDict({
                str(t): conv1x1(2 * targets[t][0], targets[t][0]) for t in cfg.link_taps})
        else:
            self.merges = nn.ModuleDict()
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def residual_link(self, tap_index: int, tap: torch.Tensor,
                      mode: Optional[str] = None) -> torch.Tensor:
        if (mode or self.cfg.mode) == DOMAIN_GENERALIZED:
            raise ModelConfigError("residual links are disabled in domain_generalized mode")
        key = str(tap_index)
        if key not in self.links:
            raise ModelConfigError(f"no residual link configured for tap {tap_index}")
        return self.links[key](tap)

    def forward(self, teacher_feats: Sequence[torch.Tensor], mode: Optional[str] = None,
                disabled_links: Sequence[int] = ()):
        """Student pyramid for precomputed teacher taps.

        ``mode`` overrides the configured mode for this call only; passing
        ``domain_generalized`` runs the same weights without any injection.

        Returns (student [s0..s3], sspcab_in, sspcab_out).
        """
        mode = mode or self.cfg.mode
        if mode not in MODES:
            raise ModelConfigError(f"unknown mode {mode!r}")
        fused = self.fusion(teacher_feats)
        seed, sspcab_out = self.bottleneck(fused)
        use_links = mode == STANDARD

        def merge(tap_index: int, h: torch.Tensor) -> torch.Tensor:
            key = str(tap_index)
            if not use_links or key not in self.links or tap_index in disabled_links:
                return h
            inj = self.links[key](teacher_feats[tap_index])
            if key in self.merges:
                return self.merges[key](torch.cat([h, inj], dim=1))
            return h + inj

        student = self.student(seed, merge)
        return student, fused, sspcab_out

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def model_forward(images: torch.Tensor, teacher: Teacher, model: RDModel,
                  mode: Optional[str] = None) -> ForwardOutput:
    with torch.no_grad():
        t = teacher(images)
    s, sspcab_in, sspcab_out = model(t, mode=mode)
    return ForwardOutput(s, t, sspcab_in, sspcab_out)
