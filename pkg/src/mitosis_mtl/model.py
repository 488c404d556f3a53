"""Multi-task network: pre-activation residual encoder, a classification head
and two U-Net-like decoders (binary segmentation, pixel-level classification).
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointIoError, CorruptFile, InvalidConfig, ShapeMismatch, VersionMismatch

CHECKPOINT_MAGIC = b"MTLCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    stem_channels: int = 16
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    cls_hidden: tuple[int, int] = (64, 32)
    seed: int = 0

    def __post_init__(self) -> None:
        # tolerate lists coming from JSON / config files
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "cls_hidden", tuple(int(c) for c in self.cls_hidden))

    def validate(self) -> None:
        if self.input_size < 8 or self.input_size % 8:
            raise InvalidConfig(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if len(self.stage_channels) != 4:
            raise InvalidConfig(f"stage_channels needs 4 widths, got {len(self.stage_channels)}")
        if len(self.cls_hidden) != 2:
            raise InvalidConfig(f"cls_hidden needs 2 widths, got {len(self.cls_hidden)}")
        widths = (self.stem_channels, self.blocks_per_stage, *self.stage_channels, *self.cls_hidden)
        if min(widths) < 1:
            raise InvalidConfig("all widths and blocks_per_stage must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["cls_hidden"] = list(self.cls_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ForwardOutput(NamedTuple):
    cls_logit: torch.Tensor  # (B,)
    seg_logits: torch.Tensor  # (B, 1, H, W)
    pix_logits: torch.Tensor  # (B, 3, H, W)
    skip_features: tuple[torch.Tensor, ...]


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False)


class PreActBlock(nn.Module):
    """BN-ReLU-conv twice, plus a shortcut (1x1 projection when shape changes)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = conv3x3(in_ch, out_ch, stride)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(x))
        shortcut = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class Encoder(nn.Module):
    """Stem convolution, one full-resolution stage, then three stride-2 stages.

    Returns the four stage outputs, shallowest first. The deepest one is passed
    through a final BN-ReLU (pre-activation networks leave their output
    un-normalized).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stem = conv3x3(3, cfg.stem_channels)
        stages = []
        in_ch = cfg.stem_channels
        for i, width in enumerate(cfg.stage_channels):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(PreActBlock(in_ch, width, stride))
                in_ch = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.final_bn = nn.BatchNorm2d(in_ch)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        out = self.stem(x)
        for stage in self.stages:
            out = stage(out)
            feats.append(out)
        feats[-1] = F.relu(self.final_bn(feats[-1]))
        return feats


class ClassificationHead(nn.Module):
    """Global average pool, then three fully connected layers with ReLUs between."""

    def __init__(self, in_features: int, hidden: tuple[int, int]):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], 1)

    def forward(self, deepest: torch.Tensor) -> torch.Tensor:
        x = deepest.mean(dim=(2, 3))
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x).squeeze(1)


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = conv3x3(in_ch + skip_ch, out_ch)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.bn2 = nn.BatchNorm2d(out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.cat([x, skip], dim=1)
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class Decoder(nn.Module):
    """Three x2 up-sampling blocks fed by skips from the encoder stages."""

    def __init__(self, stage_channels: tuple[int, ...], out_channels: int):
        super().__init__()
        c0, c1, c2, c3 = stage_channels
        self.up1 = UpBlock(c3, c2, c2)
        self.up2 = UpBlock(c2, c1, c1)
        self.up3 = UpBlock(c1, c0, c0)
        self.out = nn.Conv2d(c0, out_channels, kernel_size=1)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        f0, f1, f2, f3 = feats
        x = self.up1(f3, f2)
        x = self.up2(x, f1)
        x = self.up3(x, f0)
        return self.out(x)


def _init_parameters(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class MultiTaskNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.cls_head = ClassificationHead(cfg.stage_channels[-1], cfg.cls_hidden)
        self.seg_decoder = Decoder(cfg.stage_channels, 1)
        self.pix_decoder = Decoder(cfg.stage_channels, 3)
        _init_parameters(self, cfg.seed)

    def _check_input(self, x: torch.Tensor) -> None:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeMismatch(f"expected input (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor, heads: str = "all") -> ForwardOutput:
        """Run the network.

        ``heads="cls"`` skips both decoders (used by single-task training);
        the dense outputs are then ``None``.
        """
        self._check_input(x)
        feats = self.encoder(x)
        cls_logit = self.cls_head(feats[-1])
        if heads == "cls":
            return ForwardOutput(cls_logit, None, None, tuple(feats))
        return ForwardOutput(
            cls_logit, self.seg_decoder(feats), self.pix_decoder(feats), tuple(feats)
        )

    def decoder_parameters(self):
        yield from self.seg_decoder.parameters()
        yield from self.pix_decoder.parameters()


class PrunedNet(nn.Module):
    """Classification-only network: the encoder and the classification head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.cls_head = ClassificationHead(cfg.stage_channels[-1], cfg.cls_hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeMismatch(f"expected input (B, 3, {s}, {s}), got {tuple(x.shape)}")
        return self.cls_head(self.encoder(x)[-1])


def build_model(config: ModelConfig) -> MultiTaskNet:
    return MultiTaskNet(config)


def forward(model: MultiTaskNet, batch: torch.Tensor) -> ForwardOutput:
    return model(batch)


def prune_auxiliary(model: MultiTaskNet | PrunedNet) -> PrunedNet:
    """Drop both decoders. The returned copy shares no storage with ``model``."""
    if isinstance(model, PrunedNet):
        return model
    pruned = PrunedNet(model.config)
    state = {
        k: v.clone()
        for k, v in model.state_dict().items()
        if k.startswith(("encoder.", "cls_head."))
    }
    pruned.load_state_dict(state)
    pruned.train(model.training)
    return pruned


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- checkpoints ---------------------------------------------------------------
#
# Layout (little-endian):
#   magic[8] | u32 version | u32 kind_len | kind | u32 cfg_len | cfg json
#   | u32 n_tensors | n x (u32 name_len | name | u8 dtype | u32 ndim | u32 dims... | data)
#   | sha256[32] over everything before it
#
# Tensors are stored as float32; integer buffers (BN step counters) as int64.

_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.int64, "<i8")}


def _encode(model: nn.Module) -> bytes:
    kind = "pruned" if isinstance(model, PrunedNet) else "full"
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for blob in (kind.encode(), json.dumps(model.config.to_dict(), sort_keys=True).encode()):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        code = 1 if tensor.dtype == torch.int64 else 0
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", code, tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        arr = tensor.detach().cpu().numpy().astype(_DTYPES[code][1])
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: nn.Module, path: str | Path) -> None:
    data = _encode(model)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CheckpointIoError(f"cannot write checkpoint {path}: {exc}") from exc


def checkpoint_bytes(model: nn.Module) -> bytes:
    return _encode(model)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFile("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_config(path: str | Path) -> tuple[str, ModelConfig]:
    kind, cfg, _ = _decode(_read(path))
    return kind, cfg


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIoError(f"cannot read checkpoint {path}: {exc}") from exc


def _decode(data: bytes) -> tuple[str, ModelConfig, dict[str, torch.Tensor]]:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptFile("bad magic bytes: not a checkpoint file")
    if len(data) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise CorruptFile("checkpoint truncated")
    body, digest = data[:-32], data[-32:]
    r = _Reader(body)
    r.take(len(CHECKPOINT_MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile("checksum mismatch")
    (n,) = r.unpack("<I")
    kind = r.take(n).decode()
    (n,) = r.unpack("<I")
    cfg = ModelConfig.from_dict(json.loads(r.take(n).decode()))
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        code, ndim = r.unpack("<BI")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype, np_dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=np_dtype).reshape(shape)
        state[name] = torch.from_numpy(arr.copy()).to(dtype)
    if r.pos != len(body):
        raise CorruptFile("trailing bytes after parameter table")
    return kind, cfg, state


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> nn.Module:
    """Load a checkpoint written by :func:`save_checkpoint`.

    The returned model is in eval mode. If ``expected_config`` is given and
    differs from the embedded one, ``VersionMismatch`` names both.
    """
    kind, cfg, state = _decode(_read(path))
    if expected_config is not None and expected_config != cfg:
        raise VersionMismatch(
            f"checkpoint {path} was written with {cfg.to_dict()}, "
            f"but {expected_config.to_dict()} was requested"
        )
    model = PrunedNet(cfg) if kind == "pruned" else MultiTaskNet(cfg)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CorruptFile(f"parameter table does not match the embedded config: {exc}") from exc
    model.eval()
    return model
