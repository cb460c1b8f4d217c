"""SMPLGait network: silhouette CNN, SMPL-driven transform network, feature-space
alignment, set pooling and horizontal pyramid pooling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import SMPL_DIM
from .errors import ConfigError, ShapeError

CHECKPOINT_FORMAT = "smplgait-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (64, 44)
    channels: tuple = (64, 64, 128, 128, 256, 256)
    leaky_slope: float = 0.01
    stn_hidden: tuple = (128, 256)
    stn_dropout: tuple = (0.0, 0.2, 0.2)
    hpp_scales: tuple = (1, 2, 4, 8, 16)
    part_dim: int = 256
    enable_3d_branch: bool = True
    # pool over the zero-padded square map (True) or crop back to h x w
    pool_padded: bool = True
    smpl_dim: int = SMPL_DIM
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("input_size", "channels", "stn_hidden", "stn_dropout", "hpp_scales"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        H, W = self.input_size
        if H % 4 or W % 4 or H <= 0 or W <= 0:
            raise ConfigError(f"input size {H}x{W} must be positive and divisible by 4")
        if len(self.channels) != 6:
            raise ConfigError("channel plan needs exactly six entries")
        if len(self.stn_hidden) != 2 or len(self.stn_dropout) != 3:
            raise ConfigError("stn_hidden needs 2 sizes and stn_dropout 3 rates")
        if not self.hpp_scales or any(k <= 0 for k in self.hpp_scales):
            raise ConfigError("hpp_scales must be positive")
        bad = [k for k in self.hpp_scales if self.pooled_height % k]
        if bad:
            raise ConfigError(f"pooled map height {self.pooled_height} not divisible by scale(s) {bad}")

    @property
    def feature_hw(self):
        return (self.input_size[0] // 4, self.input_size[1] // 4)

    @property
    def square_side(self):
        return max(self.feature_hw)

    @property
    def transform_dim(self):
        h, w = self.feature_hw
        return h * w

    @property
    def pooled_height(self):
        return self.square_side if self.pool_padded else self.feature_hw[0]

    @property
    def num_parts(self):
        return sum(self.hpp_scales)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class SilhouetteNet(nn.Module):
    """Six 'same'-padded convolutions, LeakyReLU after each, 2x2 max pooling
    after the second and fourth."""

    def __init__(self, channels, slope=0.01):
        super().__init__()
        c = (1,) + tuple(channels)
        layers = []
        for i in range(6):
            k = 5 if i == 0 else 3
            layers += [nn.Conv2d(c[i], c[i + 1], k, stride=1, padding=k // 2), nn.LeakyReLU(slope)]
            if i in (1, 3):
                layers.append(nn.MaxPool2d(2, stride=2))
        self.layers = nn.Sequential(*layers)
        for m in self.layers:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=slope, mode="fan_in", nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.layers(x)


class TransformNet(nn.Module):
    """FC-BN-ReLU x3 mapping an SMPL vector to a flattened transform matrix.

    Dropout is applied to the input of each FC layer with the configured rate.
    The last BN starts with a small scale so the transform starts close to
    identity while ReLU still passes gradient.
    """

    init_out_gain = 1e-2

    def __init__(self, in_dim, hidden, out_dim, dropout, momentum=0.1, eps=1e-5):
        super().__init__()
        dims = (in_dim,) + tuple(hidden) + (out_dim,)
        self.drops = nn.ModuleList(nn.Dropout(p) for p in dropout)
        self.fcs = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(3))
        self.bns = nn.ModuleList(nn.BatchNorm1d(dims[i + 1], eps=eps, momentum=momentum) for i in range(3))
        for fc in self.fcs:
            nn.init.kaiming_normal_(fc.weight, nonlinearity="relu")
            nn.init.zeros_(fc.bias)
        nn.init.constant_(self.bns[-1].weight, self.init_out_gain)

    def forward(self, y):
        for drop, fc, bn in zip(self.drops, self.fcs, self.bns):
            y = F.relu(bn(fc(drop(y))))
        return y

    @torch.no_grad()
    def zero_output_(self):
        """Force an all-zero output (identity transform) for any input."""
        for t in (self.fcs[-1].weight, self.fcs[-1].bias, self.bns[-1].weight, self.bns[-1].bias):
            t.zero_()


def pad_to_square(x, side):
    """Zero-pad the last two dims of ``x`` (bottom/right) to side x side."""
    rows, cols = x.shape[-2:]
    return F.pad(x, (0, side - cols, 0, side - rows))


def apply_spatial_transform(fmap, g, feature_hw=None):
    """Align feature maps with per-frame transforms.

    fmap: (N, C, h, w); g: (N, h*w). ``g`` is reshaped to G of shape (w, h),
    both are zero-padded to s x s with s = max(h, w), and every channel is
    right-multiplied by the same (I + G). Returns (N, C, s, s).
    """
    n, c, h, w = fmap.shape
    if feature_hw is not None and (h, w) != tuple(feature_hw):
        raise ShapeError(f"feature map {h}x{w} does not match config {feature_hw}")
    if g.shape != (n, h * w):
        raise ShapeError(f"transform vector shape {tuple(g.shape)} != {(n, h * w)}")
    s = max(h, w)
    G = pad_to_square(g.reshape(n, w, h), s)
    eye = torch.eye(s, dtype=fmap.dtype, device=fmap.device)
    return torch.matmul(pad_to_square(fmap, s), (eye + G).unsqueeze(1))


def set_pool(maps, dim=1):
    """Elementwise max over the frame axis."""
    if maps.shape[dim] == 0:
        raise ValueError("set pooling needs at least one frame")
    return maps.max(dim=dim).values


def strip_features(x, scales):
    """Max + mean pooled horizontal strips: (B, C, H, W) -> (B, C, sum(scales))."""
    b, c, H, _ = x.shape
    feats = []
    for k in scales:
        if H % k:
            raise ShapeError(f"map height {H} not divisible by scale {k}")
        z = x.reshape(b, c, k, -1)
        feats.append(z.max(dim=-1).values + z.mean(dim=-1))
    return torch.cat(feats, dim=-1)


class HorizontalPyramidPooling(nn.Module):
    """Strip pooling at several scales followed by one independent linear
    projection per strip."""

    def __init__(self, scales, in_dim, out_dim):
        super().__init__()
        self.scales = tuple(scales)
        parts = sum(self.scales)
        self.weight = nn.Parameter(torch.empty(parts, in_dim, out_dim))
        nn.init.normal_(self.weight, std=1.0 / math.sqrt(in_dim))

    def forward(self, x):
        z = strip_features(x, self.scales)              # B, C, S
        return torch.einsum("bcs,scd->bsd", z, self.weight)


class SMPLGait(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.sln = SilhouetteNet(cfg.channels, cfg.leaky_slope)
        self.stn = None
        if cfg.enable_3d_branch:
            self.stn = TransformNet(cfg.smpl_dim, cfg.stn_hidden, cfg.transform_dim,
                                    cfg.stn_dropout, cfg.bn_momentum, cfg.bn_eps)
        self.hpp = HorizontalPyramidPooling(cfg.hpp_scales, cfg.channels[-1], cfg.part_dim)

    def frame_features(self, frames):
        """frames: (N, H, W) in [0, 1] -> (N, C, h, w)."""
        if tuple(frames.shape[-2:]) != tuple(self.cfg.input_size):
            raise ShapeError(f"frame size {tuple(frames.shape[-2:])} != configured {self.cfg.input_size}")
        return self.sln(frames.unsqueeze(1))

    def transform_vectors(self, smpls):
        if smpls.shape[-1] != self.cfg.smpl_dim:
            raise ShapeError(f"SMPL vector has {smpls.shape[-1]} entries, expected {self.cfg.smpl_dim}")
        return self.stn(smpls)

    def aligned_features(self, frames, smpls=None):
        """Per-frame maps after the (optional) 3D transform: (N, C, s', s')."""
        fmap = self.frame_features(frames)
        h, w = self.cfg.feature_hw
        if self.stn is not None:
            out = apply_spatial_transform(fmap, self.transform_vectors(smpls))
        else:
            out = pad_to_square(fmap, self.cfg.square_side)
        if not self.cfg.pool_padded:
            out = out[..., :h, :w]
        return out

    def forward(self, frames, smpls=None):
        """frames: (B, L, H, W); smpls: (B, L, 85) -> embeddings (B, S, part_dim)."""
        b, length = frames.shape[:2]
        if smpls is not None and tuple(smpls.shape[:2]) != (b, length):
            raise ShapeError("frames and smpls are not aligned")
        flat_smpls = None if smpls is None else smpls.reshape(b * length, -1)
        maps = self.aligned_features(frames.reshape(b * length, *frames.shape[2:]), flat_smpls)
        pooled = set_pool(maps.reshape(b, length, *maps.shape[1:]))
        return self.hpp(pooled)


def frames_to_tensor(frames, dtype=torch.float32):
    """uint8 {0, 255} frames -> float tensor in {0, 1}."""
    return torch.from_numpy(np.array(frames, dtype=np.float64)).to(dtype) / 255.0


def _param_dtype(model):
    return next(model.parameters()).dtype


def sln_forward(model: SMPLGait, frames):
    with torch.no_grad():
        return model.frame_features(frames_to_tensor(frames, _param_dtype(model)))


def stn_forward(model: SMPLGait, smpls):
    with torch.no_grad():
        return model.transform_vectors(torch.as_tensor(smpls, dtype=_param_dtype(model)))


def hpp(model: SMPLGait, fmap):
    with torch.no_grad():
        return model.hpp(fmap.unsqueeze(0))[0]


@torch.no_grad()
def embed_sequence(model: SMPLGait, sample, mode="eval", chunk=64):
    """Embed one GaitSample -> (S, part_dim) tensor.

    In eval mode frames are processed in chunks and max-pooled across chunks,
    which equals pooling the whole set at once.
    """
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    was_training = model.training
    model.train(mode == "train")
    try:
        dtype = _param_dtype(model)
        frames = frames_to_tensor(sample.frames, dtype)
        smpls = torch.from_numpy(np.array(sample.smpls)).to(dtype)
        if mode == "train":
            return model(frames.unsqueeze(0), smpls.unsqueeze(0))[0]
        pooled = None
        for start in range(0, len(frames), chunk):
            maps = model.aligned_features(frames[start:start + chunk], smpls[start:start + chunk])
            part = set_pool(maps, dim=0)
            pooled = part if pooled is None else torch.maximum(pooled, part)
        return model.hpp(pooled.unsqueeze(0))[0]
    finally:
        model.train(was_training)


def save_checkpoint(path, model: SMPLGait, **extra):
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "model_config": model.cfg.to_dict(),
        "dtype": str(_param_dtype(model)).replace("torch.", ""),
        "state_dict": model.state_dict(),
        **extra,
    }, path)


def load_checkpoint(path, map_location="cpu"):
    """Return (model, raw checkpoint dict). The model is in eval mode."""
    try:
        ckpt = torch.load(path, map_location=map_location, weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a SMPLGait checkpoint")
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    model = SMPLGait(cfg).to(getattr(torch, ckpt.get("dtype", "float32")))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt
