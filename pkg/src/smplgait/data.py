"""Silhouette normalization, SMPL loading and frame subsampling."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import PurePosixPath

import numpy as np
from PIL import Image

from .core import DatasetManifest, GaitSample, SequenceEntry, parse_smpl_text
from .errors import ConfigError, DataError, EmptySilhouetteError

TEST_FRAME_CAP = 500


@dataclass(frozen=True)
class PreprocessConfig:
    target_height: int = 64
    target_width: int = 44
    threshold: int = 128

    def __post_init__(self):
        if self.target_height <= 0 or self.target_width <= 0:
            raise ConfigError("target sizes must be positive")
        if self.target_height % 4 or self.target_width % 4:
            raise ConfigError(
                f"target size {self.target_height}x{self.target_width} must be divisible by 4"
            )
        if not 0 <= self.threshold <= 255:
            raise ConfigError(f"threshold {self.threshold} outside [0, 255]")

    @property
    def size(self):
        return (self.target_height, self.target_width)

    def check_scales(self, scales):
        h = self.target_height // 4
        bad = [k for k in scales if h % k]
        if bad:
            raise ConfigError(f"pooled height {h} not divisible by HPP scale(s) {bad}")


def _bin_starts(n_in, n_out):
    return (np.arange(n_out) * n_in) // n_out


def resize_binary(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a boolean mask so that an output pixel is set when any source
    pixel in its footprint is set (nearest neighbour when upsampling).

    Every source row and column lands in some output cell, so a foreground
    touching the first/last source row still touches the first/last output row.
    """
    rows = np.logical_or.reduceat(mask, _bin_starts(mask.shape[0], out_h), axis=0)
    return np.logical_or.reduceat(rows, _bin_starts(mask.shape[1], out_w), axis=1)


def _is_normalized(mask, cfg):
    if mask.shape != cfg.size:
        return False
    spans_height = mask[0].any() and mask[-1].any()
    spans_width = mask[:, 0].any() and mask[:, -1].any()
    return spans_height or spans_width


def _crop_start(resized, width, com):
    """Left column of the width-``width`` window nearest to centring ``com``
    that still holds foreground in the first and last row, or None."""
    n = resized.shape[1] - width + 1
    first = np.concatenate([[0], np.cumsum(resized[0])])
    last = np.concatenate([[0], np.cumsum(resized[-1])])
    starts = np.arange(n)
    ok = ((first[starts + width] - first[starts]) > 0) & ((last[starts + width] - last[starts]) > 0)
    if not ok.any():
        return None
    desired = com - width / 2
    candidates = starts[ok]
    return int(candidates[np.argmin(np.abs(candidates - desired))])


def _normalize_once(mask, cfg):
    H, W = cfg.size
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    crop = mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    h, w = crop.shape
    new_w = max(1, int(round(w * H / h)))
    resized = resize_binary(crop, H, new_w)

    col_mass = resized.sum(axis=0).astype(np.float64)
    com = float((col_mass * (np.arange(new_w) + 0.5)).sum() / col_mass.sum())
    out = np.zeros((H, W), dtype=bool)
    if new_w <= W:
        offset = min(max(int(round(W / 2 - com)), 0), W - new_w)
        out[:, offset:offset + new_w] = resized
        return out
    start = _crop_start(resized, W, com)
    if start is not None:
        return resized[:, start:start + W]
    # no window keeps both the top and bottom row: fit the width instead
    new_h = max(1, int(round(h * W / w)))
    top = (H - new_h) // 2
    out[top:top + new_h] = resize_binary(crop, new_h, W)
    return out


def normalize_silhouette(raw, cfg: PreprocessConfig, frame_index=None) -> np.ndarray:
    """Binarize, crop to the foreground rows, scale to the target height and
    centre horizontally on the column centre of mass.

    Returns a ``cfg.size`` uint8 array with values in {0, 255}. Figures wider
    than the target are cropped to a window that keeps foreground in the top
    and bottom rows; if no such window exists the figure is scaled to the
    target width instead. Frames that already have the target size and span
    its full height (or width) are only re-binarized, so the operation is
    idempotent.
    """
    mask = np.asarray(raw) >= cfg.threshold
    if mask.ndim != 2:
        raise DataError(f"silhouette must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise EmptySilhouetteError(frame_index)
    if not _is_normalized(mask, cfg):
        mask = _normalize_once(mask, cfg)
    return mask.astype(np.uint8) * 255


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def frame_indices(length: int, count: int, seed) -> np.ndarray:
    if count < 1:
        raise ValueError(f"frame count must be >= 1, got {count}")
    if length < 1:
        raise DataError("cannot sample frames from an empty sequence")
    if length >= count:
        return np.sort(_as_rng(seed).choice(length, size=count, replace=False))
    return np.arange(count) % length


def sample_frames(sample: GaitSample, count: int, seed) -> GaitSample:
    """Pick ``count`` aligned (frame, smpl) pairs.

    Long sequences are subsampled without replacement (kept in temporal
    order); short ones are padded by cyclic repetition. ``seed`` may be an
    int or a ``numpy.random.Generator``.
    """
    return sample.take(frame_indices(len(sample), count, seed))


def subsample_fraction(sample: GaitSample, frac: float, seed=0) -> GaitSample:
    if not 0 < frac <= 1:
        raise ConfigError(f"test fraction {frac} outside (0, 1]")
    if frac == 1:
        return sample
    count = max(1, int(round(frac * len(sample))))
    return sample_frames(sample, count, seed)


def read_silhouette(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.array(img.convert("L"))
    except OSError as exc:
        raise DataError(f"cannot read silhouette {path}: {exc}") from exc


def load_sequence(entry: SequenceEntry, manifest: DatasetManifest, cfg: PreprocessConfig,
                  max_frames=None) -> GaitSample:
    """Read, normalize and align one manifest entry."""
    smpl_path = manifest.resolve(entry.smpl)
    try:
        text = smpl_path.read_text()
    except OSError as exc:
        raise DataError(f"{entry.sequence_id}: cannot read {smpl_path}: {exc.strerror or exc}") from exc
    smpls = parse_smpl_text(text, source=entry.smpl)
    if len(smpls) != len(entry.frames):
        raise DataError(
            f"{entry.sequence_id}: {len(entry.frames)} frames but {len(smpls)} SMPL vectors"
        )
    # frames are ordered by file name; SMPL lines follow that order
    order = sorted(range(len(entry.frames)), key=lambda i: PurePosixPath(entry.frames[i]).name)
    if max_frames is not None:
        order = order[:max_frames]
    frames = np.stack([
        normalize_silhouette(read_silhouette(manifest.resolve(entry.frames[i])), cfg, frame_index=i)
        for i in order
    ])
    return GaitSample(entry.subject_id, entry.camera_id, entry.sequence_id, frames, smpls[order])


def load_samples(manifest: DatasetManifest, cfg: PreprocessConfig, max_frames=None, threads=1) -> list:
    """Load every sequence of ``manifest``; output order follows the manifest."""
    if len(manifest) == 0:
        raise DataError("manifest selects no sequences")

    def _load(entry):
        return load_sequence(entry, manifest, cfg, max_frames=max_frames)

    if threads <= 1:
        return [_load(e) for e in manifest.sequences]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_load, manifest.sequences))
