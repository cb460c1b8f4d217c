"""Procedural silhouette + SMPL gait sequences.

Each subject is a 3-D stick/ellipse figure (head, torso, two legs, two arms)
walking with a sinusoidal gait. Frames are rendered under the sequence's
azimuth and the SMPL-like vector written next to each frame holds exactly
the parameters used to draw it, so :func:`render_frame` re-renders any frame
from its vector.

Synthetic 85-vector layout (a simplified stand-in, not real SMPL):

* pose, joint 0: (0, azimuth [rad], 0) global orientation about the vertical
* pose, joints 1/2: (hip swing, 0, 0) left/right
* pose, joints 4/5: (knee flexion, 0, 0) left/right
* pose, joints 16/17: (shoulder swing, 0, 0) left/right
* pose, joints 18/19: (elbow flexion, 0, 0) left/right
* shape: height, torso width, torso depth, limb width, leg ratio, arm ratio,
  head ratio, hip width, 0, 0
* camera: weak-perspective (s, tx, ty): s is image heights per metre, tx the
  figure's column offset and ty the ground row offset, both as fractions of
  the half image size measured from the image centre
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .core import (
    CAMERA_SLICE, POSE_SLICE, SHAPE_SLICE, SMPL_DIM, DatasetManifest, SequenceEntry,
    format_smpl_text, write_manifest,
)
from .errors import ConfigError, DataError

SHAPE_RANGES = {
    "height": (1.50, 1.95),
    "torso_width": (0.28, 0.50),
    "torso_depth": (0.16, 0.32),
    "limb_width": (0.07, 0.16),
    "leg_ratio": (0.42, 0.54),
    "arm_ratio": (0.33, 0.45),
    "head_ratio": (0.10, 0.15),
    "hip_width": (0.16, 0.34),
}
SHAPE_KEYS = tuple(SHAPE_RANGES)

GAIT_RANGES = {
    "stride": (0.25, 0.60),       # hip swing amplitude, rad
    "arm_swing": (0.10, 0.60),
    "knee_flex": (0.20, 0.90),
    "elbow_flex": (0.05, 0.60),
    "period": (20.0, 40.0),       # frames per gait cycle
}

_SHIFT = 4                     # cv2 fixed-point fractional bits
_SCALE = 1 << _SHIFT


@dataclass(frozen=True)
class SynthConfig:
    num_subjects: int = 16
    sequences_per_subject: int = 4
    frames_range: tuple = (60, 60)
    # list of (centre, half-width) azimuth clusters, degrees
    views: tuple = ((90.0, 0.0),)
    train_fraction: float = 0.5
    image_width_range: tuple = (100, 400)
    image_height_range: tuple = (200, 800)
    noise: float = 0.0
    smpl_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frames_range", tuple(self.frames_range))
        object.__setattr__(self, "views", tuple(tuple(float(x) for x in v) for v in self.views))
        object.__setattr__(self, "image_width_range", tuple(self.image_width_range))
        object.__setattr__(self, "image_height_range", tuple(self.image_height_range))
        lo, hi = self.frames_range
        if not 25 <= lo <= hi <= 500:
            raise ConfigError(f"frames_range {self.frames_range} must satisfy 25 <= lo <= hi <= 500")
        if self.num_subjects < 2 or self.sequences_per_subject < 2:
            raise ConfigError("need at least 2 subjects and 2 sequences per subject")
        if not self.views or any(len(v) != 2 or v[1] < 0 for v in self.views):
            raise ConfigError("views must be (centre, half_width >= 0) pairs")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        n_train = self.num_train_subjects
        if n_train < 1 or n_train >= self.num_subjects:
            raise ConfigError("train_fraction leaves an empty train or test split")
        for name in ("image_width_range", "image_height_range"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ConfigError(f"{name} invalid: {(a, b)}")
        if not 0 <= self.noise <= 1 or self.smpl_noise < 0:
            raise ConfigError("noise must lie in [0, 1] and smpl_noise be >= 0")

    @property
    def num_train_subjects(self):
        return int(round(self.train_fraction * self.num_subjects))

    def to_dict(self):
        d = asdict(self)
        return {k: [list(x) for x in v] if k == "views" else (list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}


@dataclass(frozen=True)
class Subject:
    subject_id: int
    shape: dict
    gait: dict

    def shape_vector(self):
        vec = np.zeros(10)
        vec[:len(SHAPE_KEYS)] = [self.shape[k] for k in SHAPE_KEYS]
        return vec


def make_subject(seed, subject_id) -> Subject:
    rng = np.random.default_rng([seed, 0, subject_id])
    shape = {k: float(rng.uniform(*r)) for k, r in SHAPE_RANGES.items()}
    gait = {k: float(rng.uniform(*r)) for k, r in GAIT_RANGES.items()}
    return Subject(subject_id, shape, gait)


def gait_pose(subject: Subject, azimuth_deg: float, phase: float) -> np.ndarray:
    """Pose slots (72) for one gait phase (radians)."""
    g = subject.gait
    pose = np.zeros((24, 3))
    pose[0, 1] = math.radians(azimuth_deg)
    swing = g["stride"] * math.sin(phase)
    pose[1, 0], pose[2, 0] = swing, -swing
    pose[4, 0] = g["knee_flex"] * 0.5 * (1 - math.cos(phase + 0.5 * math.pi))
    pose[5, 0] = g["knee_flex"] * 0.5 * (1 - math.cos(phase + 1.5 * math.pi))
    arm = g["arm_swing"] * math.sin(phase)
    pose[16, 0], pose[17, 0] = -arm, arm
    pose[18, 0] = g["elbow_flex"] * 0.5 * (1 + math.sin(phase))
    pose[19, 0] = g["elbow_flex"] * 0.5 * (1 - math.sin(phase))
    return pose.reshape(-1)


def _limb(start, theta, length):
    """End point of a segment hanging down from ``start`` rotated by ``theta``
    about the lateral axis (positive swings forward)."""
    return start + length * np.array([0.0, -math.cos(theta), math.sin(theta)])


def skeleton(vec):
    """3-D body geometry (metres; x lateral, y up, z forward) from an 85-vector."""
    vec = np.asarray(vec, dtype=np.float64)
    pose = vec[POSE_SLICE].reshape(24, 3)
    sh = dict(zip(SHAPE_KEYS, vec[SHAPE_SLICE]))
    height = sh["height"]
    leg = sh["leg_ratio"] * height
    head_d = sh["head_ratio"] * height
    neck_y = height - head_d
    arm = sh["arm_ratio"] * height
    hip_y = leg
    segments = []
    for side, hip_j, knee_j in ((-1, 1, 4), (1, 2, 5)):
        hip = np.array([side * sh["hip_width"] / 2, hip_y, 0.0])
        knee = _limb(hip, pose[hip_j, 0], leg / 2)
        ankle = _limb(knee, pose[hip_j, 0] - pose[knee_j, 0], leg / 2)
        segments.append((hip, knee, sh["limb_width"]))
        segments.append((knee, ankle, sh["limb_width"] * 0.85))
    shoulder_y = neck_y - 0.04 * height
    for side, sh_j, el_j in ((-1, 16, 18), (1, 17, 19)):
        shoulder = np.array([side * sh["torso_width"] / 2, shoulder_y, 0.0])
        elbow = _limb(shoulder, pose[sh_j, 0], arm / 2)
        wrist = _limb(elbow, pose[sh_j, 0] + pose[el_j, 0], arm / 2)
        segments.append((shoulder, elbow, sh["limb_width"] * 0.8))
        segments.append((elbow, wrist, sh["limb_width"] * 0.7))
    torso = (hip_y, shoulder_y + 0.02 * height, sh["torso_width"], sh["torso_depth"], sh["hip_width"])
    head = (np.array([0.0, height - head_d / 2, 0.0]), head_d / 2)
    return {"segments": segments, "torso": torso, "head": head, "azimuth": pose[0, 1]}


def _project(points, azimuth):
    # rotate about the vertical axis then drop depth; azimuth 0 faces the camera
    points = np.atleast_2d(points)
    u = points[:, 0] * math.cos(azimuth) + points[:, 2] * math.sin(azimuth)
    return np.stack([u, points[:, 1]], axis=1)


def render_frame(vec, image_size) -> np.ndarray:
    """Rasterize the figure described by an 85-vector onto an (H, W) canvas."""
    H, W = image_size
    vec = np.asarray(vec, dtype=np.float64)
    s, tx, ty = vec[CAMERA_SLICE]
    scale, cx, ground = s * H, (1 + tx) * W / 2, (1 + ty) * H / 2
    geo = skeleton(vec)
    az = geo["azimuth"]
    img = np.zeros((H, W), dtype=np.uint8)

    def px(p2):
        return (int(round((cx + scale * p2[0]) * _SCALE)), int(round((ground - scale * p2[1]) * _SCALE)))

    bottom, top, width, depth, hip_w = geo["torso"]
    half_top = 0.5 * (abs(width * math.cos(az)) + abs(depth * math.sin(az)))
    half_bot = 0.5 * (abs(hip_w * math.cos(az)) + abs(depth * math.sin(az)))
    quad = [(-half_bot, bottom), (half_bot, bottom), (half_top, top), (-half_top, top)]
    cv2.fillPoly(img, [np.array([px(q) for q in quad], dtype=np.int32)], 255,
                 lineType=cv2.LINE_8, shift=_SHIFT)
    for a, b, thick in geo["segments"]:
        pa, pb = _project(np.stack([a, b]), az)
        t = max(1, int(round(thick * scale)))
        cv2.line(img, px(pa), px(pb), 255, thickness=t, lineType=cv2.LINE_8, shift=_SHIFT)
    centre, radius = geo["head"]
    c2 = _project(centre, az)[0]
    cv2.circle(img, px(c2), int(round(radius * scale * _SCALE)), 255, thickness=-1,
               lineType=cv2.LINE_8, shift=_SHIFT)
    return img


def _cutout(img, rng, noise):
    if noise <= 0 or rng.random() >= noise:
        return img
    rows = np.flatnonzero(img.any(axis=1))
    cols = np.flatnonzero(img.any(axis=0))
    h = rows[-1] - rows[0] + 1
    w = cols[-1] - cols[0] + 1
    ch = max(1, int(h * rng.uniform(0.05, 0.2)))
    cw = max(1, int(w * rng.uniform(0.2, 0.6)))
    r0 = rows[0] + int(rng.integers(0, max(1, h - ch)))
    c0 = cols[0] + int(rng.integers(0, max(1, w - cw)))
    out = img.copy()
    out[r0:r0 + ch, c0:c0 + cw] = 0
    return out if out.any() else img


@dataclass
class SequencePlan:
    subject: Subject
    sequence_id: str
    camera_id: int
    split: str
    azimuth: float
    num_frames: int
    image_size: tuple
    phase0: float
    rng_key: tuple = field(default_factory=tuple)


def render_sequence(plan: SequencePlan, cfg: SynthConfig):
    """Return (frames list of uint8 arrays, (L, 85) vectors)."""
    rng = np.random.default_rng(list(plan.rng_key) + [1])
    H, W = plan.image_size
    height = plan.subject.shape["height"]
    reach = height * 0.9
    scale = min(0.85 * H / height, 0.85 * W / reach)
    ground = H - 0.5 * (H - scale * height)
    period = plan.subject.gait["period"]
    frames, vecs = [], []
    for t in range(plan.num_frames):
        phase = plan.phase0 + 2 * math.pi * t / period
        vec = np.zeros(SMPL_DIM)
        vec[POSE_SLICE] = gait_pose(plan.subject, plan.azimuth, phase)
        vec[SHAPE_SLICE] = plan.subject.shape_vector()
        vec[CAMERA_SLICE] = (scale / H, 0.0, 2 * ground / H - 1)
        img = render_frame(vec, (H, W))
        frames.append(_cutout(img, rng, cfg.noise))
        if cfg.smpl_noise > 0:
            vec = vec + rng.normal(0.0, cfg.smpl_noise, size=SMPL_DIM)
        vecs.append(vec)
    return frames, np.stack(vecs)


def _plan(cfg: SynthConfig, subject_id, k, camera_id, split):
    rng = np.random.default_rng([cfg.seed, 1, subject_id, k])
    centre, half = cfg.views[camera_id]
    return SequencePlan(
        subject=make_subject(cfg.seed, subject_id),
        sequence_id=f"s{subject_id:03d}_q{k:02d}",
        camera_id=camera_id,
        split=split,
        azimuth=float(centre + rng.uniform(-half, half)),
        num_frames=int(rng.integers(cfg.frames_range[0], cfg.frames_range[1] + 1)),
        image_size=(int(rng.integers(cfg.image_height_range[0], cfg.image_height_range[1] + 1)),
                    int(rng.integers(cfg.image_width_range[0], cfg.image_width_range[1] + 1))),
        phase0=float(rng.uniform(0, 2 * math.pi)),
        rng_key=(cfg.seed, 2, subject_id, k),
    )


def plan_dataset(cfg: SynthConfig, confounded=False, query_view=0, gallery_view=1) -> list:
    n_views = len(cfg.views)
    plans = []
    for sid in range(cfg.num_subjects):
        rng = np.random.default_rng([cfg.seed, 3, sid])
        n = cfg.sequences_per_subject
        if sid < cfg.num_train_subjects:
            splits = ["train"] * n
            cams = [k % n_views for k in range(n)] if confounded else list(rng.integers(0, n_views, size=n))
        else:
            query_k = 0 if confounded else int(rng.integers(0, n))
            splits = ["query" if k == query_k else "gallery" for k in range(n)]
            if confounded:
                cams = [query_view if k == query_k else gallery_view for k in range(n)]
            else:
                cams = list(rng.integers(0, n_views, size=n))
        plans += [_plan(cfg, sid, k, int(cams[k]), splits[k]) for k in range(n)]
    return plans


def _write_sequence(plan, cfg, out_dir):
    frames, vecs = render_sequence(plan, cfg)
    rel = Path("seqs") / plan.sequence_id
    seq_dir = out_dir / rel
    seq_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for t, img in enumerate(frames):
        name = f"{t:03d}.png"
        Image.fromarray(img, mode="L").save(seq_dir / name, optimize=False, compress_level=6)
        names.append((rel / name).as_posix())
    (seq_dir / "smpl.txt").write_text(format_smpl_text(vecs))
    return SequenceEntry(plan.subject.subject_id, plan.camera_id, plan.sequence_id, plan.split,
                         tuple(names), (rel / "smpl.txt").as_posix())


def _generate(cfg, out_dir, plans, input_size, threads):
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out_dir} is not writable: {exc.strerror or exc}") from exc
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(lambda p: _write_sequence(p, cfg, out_dir), plans))
    else:
        entries = [_write_sequence(p, cfg, out_dir) for p in plans]
    manifest = DatasetManifest(root=out_dir, input_size=tuple(input_size), sequences=tuple(entries))
    write_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return manifest


def generate_dataset(cfg: SynthConfig, out_dir, input_size=(64, 44), threads=1) -> DatasetManifest:
    """Render a dataset with disjoint train / query / gallery subjects.

    The first ``train_fraction`` of subjects form the train split; every other
    subject contributes one random query sequence and the rest as gallery.
    """
    return _generate(cfg, out_dir, plan_dataset(cfg), input_size, threads)


def make_confounded_split(cfg: SynthConfig, out_dir, input_size=(64, 44), threads=1,
                          query_view=0, gallery_view=1) -> DatasetManifest:
    """Like :func:`generate_dataset`, but test subjects have their query in one
    azimuth cluster and their gallery sequences in another. Train subjects
    cycle through all clusters."""
    if len(cfg.views) < 2:
        raise ConfigError("need ≥2 clusters")
    if query_view == gallery_view or not (0 <= query_view < len(cfg.views) and 0 <= gallery_view < len(cfg.views)):
        raise ConfigError("query and gallery clusters must be distinct valid indices")
    plans = plan_dataset(cfg, confounded=True, query_view=query_view, gallery_view=gallery_view)
    return _generate(cfg, out_dir, plans, input_size, threads)
