"""Domain types and the on-disk dataset format.

On-disk layout (one dataset root)::

    root/
      manifest.json
      <any>/<sequence>/000.png 001.png ...   8-bit grayscale silhouettes
      <any>/<sequence>/smpl.txt              one line of 85 decimals per frame

Manifest JSON (field order is the canonical serialization order)::

    {
      "format": "smplgait-manifest/1",
      "root": ".",                      # relative to the manifest file
      "input_size": [H, W],             # declared preprocessing target
      "sequences": [
        {"subject_id": 0, "camera_id": 0, "sequence_id": "s000_v00",
         "split": "train", "frames": ["s000_v00/000.png", ...],
         "smpl": "s000_v00/smpl.txt"},
        ...
      ]
    }

SMPL vectors are stored as pose(72) | shape(10) | camera(3). Pose is 24 joints
in axis-angle form, camera is (scale, tx, ty). Exports from other mesh
recovery tools may use another ordering and must be reordered before use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError, SmplParseError

SMPL_DIM = 85
POSE_DIM = 72
SHAPE_DIM = 10
CAMERA_DIM = 3
POSE_SLICE = slice(0, POSE_DIM)
SHAPE_SLICE = slice(POSE_DIM, POSE_DIM + SHAPE_DIM)
CAMERA_SLICE = slice(POSE_DIM + SHAPE_DIM, SMPL_DIM)

SPLITS = ("train", "query", "gallery")
MANIFEST_FORMAT = "smplgait-manifest/1"
MANIFEST_NAME = "manifest.json"
REAL_LENGTH_RANGE = (25, 500)


@dataclass(frozen=True)
class SmplVector:
    """One frame of SMPL parameters."""

    pose: np.ndarray
    shape: np.ndarray
    camera: np.ndarray

    def __post_init__(self):
        for name, dim in (("pose", POSE_DIM), ("shape", SHAPE_DIM), ("camera", CAMERA_DIM)):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.shape[0] != dim:
                raise ValueError(f"{name}: expected {dim} values, got {arr.shape[0]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entry")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_array(cls, vec) -> "SmplVector":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] != SMPL_DIM:
            raise ValueError(f"expected {SMPL_DIM} values, got {vec.shape[0]}")
        return cls(vec[POSE_SLICE], vec[SHAPE_SLICE], vec[CAMERA_SLICE])

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.pose, self.shape, self.camera])


@dataclass(frozen=True, eq=False)
class GaitSample:
    """A silhouette sequence with its per-frame SMPL vectors.

    ``frames`` is a (L, H, W) uint8 array, ``smpls`` an (L, 85) float64 array.
    Both are read-only after construction.
    """

    subject_id: int
    camera_id: int
    sequence_id: str
    frames: np.ndarray
    smpls: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        smpls = np.asarray(self.smpls, dtype=np.float64)
        if frames.ndim != 3:
            raise ValueError(f"{self.sequence_id}: frames must be (L, H, W), got {frames.shape}")
        if smpls.ndim != 2 or smpls.shape[1] != SMPL_DIM:
            raise ValueError(f"{self.sequence_id}: smpls must be (L, {SMPL_DIM}), got {smpls.shape}")
        if len(frames) != len(smpls):
            raise ValueError(
                f"{self.sequence_id}: {len(frames)} frames but {len(smpls)} SMPL vectors"
            )
        if len(frames) < 1:
            raise ValueError(f"{self.sequence_id}: empty sequence")
        if not np.all(np.isfinite(smpls)):
            raise ValueError(f"{self.sequence_id}: non-finite SMPL entry")
        frames = frames.copy()
        smpls = smpls.copy()
        frames.setflags(write=False)
        smpls.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "smpls", smpls)

    def __len__(self):
        return len(self.frames)

    def take(self, indices) -> "GaitSample":
        indices = np.asarray(indices, dtype=np.int64)
        return GaitSample(
            self.subject_id, self.camera_id, self.sequence_id,
            self.frames[indices], self.smpls[indices],
        )


@dataclass(frozen=True)
class SequenceEntry:
    subject_id: int
    camera_id: int
    sequence_id: str
    split: str
    frames: tuple
    smpl: str

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "camera_id": self.camera_id,
            "sequence_id": self.sequence_id,
            "split": self.split,
            "frames": list(self.frames),
            "smpl": self.smpl,
        }


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    input_size: tuple
    sequences: tuple = field(default_factory=tuple)
    root_text: str = "."

    def select(self, split=None, subjects=None) -> "DatasetManifest":
        seqs = self.sequences
        if split is not None:
            seqs = tuple(s for s in seqs if s.split == split)
        if subjects is not None:
            keep = set(subjects)
            seqs = tuple(s for s in seqs if s.subject_id in keep)
        return DatasetManifest(self.root, self.input_size, seqs, self.root_text)

    def subjects(self, split=None) -> list:
        return sorted({s.subject_id for s in self.sequences if split is None or s.split == split})

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def __len__(self):
        return len(self.sequences)


_ENTRY_FIELDS = ("subject_id", "camera_id", "sequence_id", "split", "frames", "smpl")


def _entry_from_json(obj, index) -> SequenceEntry:
    where = f"sequences[{index}]"
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    missing = [k for k in _ENTRY_FIELDS if k not in obj]
    if missing:
        raise ManifestError(f"{where}: missing field(s) {', '.join(missing)}")
    unknown = sorted(set(obj) - set(_ENTRY_FIELDS))
    if unknown:
        raise ManifestError(f"{where}: unknown field(s) {', '.join(unknown)}")
    for key in ("subject_id", "camera_id"):
        if not isinstance(obj[key], int) or isinstance(obj[key], bool):
            raise ManifestError(f"{where}.{key}: expected an integer")
    if obj["split"] not in SPLITS:
        raise ManifestError(f"{where}.split: {obj['split']!r} not one of {SPLITS}")
    frames = obj["frames"]
    if not isinstance(frames, list) or not all(isinstance(f, str) for f in frames):
        raise ManifestError(f"{where}.frames: expected a list of paths")
    return SequenceEntry(
        subject_id=obj["subject_id"],
        camera_id=obj["camera_id"],
        sequence_id=str(obj["sequence_id"]),
        split=obj["split"],
        frames=tuple(frames),
        smpl=str(obj["smpl"]),
    )


def parse_manifest(text: str, base_dir=".") -> DatasetManifest:
    """Parse manifest JSON text. ``base_dir`` anchors the relative ``root``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {exc.lineno}, column {exc.colno} (offset {exc.pos}): {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"unsupported format {doc.get('format')!r}")
    size = doc.get("input_size")
    if not (isinstance(size, list) and len(size) == 2 and all(isinstance(v, int) for v in size)):
        raise ManifestError("input_size: expected [height, width]")
    seqs = doc.get("sequences")
    if not isinstance(seqs, list):
        raise ManifestError("sequences: expected a list")
    root_text = doc.get("root", ".")
    return DatasetManifest(
        root=Path(base_dir) / root_text,
        input_size=(size[0], size[1]),
        sequences=tuple(_entry_from_json(obj, i) for i, obj in enumerate(seqs)),
        root_text=root_text,
    )


def serialize_manifest(manifest: DatasetManifest) -> str:
    doc = {
        "format": MANIFEST_FORMAT,
        "root": manifest.root_text,
        "input_size": list(manifest.input_size),
        "sequences": [s.to_json() for s in manifest.sequences],
    }
    return json.dumps(doc, indent=1) + "\n"


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
    try:
        return parse_manifest(text, base_dir=path.parent)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    path.write_text(serialize_manifest(manifest))
    return path


def parse_smpl_text(text: str, source="<smpl>") -> np.ndarray:
    """Parse one SMPL vector per non-empty line into an (L, 85) array."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != SMPL_DIM:
            raise SmplParseError(f"{source}: line {lineno}: expected {SMPL_DIM}, got {len(parts)}")
        try:
            row = [float(p) for p in parts]
        except ValueError as exc:
            raise SmplParseError(f"{source}: line {lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in row):
            raise SmplParseError(f"{source}: line {lineno}: non-finite value")
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(-1, SMPL_DIM)


def format_smpl_text(smpls) -> str:
    # %.17g round-trips float64 exactly
    return "".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in np.asarray(smpls, dtype=np.float64))


def count_smpl_lines(path) -> int:
    with open(path) as fh:
        return sum(1 for line in fh if line.strip())


def validate_manifest(manifest: DatasetManifest, check_files=True, length_range=REAL_LENGTH_RANGE) -> list:
    """Return a list of human-readable violations; empty when the manifest is sound."""
    problems = []
    seen = set()
    for entry in manifest.sequences:
        sid = entry.sequence_id
        if sid in seen:
            problems.append(f"{sid}: duplicate sequence_id")
        seen.add(sid)
        n = len(entry.frames)
        if n < 1:
            problems.append(f"{sid}: no frames")
        elif length_range is not None and not (length_range[0] <= n <= length_range[1]):
            problems.append(f"{sid}: length {n} outside [{length_range[0]}, {length_range[1]}]")
        if not check_files:
            continue
        missing = [f for f in entry.frames if not manifest.resolve(f).is_file()]
        if missing:
            problems.append(f"{sid}: missing frame file {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
        smpl_path = manifest.resolve(entry.smpl)
        if not smpl_path.is_file():
            problems.append(f"{sid}: missing smpl file {entry.smpl}")
            continue
        n_smpl = count_smpl_lines(smpl_path)
        if n_smpl != n:
            problems.append(f"{sid}: {n} frames but {n_smpl} SMPL vectors")

    train = set(manifest.subjects("train"))
    test = set(manifest.subjects("query")) | set(manifest.subjects("gallery"))
    for subject in sorted(train & test):
        problems.append(f"split overlap: subject {subject}")
    return problems
