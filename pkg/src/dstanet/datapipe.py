"""Skeleton files, frame sampling, four-stream decoupling and synthetic gestures.

Skeleton file format (UTF-8 JSON, one frame per line when written here)::

    {
     "format": "dsta-skeleton/1",
     "name": "<sample id>",
     "label": <class index>,
     "joints": ["wrist", ...],            # N names
     "bones": [[parent, child], ...],     # tree over the N joints
     "meta": {"stream": "st"},            # free-form string map
     "frames": [
      [[x, y, z], ...],                   # frame 0, N joints x C coords
      ...
     ]
    }

Floats are written with ``repr`` so a load/save round trip is bit-exact.

Manifest format: ``manifest.csv`` with header ``path,label,split`` (paths
relative to the manifest's directory, split is ``train`` or ``test``) next to
``classes.txt`` holding one class name per line, line i naming class i.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_TAG = "dsta-skeleton/1"
STREAMS = ("st", "s", "ft", "sl")
STREAM_NAMES = {
    "st": "spatial_temporal",
    "s": "spatial",
    "ft": "fast_temporal",
    "sl": "slow_temporal",
}
DEFAULT_FAST_STRIDE = 1
DEFAULT_SLOW_STRIDE = 2


class SkeletonFormatError(ValueError):
    """A skeleton or manifest file failed to parse or validate."""


@dataclass
class SkeletonSequence:
    joints: list
    bones: list  # (parent, child) pairs
    frames: np.ndarray  # T x N x C
    label: int
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.bones = [tuple(int(v) for v in b) for b in self.bones]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    def validate(self) -> "SkeletonSequence":
        f = self.frames
        if f.ndim != 3 or f.shape[2] not in (2, 3):
            raise SkeletonFormatError(f"frames: expected T x N x (2|3) array, got shape {f.shape}")
        n = len(self.joints)
        if f.shape[1] != n:
            raise SkeletonFormatError(f"frames: {f.shape[1]} joints per frame, {n} joint names")
        if f.shape[0] < 1:
            raise SkeletonFormatError("frames: at least one frame is required")
        if not np.all(np.isfinite(f)):
            raise SkeletonFormatError("frames: non-finite coordinate")
        check_skeleton_tree(self.bones, n)
        return self

    def replace_frames(self, frames: np.ndarray, **meta) -> "SkeletonSequence":
        return SkeletonSequence(list(self.joints), list(self.bones), frames, self.label,
                                self.id, {**self.meta, **meta})

    def __eq__(self, other):
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (self.joints == other.joints and self.bones == other.bones
                and self.label == other.label and self.id == other.id
                and self.meta == other.meta and self.frames.shape == other.frames.shape
                and np.array_equal(self.frames, other.frames))


def check_skeleton_tree(bones, num_joints: int) -> None:
    """Raise unless ``bones`` is a spanning tree over ``num_joints`` joints."""
    for i, (p, c) in enumerate(bones):
        if not (0 <= p < num_joints and 0 <= c < num_joints):
            raise SkeletonFormatError(f"bones[{i}]: bone index out of range for {num_joints} joints")
        if p == c:
            raise SkeletonFormatError(f"bones[{i}]: self loop on joint {p}")
    if len(bones) != num_joints - 1:
        raise SkeletonFormatError(
            f"bones: skeleton tree over {num_joints} joints needs {num_joints - 1} bones, "
            f"got {len(bones)}")
    parent = list(range(num_joints))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, (p, c) in enumerate(bones):
        rp, rc = find(p), find(c)
        if rp == rc:
            raise SkeletonFormatError(f"bones[{i}]: bone closes a cycle, skeleton must be a tree")
        parent[rp] = rc


# --------------------------------------------------------------------------
# file io


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps_skeleton(seq: SkeletonSequence) -> str:
    head = [
        f' "format": {json.dumps(FORMAT_TAG)}',
        f' "name": {json.dumps(seq.id)}',
        f' "label": {int(seq.label)}',
        f' "joints": {json.dumps(list(seq.joints))}',
        f' "bones": {json.dumps([list(b) for b in seq.bones])}',
        f' "meta": {json.dumps(seq.meta, sort_keys=True)}',
    ]
    rows = []
    for frame in seq.frames:
        rows.append("  [" + ",".join("[" + ",".join(_fmt(v) for v in joint) + "]"
                                     for joint in frame) + "]")
    body = ",\n".join(head) + ',\n "frames": [\n' + ",\n".join(rows) + "\n ]"
    return "{\n" + body + "\n}\n"


def save_skeleton_file(seq: SkeletonSequence, path) -> None:
    Path(path).write_text(dumps_skeleton(seq))


def loads_skeleton(text: str, source: str = "<skeleton>") -> SkeletonSequence:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SkeletonFormatError(
            f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise SkeletonFormatError(f"{source}: expected a JSON object")
    for key in ("name", "joints", "bones", "frames", "label"):
        if key not in doc:
            raise SkeletonFormatError(f"{source}: field '{key}' missing")
    if doc.get("format", FORMAT_TAG) != FORMAT_TAG:
        raise SkeletonFormatError(f"{source}: field 'format': unsupported {doc['format']!r}")
    label = doc["label"]
    if isinstance(label, bool) or not isinstance(label, int) or label < 0:
        raise SkeletonFormatError(f"{source}: field 'label': expected a non-negative integer")
    if not isinstance(doc["joints"], list) or not all(isinstance(j, str) for j in doc["joints"]):
        raise SkeletonFormatError(f"{source}: field 'joints': expected a list of names")
    bones = doc["bones"]
    if not isinstance(bones, list) or not all(
            isinstance(b, list) and len(b) == 2 and all(isinstance(v, int) for v in b)
            for b in bones):
        raise SkeletonFormatError(f"{source}: field 'bones': expected [[parent, child], ...]")
    try:
        frames = np.array(doc["frames"], dtype=np.float64)
    except (TypeError, ValueError):
        raise SkeletonFormatError(
            f"{source}: field 'frames': ragged or non-numeric coordinates") from None
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise SkeletonFormatError(f"{source}: field 'meta': expected an object")
    seq = SkeletonSequence(doc["joints"], bones, frames, label, str(doc["name"]), meta)
    try:
        return seq.validate()
    except SkeletonFormatError as exc:
        raise SkeletonFormatError(f"{source}: {exc}") from None


def load_skeleton_file(path) -> SkeletonSequence:
    return loads_skeleton(Path(path).read_text(), str(path))


# --------------------------------------------------------------------------
# temporal sampling


def uniform_indices(num_frames: int, target: int) -> np.ndarray:
    """``round(k (T-1) / (target-1))`` for k = 0..target-1, halves rounded up."""
    if target < 1:
        raise ValueError(f"target frame count must be >= 1, got {target}")
    if num_frames < 1:
        raise ValueError("sequence has no frames")
    if target == 1:
        return np.zeros(1, dtype=np.int64)
    k = np.arange(target, dtype=np.int64)
    return (2 * k * (num_frames - 1) + (target - 1)) // (2 * (target - 1))


def random_indices(num_frames: int, target: int, rng: np.random.Generator) -> np.ndarray:
    """One draw per equal-width bin of the source timeline, sorted."""
    if target < 1:
        raise ValueError(f"target frame count must be >= 1, got {target}")
    if num_frames < 1:
        raise ValueError("sequence has no frames")
    k = np.arange(target, dtype=np.int64)
    lo = (k * num_frames) // target
    hi = np.maximum(((k + 1) * num_frames + target - 1) // target, lo + 1)
    idx = lo + np.floor(rng.random(target) * (hi - lo)).astype(np.int64)
    return np.sort(np.minimum(idx, num_frames - 1))


def resample_frames(seq: SkeletonSequence, target_T: int, mode: str = "uniform",
                    rng: Optional[np.random.Generator] = None) -> SkeletonSequence:
    if mode == "uniform":
        idx = uniform_indices(seq.num_frames, target_T)
    elif mode == "random":
        idx = random_indices(seq.num_frames, target_T, rng or np.random.default_rng())
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return seq.replace_frames(seq.frames[idx])


def crop_start(num_frames: int, crop_T: int, mode: str = "center",
               rng: Optional[np.random.Generator] = None) -> int:
    if crop_T < 1 or crop_T > num_frames:
        raise ValueError(f"cannot crop {crop_T} frames from a {num_frames}-frame sequence")
    if mode == "center":
        return (num_frames - crop_T) // 2
    if mode == "random":
        return int((rng or np.random.default_rng()).integers(0, num_frames - crop_T + 1))
    raise ValueError(f"unknown crop mode {mode!r}")


def crop_frames(seq: SkeletonSequence, crop_T: int, mode: str = "center",
                rng: Optional[np.random.Generator] = None) -> SkeletonSequence:
    start = crop_start(seq.num_frames, crop_T, mode, rng)
    return seq.replace_frames(seq.frames[start:start + crop_T])


# --------------------------------------------------------------------------
# stream decoupling; streams use the network layout N x T x C


def decouple_spatial(frames: np.ndarray, bones) -> np.ndarray:
    """Bone vectors (child minus parent) stored at the child; the root stays zero."""
    frames = np.asarray(frames, dtype=np.float64)
    out = np.zeros_like(frames)
    for parent, child in bones:
        out[:, child] = frames[:, child] - frames[:, parent]
    return out.transpose(1, 0, 2).copy()


def decouple_temporal(frames: np.ndarray, stride: int) -> np.ndarray:
    """Per-joint displacement over ``stride`` frames, shape ``N x (T - stride) x C``."""
    frames = np.asarray(frames, dtype=np.float64)
    if stride < 1 or stride >= frames.shape[0]:
        raise ValueError(f"stride must be in [1, {frames.shape[0] - 1}], got {stride}")
    return (frames[stride:] - frames[:-stride]).transpose(1, 0, 2).copy()


def pad_edge(stream: np.ndarray, length: int) -> np.ndarray:
    """Repeat the last frame of an ``N x T' x C`` stream up to ``length`` frames."""
    missing = length - stream.shape[1]
    if missing < 0:
        raise ValueError(f"stream already has {stream.shape[1]} > {length} frames")
    if missing == 0:
        return stream
    return np.concatenate([stream, np.repeat(stream[:, -1:], missing, axis=1)], axis=1)


@dataclass
class StreamSet:
    spatial_temporal: np.ndarray
    spatial: np.ndarray
    fast_temporal: np.ndarray
    slow_temporal: np.ndarray

    def get(self, tag: str) -> np.ndarray:
        return getattr(self, STREAM_NAMES[tag])


def build_streams(seq: SkeletonSequence, fast_stride: int = DEFAULT_FAST_STRIDE,
                  slow_stride: int = DEFAULT_SLOW_STRIDE) -> StreamSet:
    t = seq.num_frames
    return StreamSet(
        spatial_temporal=seq.frames.transpose(1, 0, 2).copy(),
        spatial=decouple_spatial(seq.frames, seq.bones),
        fast_temporal=pad_edge(decouple_temporal(seq.frames, fast_stride), t),
        slow_temporal=pad_edge(decouple_temporal(seq.frames, slow_stride), t),
    )


def stream_array(seq: SkeletonSequence, tag: str, fast_stride: int = DEFAULT_FAST_STRIDE,
                 slow_stride: int = DEFAULT_SLOW_STRIDE) -> np.ndarray:
    """One stream of ``seq`` as an ``N x T x C`` array."""
    if tag == "st":
        return seq.frames.transpose(1, 0, 2).copy()
    if tag == "s":
        return decouple_spatial(seq.frames, seq.bones)
    if tag == "ft":
        return pad_edge(decouple_temporal(seq.frames, fast_stride), seq.num_frames)
    if tag == "sl":
        return pad_edge(decouple_temporal(seq.frames, slow_stride), seq.num_frames)
    raise ValueError(f"unknown stream {tag!r}; expected one of {', '.join(STREAMS)}")


def stream_sequence(seq: SkeletonSequence, tag: str, fast_stride: int = DEFAULT_FAST_STRIDE,
                    slow_stride: int = DEFAULT_SLOW_STRIDE) -> SkeletonSequence:
    """A stream packaged as a skeleton sequence tagged in ``meta``."""
    arr = stream_array(seq, tag, fast_stride, slow_stride)
    meta = {"stream": tag}
    if tag == "ft":
        meta["stride"] = str(fast_stride)
    elif tag == "sl":
        meta["stride"] = str(slow_stride)
    return seq.replace_frames(arr.transpose(1, 0, 2).copy(), **meta)


# --------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list
    classes: list
    root: Path = Path(".")

    def split(self, tag: str) -> list:
        return [e for e in self.entries if e.split == tag]

    def load(self, tag: Optional[str] = None) -> list:
        entries = self.entries if tag is None else self.split(tag)
        out = []
        for e in entries:
            seq = load_skeleton_file(self.root / e.path)
            if seq.label != e.label:
                raise SkeletonFormatError(
                    f"{e.path}: file label {seq.label} disagrees with manifest label {e.label}")
            out.append(seq)
        return out

    def save(self, directory) -> Path:
        directory = Path(directory)
        path = directory / "manifest.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("path", "label", "split"))
            for e in self.entries:
                writer.writerow((e.path, e.label, e.split))
        (directory / "classes.txt").write_text("".join(f"{c}\n" for c in self.classes))
        return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    root = path.parent
    classes_path = root / "classes.txt"
    if not classes_path.exists():
        raise SkeletonFormatError(f"{classes_path}: class table missing")
    classes = [line for line in classes_path.read_text().splitlines() if line]
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise SkeletonFormatError(f"{path}: line 1: expected header path,label,split")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise SkeletonFormatError(f"{path}: line {lineno}: expected 3 fields")
            rel, label, split = row
            try:
                label = int(label)
            except ValueError:
                raise SkeletonFormatError(f"{path}: line {lineno}: field 'label' not an integer") from None
            if not 0 <= label < len(classes):
                raise SkeletonFormatError(
                    f"{path}: line {lineno}: label {label} outside class table of {len(classes)}")
            if split not in ("train", "test"):
                raise SkeletonFormatError(f"{path}: line {lineno}: split must be train or test")
            if not (root / rel).exists():
                raise SkeletonFormatError(f"{path}: line {lineno}: file {rel} not found")
            entries.append(ManifestEntry(rel, label, split))
    return DatasetManifest(entries, classes, root)


# --------------------------------------------------------------------------
# synthetic gestures

SEGMENT = 0.3
BEND = 0.8
POSE_SWAY = 0.05
# large enough that a slow sweep moves about one bone length per frame at 40
# frames, so frame differences stand well clear of the coordinate noise
TRAJ_AMPLITUDE = 2.0
SLOW_CYCLES = 1.0
FAST_CYCLES = 4.0


def hand_skeleton(num_joints: int):
    """A wrist with fingers of up to three joints each, fanned in the x-y plane."""
    if num_joints < 2:
        raise ValueError("a hand skeleton needs at least 2 joints")
    joints, bones, chains = ["wrist"], [], []
    remaining = num_joints - 1
    finger = 0
    while remaining:
        length = min(3, remaining)
        chain = []
        for k in range(length):
            idx = len(joints)
            joints.append(f"f{finger}_{k + 1}")
            bones.append((chain[-1] if chain else 0, idx))
            chain.append(idx)
        chains.append(chain)
        remaining -= length
        finger += 1
    return joints, bones, chains


def hand_pose(chains, num_joints: int, bends) -> np.ndarray:
    """Joint positions (N x 3) for per-finger curl angles ``bends``."""
    pos = np.zeros((num_joints, 3))
    nf = len(chains)
    for f, chain in enumerate(chains):
        spread = (f - (nf - 1) / 2) * (1.2 / max(nf, 1))
        direction = np.array([np.sin(spread), np.cos(spread), 0.0])
        prev = np.zeros(3)
        for k, idx in enumerate(chain):
            curl = bends[f] * (k + 1)
            step = np.cos(curl) * direction + np.array([0.0, 0.0, -np.sin(curl)])
            prev = prev + SEGMENT * step
            pos[idx] = prev
    return pos


def pose_bends(pose_class: int, num_fingers: int) -> np.ndarray:
    """Curl pattern of a pose class.

    Finger bitmasks are visited so that neighbouring classes differ in how
    many fingers are curled; wrapping around deepens the curl.
    """
    masks = sorted(range(1, 2 ** num_fingers),
                   key=lambda m: (_runs(m, num_fingers), bin(m).count("1"), m))
    mask = masks[pose_class % len(masks)]
    level = 1 + pose_class // len(masks)
    return np.array([BEND * level if mask >> f & 1 else 0.0 for f in range(num_fingers)])


def _runs(mask: int, num_fingers: int) -> int:
    # prefix masks (fingers 0..k curled) first
    return 0 if mask & (mask + 1) == 0 else 1


def class_layout(num_classes: int) -> tuple:
    """Number of (pose, trajectory) classes; pose classes come first."""
    n_traj = num_classes // 2
    return num_classes - n_traj, n_traj


def class_names(num_classes: int, channels: int = 3) -> list:
    n_pose, n_traj = class_layout(num_classes)
    names = [f"pose_{p}" for p in range(n_pose)]
    for j in range(n_traj):
        axis, speed, level = trajectory_params(j, channels)
        names.append(f"traj_{'xyz'[axis]}_{speed}_{level}")
    return names


def trajectory_params(j: int, channels: int = 3) -> tuple:
    """``(axis, speed, level)`` of trajectory class ``j``: axes first, then speeds."""
    axis = j % channels
    speed = "slow" if (j // channels) % 2 == 0 else "fast"
    level = j // (2 * channels)
    return axis, speed, level


def synth_sequence(label: int, num_classes: int, num_joints: int, num_frames: int,
                   noise: float, rng: np.random.Generator, sample_id: str,
                   channels: int = 3) -> SkeletonSequence:
    """One synthetic gesture.

    Pose classes hold a class-specific finger curl while the whole hand
    sways (amplitude ``POSE_SWAY`` along x, one cycle).  Trajectory classes
    keep the open hand and oscillate it along one axis, slow (one cycle) or
    fast (four cycles), with larger amplitude per extra level.  Classes walk
    through the axes before switching speed.  Every sample
    draws a uniform random phase for its oscillation (the phase jitter), then
    i.i.d. Gaussian noise of std ``noise`` is added to every coordinate.
    """
    joints, bones, chains = hand_skeleton(num_joints)
    n_pose, _ = class_layout(num_classes)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(num_frames) / num_frames
    offset = np.zeros((num_frames, 3))
    if label < n_pose:
        pose = hand_pose(chains, num_joints, pose_bends(label, len(chains)))
        offset[:, 0] = POSE_SWAY * np.sin(2 * np.pi * SLOW_CYCLES * t + phase)
    else:
        pose = hand_pose(chains, num_joints, np.zeros(len(chains)))
        axis, speed, level = trajectory_params(label - n_pose, channels)
        cycles = SLOW_CYCLES if speed == "slow" else FAST_CYCLES
        amp = TRAJ_AMPLITUDE * (1 + level)
        offset[:, axis] = amp * np.sin(2 * np.pi * cycles * t + phase)
    frames = pose[None, :, :] + offset[:, None, :]
    frames = frames[:, :, :channels]
    if noise > 0:
        frames = frames + rng.normal(0.0, noise, size=frames.shape)
    return SkeletonSequence(joints, bones, frames, label, sample_id)


def synth_dataset(num_classes: int, per_class: int, num_joints: int = 10,
                  num_frames: int = 40, noise: float = 0.05, seed: int = 0,
                  test_fraction: float = 0.3, channels: int = 3) -> tuple:
    """In-memory synthetic dataset: ``(sequences, splits, class names)``."""
    if num_classes < 1 or per_class < 1:
        raise ValueError("num_classes and per_class must be positive")
    if num_frames < 3:
        raise ValueError("num_frames must be at least 3")
    rng = np.random.default_rng(seed)
    n_test = int(round(per_class * test_fraction))
    seqs, splits = [], []
    for label in range(num_classes):
        for i in range(per_class):
            seqs.append(synth_sequence(label, num_classes, num_joints, num_frames, noise, rng,
                                       f"c{label:02d}_{i:04d}", channels))
            splits.append("test" if i >= per_class - n_test else "train")
    return seqs, splits, class_names(num_classes, channels)


def synth_generate(out_dir, num_classes: int, per_class: int, num_joints: int = 10,
                   num_frames: int = 40, noise: float = 0.05, seed: int = 0,
                   test_fraction: float = 0.3) -> DatasetManifest:
    """Write a synthetic dataset (skeleton files plus manifest) under ``out_dir``."""
    out_dir = Path(out_dir)
    seqs, splits, names = synth_dataset(num_classes, per_class, num_joints, num_frames, noise,
                                        seed, test_fraction)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for seq, split in zip(seqs, splits):
        rel = f"samples/{seq.id}.json"
        save_skeleton_file(seq, out_dir / rel)
        entries.append(ManifestEntry(rel, seq.label, split))
    manifest = DatasetManifest(entries, names, out_dir)
    manifest.save(out_dir)
    return manifest
