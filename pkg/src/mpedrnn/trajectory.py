"""Skeleton data model, global/local decomposition and feature standardization."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_JOINTS = 17


class DegenerateBox(ValueError):
    """A skeleton whose joint extent is zero along x or y."""


class FormatError(ValueError):
    """A malformed record in a detection or trajectory file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class SkeletonFrame:
    joints: np.ndarray  # (k, 2) pixel coordinates
    conf: np.ndarray | None = None

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.ndim != 2 or joints.shape[1] != 2:
            raise ValueError(f"joints must have shape (k, 2), got {joints.shape}")
        if not np.all(np.isfinite(joints)):
            raise ValueError("joint coordinates must be finite")
        object.__setattr__(self, "joints", joints)
        if self.conf is not None:
            object.__setattr__(self, "conf", np.asarray(self.conf, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class GlobalFeature:
    x: float
    y: float
    w: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])


@dataclass(frozen=True)
class LocalFeature:
    joints: np.ndarray  # (k, 2), box-normalized


@dataclass
class Trajectory:
    """One person's skeletons at consecutive frames of one video."""

    video_id: str
    person_id: int
    start_frame: int
    joints: np.ndarray  # (n, k, 2)
    conf: np.ndarray | None = None  # (n, k)
    interpolated: np.ndarray | None = field(default=None, repr=False)  # (n,) bool

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[2] != 2:
            raise ValueError(f"trajectory joints must have shape (n, k, 2), got {self.joints.shape}")
        if self.interpolated is None:
            self.interpolated = np.zeros(len(self.joints), dtype=bool)

    def __len__(self) -> int:
        return self.joints.shape[0]

    @property
    def k(self) -> int:
        return self.joints.shape[1]

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start_frame, self.start_frame + len(self))

    def frame(self, i: int) -> SkeletonFrame:
        conf = None if self.conf is None else self.conf[i]
        return SkeletonFrame(self.joints[i], conf)


# ---------------------------------------------------------------------------
# decomposition


def decompose_array(joints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decomposition of ``(..., k, 2)`` joints.

    Returns global features ``(..., 4)`` ordered (x_center, y_center, w, h) and
    local features ``(..., k, 2)``.
    """
    joints = np.asarray(joints, dtype=np.float64)
    lo = joints.min(axis=-2)
    hi = joints.max(axis=-2)
    extent = hi - lo
    if np.any(extent <= 0):
        raise DegenerateBox("skeleton bounding box has zero width or height")
    center = (hi + lo) / 2.0
    # (x - center) / w, written so the extremal joints land on exactly +-0.5
    local = (joints - lo[..., None, :]) / extent[..., None, :] - 0.5
    return np.concatenate([center, extent], axis=-1), local


def recompose_array(glob: np.ndarray, local: np.ndarray) -> np.ndarray:
    glob = np.asarray(glob, dtype=np.float64)
    local = np.asarray(local, dtype=np.float64)
    extent = glob[..., 2:4]
    if np.any(extent <= 0):
        raise DegenerateBox("cannot recompose with non-positive width or height")
    return local * extent[..., None, :] + glob[..., None, 0:2]


def decompose(frame: SkeletonFrame) -> tuple[GlobalFeature, LocalFeature]:
    g, l = decompose_array(frame.joints)
    return GlobalFeature(*map(float, g)), LocalFeature(l)


def recompose(g: GlobalFeature, l: LocalFeature) -> SkeletonFrame:
    return SkeletonFrame(recompose_array(g.as_array(), l.joints))


def is_degenerate(joints: np.ndarray) -> np.ndarray:
    """Boolean mask over leading axes: True where the box has zero extent."""
    joints = np.asarray(joints, dtype=np.float64)
    extent = joints.max(axis=-2) - joints.min(axis=-2)
    return np.any(extent <= 0, axis=-1)


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Standardizer:
    """Per-feature robust scaling: (v - median) / (q90 - q10)."""

    median: np.ndarray
    scale: np.ndarray

    @property
    def dim(self) -> int:
        return self.median.shape[0]

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise ValueError(f"standardizer fitted on {self.dim} features, got {v.shape[-1]}")
        return v

    def transform(self, v: np.ndarray) -> np.ndarray:
        return (self._check(v) - self.median) / self.scale

    def inverse(self, v: np.ndarray) -> np.ndarray:
        return self._check(v) * self.scale + self.median

    def to_dict(self) -> dict:
        return {"median": self.median.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["median"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def fit_standardizer(features: Sequence[Sequence[float]] | np.ndarray) -> Standardizer:
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot fit a standardizer on empty input")
    if x.ndim == 1:
        x = x[:, None]
    x = x.reshape(-1, x.shape[-1])
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a standardizer")
    median = np.median(x, axis=0)
    q10, q90 = np.quantile(x, [0.1, 0.9], axis=0, method="linear")
    spread = q90 - q10
    scale = np.where(spread > 0, spread, 1.0)
    return Standardizer(median, scale)


def apply_standardizer(s: Standardizer, v: np.ndarray) -> np.ndarray:
    return s.transform(v)


def invert_standardizer(s: Standardizer, v: np.ndarray) -> np.ndarray:
    return s.inverse(v)


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class Detection:
    video_id: str
    frame: int
    joints: np.ndarray
    conf: np.ndarray | None = None
    person_id: int | None = None


def parse_record(line: str, lineno: int | None = None, require_person: bool = False) -> Detection:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON ({e.msg})", lineno) from None
    if not isinstance(rec, dict):
        raise FormatError("record must be a JSON object", lineno)
    try:
        video_id = str(rec["video_id"])
        frame = rec["frame"]
        joints = np.asarray(rec["joints"], dtype=np.float64)
    except KeyError as e:
        raise FormatError(f"missing field {e.args[0]!r}", lineno) from None
    except (TypeError, ValueError):
        raise FormatError("joints must be a list of [x, y] pairs", lineno) from None
    if not isinstance(frame, int) or isinstance(frame, bool):
        raise FormatError("frame must be an integer", lineno)
    if joints.ndim != 2 or joints.shape[1] != 2 or not np.all(np.isfinite(joints)):
        raise FormatError("joints must be a list of finite [x, y] pairs", lineno)
    conf = rec.get("conf")
    if conf is not None:
        try:
            conf = np.asarray(conf, dtype=np.float64)
        except (TypeError, ValueError):
            raise FormatError("conf must be a list of numbers", lineno) from None
        if conf.shape != (joints.shape[0],):
            raise FormatError("conf length must equal the number of joints", lineno)
    pid = rec.get("person_id")
    if pid is not None and (not isinstance(pid, int) or isinstance(pid, bool)):
        raise FormatError("person_id must be an integer", lineno)
    if require_person and pid is None:
        raise FormatError("missing field 'person_id'", lineno)
    return Detection(video_id, frame, joints, conf, pid)


def read_detections(path: str | Path, require_person: bool = False) -> list[Detection]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            out.append(parse_record(line, lineno, require_person))
    return out


def detection_to_json(d: Detection) -> str:
    rec: dict = {"video_id": d.video_id, "frame": int(d.frame)}
    if d.person_id is not None:
        rec["person_id"] = int(d.person_id)
    rec["joints"] = d.joints.tolist()
    if d.conf is not None:
        rec["conf"] = d.conf.tolist()
    return json.dumps(rec)


def write_detections(path: str | Path, detections: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(detection_to_json(d) + "\n")


def _runs(frames: list[int], joints: list[np.ndarray], confs: list) -> Iterator[tuple[int, list, list, list]]:
    """Split sorted per-person records into contiguous runs.

    Single missing frames are filled by linear interpolation; degenerate
    skeletons and longer gaps end the current run.
    """
    run_start = None
    run_j: list[np.ndarray] = []
    run_c: list = []
    run_i: list[bool] = []
    last = None
    for f, j, c in zip(frames, joints, confs):
        if is_degenerate(j):
            if run_j:
                yield run_start, run_j, run_c, run_i
            run_start, run_j, run_c, run_i, last = None, [], [], [], None
            continue
        if last is not None and f == last:
            raise FormatError(f"duplicate frame {f} for one person")
        if last is not None and f == last + 2:
            run_j.append((run_j[-1] + j) / 2.0)
            run_c.append(None if c is None or run_c[-1] is None else (run_c[-1] + c) / 2.0)
            run_i.append(True)
        elif last is not None and f != last + 1:
            yield run_start, run_j, run_c, run_i
            run_start, run_j, run_c, run_i = None, [], [], []
        if run_start is None:
            run_start = f
        run_j.append(j)
        run_c.append(c)
        run_i.append(False)
        last = f
    if run_j:
        yield run_start, run_j, run_c, run_i


def group_trajectories(detections: Iterable[Detection]) -> list[Trajectory]:
    """Group person-labelled detections into contiguous trajectories.

    Records are grouped by (video_id, person_id) and sorted by frame. When a
    person's track is split, later pieces get fresh person ids above the
    largest id seen in that video.
    """
    groups: dict[tuple[str, int], list[Detection]] = defaultdict(list)
    for d in detections:
        if d.person_id is None:
            raise FormatError(f"detection at frame {d.frame} of {d.video_id!r} has no person_id")
        groups[(d.video_id, d.person_id)].append(d)
    next_id: dict[str, int] = defaultdict(int)
    for vid, pid in groups:
        next_id[vid] = max(next_id[vid], pid + 1)
    out = []
    for (vid, pid) in sorted(groups):
        recs = sorted(groups[(vid, pid)], key=lambda d: d.frame)
        k = {r.joints.shape[0] for r in recs}
        if len(k) != 1:
            raise FormatError(f"person {pid} in {vid!r} has inconsistent joint counts {sorted(k)}")
        first = True
        for start, js, cs, interp in _runs([r.frame for r in recs], [r.joints for r in recs],
                                           [r.conf for r in recs]):
            conf = None if any(c is None for c in cs) else np.stack(cs)
            if first:
                person, first = pid, False
            else:
                person = next_id[vid]
                next_id[vid] += 1
            out.append(Trajectory(vid, person, start, np.stack(js), conf, np.asarray(interp)))
    return out


def load_trajectories(path: str | Path) -> list[Trajectory]:
    return group_trajectories(read_detections(path, require_person=True))


def trajectories_to_detections(trajs: Iterable[Trajectory]) -> list[Detection]:
    out = []
    for tr in trajs:
        for i, f in enumerate(tr.frames):
            conf = None if tr.conf is None else tr.conf[i]
            out.append(Detection(tr.video_id, int(f), tr.joints[i], conf, tr.person_id))
    out.sort(key=lambda d: (d.video_id, d.frame, d.person_id))
    return out


def save_trajectories(path: str | Path, trajs: Iterable[Trajectory]) -> None:
    write_detections(path, trajectories_to_detections(trajs))
