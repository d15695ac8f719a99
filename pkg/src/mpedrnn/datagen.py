"""Seeded synthetic walkers with injectable anomalies.

Each walker moves at constant image-space velocity while its 17-joint pose
swings through a sinusoidal gait cycle. Body height grows with the walker's
vertical position to mimic perspective. Anomalies override one walker's
dynamics over an inclusive frame interval.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .trajectory import Detection, write_detections

ANOMALY_KINDS = ("run", "freeze", "reverse", "scale")
DEFAULT_MAGNITUDE = {"run": 3.0, "freeze": 1.5, "reverse": 3.0, "scale": 1.8}

# COCO order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
K = 17


@dataclass(frozen=True)
class SceneSpec:
    width: int = 856
    height: int = 480
    walkers: int = 8
    speed_min: float = 0.6  # px / frame
    speed_max: float = 1.2
    gait_amp_min: float = 0.30  # peak leg swing, radians
    gait_amp_max: float = 0.45
    gait_freq_min: float = 0.025  # cycles / frame
    gait_freq_max: float = 0.04
    body_min: float = 60.0  # body height (px) at the top of the walkable band
    body_max: float = 140.0  # ... and at the bottom
    noise: float = 0.5  # joint jitter, px (std)
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.walkers < 1:
            raise ValueError("frame size and walker count must be positive")
        if not (0 < self.speed_min <= self.speed_max):
            raise ValueError("speed range must satisfy 0 < speed_min <= speed_max")
        if not (0 < self.gait_amp_min <= self.gait_amp_max):
            raise ValueError("gait amplitude range must be positive and ordered")
        if not (0 < self.gait_freq_min <= self.gait_freq_max):
            raise ValueError("gait frequency range must be positive and ordered")
        if not (0 < self.body_min <= self.body_max):
            raise ValueError("body size range must be positive and ordered")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def body_height(self, y: np.ndarray | float) -> np.ndarray | float:
        top, bottom = 0.3 * self.height, 0.9 * self.height
        frac = np.clip((np.asarray(y) - top) / (bottom - top), 0.0, 1.0)
        return self.body_min + frac * (self.body_max - self.body_min)


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    person: int
    start: int  # inclusive
    end: int  # inclusive
    magnitude: float | None = None

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}; expected one of {ANOMALY_KINDS}")
        if self.start > self.end:
            raise ValueError(f"anomaly interval {self.start}-{self.end} is empty")

    @property
    def factor(self) -> float:
        return DEFAULT_MAGNITUDE[self.kind] if self.magnitude is None else self.magnitude

    def active(self, t: int) -> bool:
        return self.start <= t <= self.end


def canonical_pose(phase: float, amp: float, facing: float) -> np.ndarray:
    """17 joints in body-height units, origin at the body center, y pointing down."""
    f = facing
    leg = amp * np.sin(phase)
    arm = -0.8 * amp * np.sin(phase)
    bob = 0.01 * np.cos(2.0 * phase)
    pose = np.zeros((K, 2))
    pose[0] = (0.05 * f, -0.43)
    pose[1] = (0.04 * f, -0.455)
    pose[2] = (0.02 * f, -0.46)
    pose[3] = (-0.01 * f, -0.44)
    pose[4] = (-0.035 * f, -0.445)
    shoulders = np.array([[0.025 * f, -0.30], [-0.025 * f, -0.30]])
    pose[5:7] = shoulders
    for side, swing in ((0, arm), (1, -arm)):
        elbow = shoulders[side] + 0.15 * np.array([np.sin(swing) * f, np.cos(swing)])
        fore = swing + 0.35  # forearms bend forward
        wrist = elbow + 0.13 * np.array([np.sin(fore) * f, np.cos(fore)])
        pose[7 + side] = elbow
        pose[9 + side] = wrist
    hips = np.array([[0.02 * f, 0.0], [-0.02 * f, 0.0]])
    pose[11:13] = hips
    for side, swing in ((0, leg), (1, -leg)):
        knee = hips[side] + 0.24 * np.array([np.sin(swing) * f, np.cos(swing)])
        # the trailing shin folds back
        shin = swing - 0.5 * max(0.0, -np.sin(swing))
        ankle = knee + 0.24 * np.array([np.sin(shin) * f, np.cos(shin)])
        pose[13 + side] = knee
        pose[15 + side] = ankle
    pose[:, 1] += bob
    return pose


@dataclass
class Walker:
    person: int
    pos: np.ndarray
    velocity: np.ndarray
    amp: float
    freq: float
    phase: float
    facing: float


def _spawn(scene: SceneSpec, length: int, rng: np.random.Generator) -> list[Walker]:
    lanes = rng.permutation(scene.walkers)
    band_top, band_bottom = 0.35 * scene.height, 0.88 * scene.height
    lane_h = (band_bottom - band_top) / scene.walkers
    out = []
    for i in range(scene.walkers):
        speed = rng.uniform(scene.speed_min, scene.speed_max)
        direction = 1.0 if rng.random() < 0.5 else -1.0
        y0 = band_top + (lanes[i] + rng.uniform(0.2, 0.8)) * lane_h
        vy = rng.uniform(-0.03, 0.03) * speed
        vx = direction * np.sqrt(max(speed**2 - vy**2, 1e-12))
        travel = abs(vx) * length
        margin = 0.06 * scene.width
        room = scene.width - 2 * margin - travel
        offset = rng.uniform(0, room) if room > 0 else room / 2
        x0 = margin + offset if direction > 0 else scene.width - margin - offset
        out.append(Walker(
            person=i,
            pos=np.array([x0, y0]),
            velocity=np.array([vx, vy]),
            amp=rng.uniform(scene.gait_amp_min, scene.gait_amp_max),
            freq=rng.uniform(scene.gait_freq_min, scene.gait_freq_max),
            phase=rng.uniform(0, 2 * np.pi),
            facing=direction,
        ))
    return out


def validate_anomalies(anomalies: Sequence[AnomalySpec], walkers: int, length: int) -> None:
    for a in anomalies:
        if not (0 <= a.start and a.end < length):
            raise ValueError(f"anomaly interval {a.start}-{a.end} outside video of length {length}")
        if not 0 <= a.person < walkers:
            raise ValueError(f"anomaly person {a.person} not among {walkers} walkers")
    by_person: dict[int, list[AnomalySpec]] = {}
    for a in anomalies:
        by_person.setdefault(a.person, []).append(a)
    for person, items in by_person.items():
        items.sort(key=lambda a: a.start)
        for prev, nxt in zip(items, items[1:]):
            if nxt.start <= prev.end:
                raise ValueError(f"overlapping anomaly intervals for person {person}")


@dataclass
class Video:
    video_id: str
    detections: list[Detection]
    labels: np.ndarray  # (length,) 0/1
    anomalies: list[AnomalySpec] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.labels)


def generate(scene: SceneSpec, anomalies: Sequence[AnomalySpec], length: int,
             video_id: str = "video_000", rng: np.random.Generator | None = None) -> Video:
    """Simulate one video; detections are sorted by (frame, person)."""
    if length < 1:
        raise ValueError("video length must be positive")
    validate_anomalies(anomalies, scene.walkers, length)
    rng = np.random.default_rng(scene.seed) if rng is None else rng
    walkers = _spawn(scene, length, rng)
    labels = np.zeros(length, dtype=np.int64)
    for a in anomalies:
        labels[a.start:a.end + 1] = 1
    detections = []
    for t in range(length):
        for w in walkers:
            active = [a for a in anomalies if a.person == w.person and a.active(t)]
            kind = active[0].kind if active else None
            factor = active[0].factor if active else 1.0
            amp, size, phase = w.amp, 1.0, None
            if kind == "run":
                w.pos = w.pos + w.velocity * factor
                w.phase += 2 * np.pi * w.freq * factor
                amp = min(1.3 * w.amp, 1.0)
            elif kind == "freeze":
                w.pos = w.pos + w.velocity
                # lock into a full-stride pose and slide
                phase, amp = np.pi / 2, min(w.amp * factor, 1.0)
            elif kind == "reverse":
                w.pos = w.pos - w.velocity * factor
                w.phase -= 2 * np.pi * w.freq * factor
            else:
                w.pos = w.pos + w.velocity
                w.phase += 2 * np.pi * w.freq
                if kind == "scale":
                    size = factor
            body = scene.body_height(w.pos[1]) * size
            joints = canonical_pose(w.phase if phase is None else phase, amp, w.facing) * body + w.pos
            joints = joints + rng.normal(0.0, scene.noise, size=joints.shape)
            detections.append(Detection(video_id, t, np.round(joints, 2), None, w.person))
    return Video(video_id, detections, labels, list(anomalies))


def random_anomalies(n: int, walkers: int, length: int, rng: np.random.Generator,
                     kinds: Sequence[str] = ANOMALY_KINDS, min_len: int = 40,
                     max_len: int = 80, start_offset: int = 0) -> list[AnomalySpec]:
    """Place ``n`` non-overlapping anomalies on distinct walkers, cycling through ``kinds``."""
    if n > walkers:
        raise ValueError("at most one random anomaly per walker")
    if length < max_len + 2 * min_len:
        raise ValueError(f"video length {length} too short for random anomalies")
    people = rng.choice(walkers, size=n, replace=False)
    out = []
    for i, person in enumerate(people):
        dur = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(min_len, length - dur - min_len))
        out.append(AnomalySpec(kinds[(start_offset + i) % len(kinds)], int(person), start, start + dur - 1))
    return out


def generate_corpus(scene: SceneSpec, videos: int, length: int, anomalies_per_video: int = 0,
                    explicit: dict[int, list[AnomalySpec]] | None = None,
                    prefix: str = "video") -> list[Video]:
    """Several independent videos; video ``i`` draws from seed sequence (seed, i)."""
    out = []
    for i in range(videos):
        rng = np.random.default_rng([scene.seed, i])
        anomalies = list((explicit or {}).get(i, []))
        if anomalies_per_video:
            anomalies += random_anomalies(anomalies_per_video, scene.walkers, length, rng,
                                          start_offset=i * anomalies_per_video)
        out.append(generate(scene, anomalies, length, f"{prefix}_{i:03d}", rng))
    return out


def write_mask(path: str | Path, videos: Sequence[Video]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame", "label", "include"])
        for v in videos:
            for t, label in enumerate(v.labels):
                w.writerow([v.video_id, t, int(label), 1])


def write_corpus(out_dir: str | Path, videos: Sequence[Video]) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    det_path, mask_path = out_dir / "detections.jsonl", out_dir / "mask.csv"
    write_detections(det_path, (d for v in videos for d in v.detections))
    write_mask(mask_path, videos)
    return det_path, mask_path
