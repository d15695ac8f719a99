"""Frame anomaly scores from segment perceptual losses, and frame-level ROC AUC."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .model import Checkpoint, forward
from .training import SPACES, FeatureTable, SegmentBatch, WindowConfig, segment_loss
from .trajectory import Trajectory


@dataclass(frozen=True)
class SkeletonScore:
    video_id: str
    person_id: int
    frame: int
    score: float


@dataclass
class ScoreSeries:
    video_id: str
    scores: np.ndarray  # (n_frames,) one value per video frame

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class EvalMask:
    video_id: str
    labels: np.ndarray  # (n_frames,) 0/1
    include: np.ndarray  # (n_frames,) bool

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.include = np.asarray(self.include, dtype=bool)
        if self.labels.shape != self.include.shape:
            raise ValueError("labels and include flags must have equal length")


def window_from(ckpt: Checkpoint, stride: int | None = None) -> WindowConfig:
    w = ckpt.meta.get("window", {})
    cfg = WindowConfig(w.get("T", ckpt.params.config.T), w.get("s", 1), w.get("P", ckpt.params.config.P))
    return replace(cfg, s=stride) if stride is not None else cfg


def _table(trajs: Sequence[Trajectory], ckpt: Checkpoint, window: WindowConfig) -> FeatureTable:
    return FeatureTable.build(trajs, window, ckpt.global_std, ckpt.local_std,
                              float(ckpt.meta.get("image_scale", 1.0)))


def segment_perceptual_losses(table: FeatureTable, ckpt: Checkpoint, window: WindowConfig,
                              chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(table))
    for lo in range(0, len(table), chunk):
        idx = range(lo, min(len(table), lo + chunk))
        batch = table.batch(idx, window)
        res = forward(batch.global_in, batch.local_in, ckpt.params, batch.P)
        out[lo:lo + len(idx)] = segment_loss(res, batch, "perceptual").value
    return out


def vote(n_frames: int, offsets: np.ndarray, spans: np.ndarray, losses: np.ndarray) -> np.ndarray:
    """Mean loss of the segments covering each frame of one trajectory.

    Segment ``i`` covers frames ``[offsets[i], offsets[i] + spans[i])``.
    Uncovered frames get the mean segment loss, or 0 without segments.
    """
    total = np.zeros(n_frames)
    count = np.zeros(n_frames, dtype=np.int64)
    for lo, span, loss in zip(offsets, spans, losses):
        total[lo:lo + span] += loss
        count[lo:lo + span] += 1
    fallback = float(np.mean(losses)) if len(losses) else 0.0
    return np.where(count > 0, total / np.maximum(count, 1), fallback)


def score_skeletons(trajs: Sequence[Trajectory], ckpt: Checkpoint,
                    window: WindowConfig | None = None) -> list[SkeletonScore]:
    """Per-skeleton scores: each segment votes its perceptual loss to every frame
    of its reconstruction window and of its available prediction window."""
    window = window or window_from(ckpt)
    table = _table(trajs, ckpt, window)
    losses = segment_perceptual_losses(table, ckpt, window)
    offsets = np.array([s.offset for s in table.segments], dtype=np.int64)
    spans = np.array([s.T + s.n_future for s in table.segments], dtype=np.int64)
    out = []
    for i, tr in enumerate(trajs):
        sel = table.segment_traj == i
        alpha = vote(len(tr), offsets[sel], spans[sel], losses[sel])
        out.extend(SkeletonScore(tr.video_id, tr.person_id, int(f), float(a))
                   for f, a in zip(tr.frames, alpha))
    return out


def score_frames(scores: Iterable[SkeletonScore], video_length: int, video_id: str | None = None) -> ScoreSeries:
    """Max-pool skeleton scores per frame; frames without skeletons score 0."""
    out = np.zeros(video_length)
    vid = video_id
    for s in scores:
        if vid is None:
            vid = s.video_id
        elif s.video_id != vid:
            raise ValueError(f"score for video {s.video_id!r} passed while pooling {vid!r}")
        if 0 <= s.frame < video_length and s.score > out[s.frame]:
            out[s.frame] = s.score
    return ScoreSeries(vid or "", out)


def score_videos(scores: Iterable[SkeletonScore], lengths: Mapping[str, int] | None = None) -> list[ScoreSeries]:
    """Frame series for every video; length defaults to the last scored frame + 1."""
    by_video: dict[str, list[SkeletonScore]] = defaultdict(list)
    for s in scores:
        by_video[s.video_id].append(s)
    lengths = dict(lengths or {})
    out = []
    for vid in sorted(set(by_video) | set(lengths)):
        items = by_video.get(vid, [])
        n = lengths.get(vid, max((s.frame for s in items), default=-1) + 1)
        out.append(score_frames(items, n, vid))
    return out


# ---------------------------------------------------------------------------
# evaluation


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC; tied score pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC needs at least one positive and one negative frame")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pooled_frames(series: Iterable[ScoreSeries], masks: Iterable[EvalMask]) -> tuple[np.ndarray, np.ndarray]:
    """Scores and labels of every included frame, pooled across videos.

    Masked frames missing from the score series score 0 (no skeleton).
    """
    by_video = {s.video_id: s.scores for s in series}
    all_scores, all_labels = [], []
    for m in sorted(masks, key=lambda m: m.video_id):
        s = by_video.get(m.video_id, np.zeros(0))
        full = np.zeros(len(m.labels))
        n = min(len(s), len(full))
        full[:n] = s[:n]
        all_scores.append(full[m.include])
        all_labels.append(m.labels[m.include])
    if not all_scores:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(all_scores), np.concatenate(all_labels)


def roc_auc(series: Iterable[ScoreSeries], masks: Iterable[EvalMask]) -> float:
    scores, labels = pooled_frames(series, masks)
    return auc_score(scores, labels)


# ---------------------------------------------------------------------------
# interpretation


def normality_report(traj: Trajectory, offset: int, ckpt: Checkpoint,
                     window: WindowConfig | None = None) -> dict:
    """Target vs reconstructed/predicted traces of one segment in each feature space.

    Global and local traces are in standardized units, perceptual traces in
    image coordinates divided by the checkpoint's image scale. Errors are
    per-frame squared L2 distances in those units.
    """
    window = window or window_from(ckpt)
    if offset < 0 or offset + window.T > len(traj):
        raise ValueError(f"segment at offset {offset} does not fit a trajectory of length {len(traj)}")
    table = _table([traj], ckpt, replace(window, s=1))
    seg_idx = next(i for i, s in enumerate(table.segments) if s.offset == offset)
    seg = table.segments[seg_idx]
    batch: SegmentBatch = table.batch([seg_idx], window)
    res = forward(batch.global_in, batch.local_in, ckpt.params, batch.P)
    losses = {space: float(segment_loss(res, batch, space).value[0]) for space in SPACES}
    frames = []
    for phase, dec, n in (("reconstruction", res.reconstructed, seg.T),
                          ("prediction", res.predicted, seg.n_future)):
        for t in range(n):
            entry = {"frame": seg.begin + t + (seg.T if phase == "prediction" else 0), "phase": phase,
                     "target": {}, "output": {}, "error": {}}
            for space in SPACES:
                attr = "global_" if space == "global" else space
                target = batch.targets[space][0 if phase == "reconstruction" else 1][0, t]
                output = getattr(dec, attr).value[0, t]
                entry["target"][space] = target.tolist()
                entry["output"][space] = output.tolist()
                entry["error"][space] = float(np.sum((output - target) ** 2))
            frames.append(entry)
    return {"video_id": traj.video_id, "person_id": traj.person_id, "begin": seg.begin, "T": seg.T,
            "n_future": seg.n_future, "loss": losses, "frames": frames}


# ---------------------------------------------------------------------------
# file formats


def write_scores(path: str | Path, series: Iterable[ScoreSeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame", "score"])
        for s in sorted(series, key=lambda s: s.video_id):
            for t, v in enumerate(s.scores):
                w.writerow([s.video_id, t, repr(float(v))])


def _read_csv(path: str | Path, columns: Sequence[str]) -> Iterable[tuple[int, dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def read_scores(path: str | Path) -> list[ScoreSeries]:
    rows: dict[str, dict[int, float]] = defaultdict(dict)
    for lineno, row in _read_csv(path, ("video_id", "frame", "score")):
        try:
            rows[row["video_id"]][int(row["frame"])] = float(row["score"])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: malformed score row") from None
    out = []
    for vid, frames in sorted(rows.items()):
        arr = np.zeros(max(frames) + 1)
        for f, v in frames.items():
            arr[f] = v
        out.append(ScoreSeries(vid, arr))
    return out


def read_mask(path: str | Path) -> list[EvalMask]:
    rows: dict[str, dict[int, tuple[int, int]]] = defaultdict(dict)
    for lineno, row in _read_csv(path, ("video_id", "frame", "label", "include")):
        try:
            label, include = int(row["label"]), int(row["include"])
            frame = int(row["frame"])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: malformed mask row") from None
        if label not in (0, 1) or include not in (0, 1):
            raise ValueError(f"{path}: line {lineno}: label and include must be 0 or 1")
        rows[row["video_id"]][frame] = (label, include)
    out = []
    for vid, frames in sorted(rows.items()):
        n = max(frames) + 1
        labels = np.zeros(n, dtype=np.int64)
        include = np.zeros(n, dtype=bool)  # frames absent from the file are excluded
        for f, (label, inc) in frames.items():
            labels[f] = label
            include[f] = bool(inc)
        out.append(EvalMask(vid, labels, include))
    return out
