"""Frame-to-frame skeleton association by optimal assignment."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .trajectory import Detection, Trajectory, is_degenerate

DEFAULT_GATE = 1.5
DEFAULT_MAX_GAP = 2


def box(joints: np.ndarray) -> np.ndarray:
    """(x1, y1, x2, y2) from joint extrema."""
    lo = joints.min(axis=0)
    hi = joints.max(axis=0)
    return np.concatenate([lo, hi])


def iou(a: np.ndarray, b: np.ndarray) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def skeleton_cost(prev: np.ndarray, cur: np.ndarray) -> float:
    """Mean joint displacement over the previous box diagonal, plus (1 - box IoU)."""
    bp, bc = box(prev), box(cur)
    diag = float(np.hypot(bp[2] - bp[0], bp[3] - bp[1]))
    dist = float(np.mean(np.linalg.norm(prev - cur, axis=1)))
    return dist / max(diag, 1e-9) + (1.0 - iou(bp, bc))


@dataclass
class TrackState:
    track_id: int
    last_frame: int
    last_joints: np.ndarray
    missed: int = 0
    start_frame: int = 0
    joints: list[np.ndarray] = field(default_factory=list, repr=False)
    interpolated: list[bool] = field(default_factory=list, repr=False)

    def extend(self, frame: int, joints: np.ndarray) -> None:
        gap = frame - self.last_frame - 1
        if gap == 1:
            self.joints.append((self.last_joints + joints) / 2.0)
            self.interpolated.append(True)
        self.joints.append(joints)
        self.interpolated.append(False)
        self.last_frame = frame
        self.last_joints = joints
        self.missed = 0


def pair_cost(track: TrackState, det: Detection) -> float:
    return skeleton_cost(track.last_joints, det.joints)


def _hungarian_square(c: np.ndarray) -> np.ndarray:
    """Min-cost perfect matching on a square matrix via shortest augmenting paths
    with row/column potentials. Returns ``col_of_row``."""
    n = c.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # row_of[j]: 1-based row matched to column j; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            cols = np.flatnonzero(free) + 1
            better = reduced[cols - 1] < minv[cols]
            minv[cols[better]] = reduced[cols - 1][better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            used_cols = np.flatnonzero(used)
            u[row_of[used_cols]] += delta
            v[used_cols] -= delta
            minv[cols] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[row_of[j] - 1] = j - 1
    return col_of_row


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    total: float

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def hungarian_assign(costs, gate: float | None = None) -> Assignment:
    """Minimum-total-cost partial matching of rows to columns.

    Rectangular matrices are padded to square. With a ``gate``, costs are
    capped at the gate (the price of leaving a row unmatched) and pairs whose
    cost exceeds it are dropped from the result.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n == 0 or m == 0:
        return Assignment([], 0.0)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    size = max(n, m)
    pad = gate if gate is not None else 0.0
    sq = np.full((size, size), pad)
    sq[:n, :m] = c if gate is None else np.minimum(c, gate)
    col_of_row = _hungarian_square(sq)
    pairs = [(i, int(col_of_row[i])) for i in range(n)
             if col_of_row[i] < m and (gate is None or c[i, col_of_row[i]] <= gate)]
    return Assignment(pairs, float(sum(c[i, j] for i, j in pairs)))


def track(detections: Iterable[Detection], gate: float = DEFAULT_GATE,
          max_gap: int = DEFAULT_MAX_GAP) -> list[Trajectory]:
    """Link per-frame detections into contiguous trajectories, video by video.

    Existing person ids are ignored. A track unmatched for ``max_gap``
    consecutive frames terminates; a single missed frame is filled by linear
    interpolation, longer bridged gaps start a new trajectory. Degenerate
    skeletons are discarded.
    """
    by_video: dict[str, dict[int, list[Detection]]] = defaultdict(lambda: defaultdict(list))
    for d in detections:
        by_video[d.video_id][d.frame].append(d)
    out = []
    for vid in sorted(by_video):
        out.extend(_track_video(vid, by_video[vid], gate, max_gap))
    return out


def _emit(vid: str, tr: TrackState, person: int) -> Trajectory:
    return Trajectory(vid, person, tr.start_frame, np.stack(tr.joints), None,
                      np.asarray(tr.interpolated, dtype=bool))


def _track_video(vid: str, frames: dict[int, list[Detection]], gate: float, max_gap: int) -> list[Trajectory]:
    active: list[TrackState] = []
    finished: list[TrackState] = []
    next_id = 0
    for f in sorted(frames):
        dets = [d for d in frames[f] if not is_degenerate(d.joints)]
        still = []
        for tr in active:
            if f - tr.last_frame - 1 >= max_gap:
                finished.append(tr)
            else:
                still.append(tr)
        active = still
        matched_tracks, matched_dets = set(), set()
        if active and dets:
            costs = np.array([[pair_cost(tr, d) for d in dets] for tr in active])
            for i, j in hungarian_assign(costs, gate).pairs:
                tr = active[i]
                if f - tr.last_frame - 1 > 1:
                    # too long to interpolate: close this piece, continue as a new track
                    finished.append(TrackState(tr.track_id, tr.last_frame, tr.last_joints, 0,
                                               tr.start_frame, tr.joints, tr.interpolated))
                    tr = active[i] = TrackState(next_id, f, dets[j].joints, 0, f)
                    next_id += 1
                    tr.joints.append(dets[j].joints)
                    tr.interpolated.append(False)
                else:
                    tr.extend(f, dets[j].joints)
                matched_tracks.add(i)
                matched_dets.add(j)
        for i, tr in enumerate(active):
            if i not in matched_tracks:
                tr.missed = f - tr.last_frame
        for j, d in enumerate(dets):
            if j not in matched_dets:
                tr = TrackState(next_id, f, d.joints, 0, f, [d.joints], [False])
                next_id += 1
                active.append(tr)
    finished.extend(active)
    finished.sort(key=lambda t: t.track_id)
    return [_emit(vid, tr, tr.track_id) for tr in finished]
