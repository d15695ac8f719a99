"""Segment extraction, the three-space loss, optimization and capacity search."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Checkpoint, ModelConfig, ModelParams, SegmentOutputs, forward
from .trajectory import Standardizer, Trajectory, decompose_array, fit_standardizer

log = logging.getLogger(__name__)

SPACES = ("global", "local", "perceptual")
DEFAULT_FRAME_SIZE = (856, 480)


@dataclass(frozen=True)
class WindowConfig:
    T: int = 12
    s: int = 1
    P: int = 6

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"segment length T must be >= 2, got {self.T}")
        if self.s < 1:
            raise ValueError(f"stride s must be >= 1, got {self.s}")
        if self.P < 0:
            raise ValueError(f"prediction length P must be >= 0, got {self.P}")


@dataclass(frozen=True)
class LossWeights:
    g: float = 1.0
    l: float = 1.0
    p: float = 1.0

    def __post_init__(self):
        w = (self.g, self.l, self.p)
        if any(x < 0 for x in w):
            raise ValueError(f"loss weights must be non-negative, got {w}")
        if not any(x > 0 for x in w):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 100
    patience: int = 10
    split: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError(f"validation split must be in (0, 1), got {self.split}")
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("lr, batch, epochs and patience must be positive")


@dataclass(frozen=True)
class Segment:
    """Half-open window [begin, begin + T) of one trajectory, in absolute frames."""

    video_id: str
    person_id: int
    begin: int
    T: int
    n_future: int  # ground-truth frames available after the window, <= P
    offset: int  # index of the first window frame within the trajectory

    @property
    def end(self) -> int:
        return self.begin + self.T


def segment_trajectory(traj: Trajectory, cfg: WindowConfig) -> list[Segment]:
    n = len(traj)
    out = []
    b = 0
    while b + cfg.T <= n:
        n_future = min(cfg.P, n - b - cfg.T)
        out.append(Segment(traj.video_id, traj.person_id, traj.start_frame + b, cfg.T, n_future, b))
        b += cfg.s
    return out


def count_segments(n: int, T: int, s: int) -> int:
    return (n - T) // s + 1 if n >= T else 0


# ---------------------------------------------------------------------------
# feature tables and batches


@dataclass
class FeatureTable:
    """Frame features of a trajectory corpus, concatenated into flat arrays.

    ``global_`` and ``local`` are standardized; ``perceptual`` holds raw joint
    coordinates divided by ``image_scale``.
    """

    global_: np.ndarray  # (N, 4)
    local: np.ndarray  # (N, 2k)
    perceptual: np.ndarray  # (N, 2k)
    starts: np.ndarray  # offset of each trajectory in the flat arrays
    segments: list[Segment]
    segment_traj: np.ndarray  # trajectory index of each segment

    @classmethod
    def build(cls, trajs: Sequence[Trajectory], window: WindowConfig, gstd: Standardizer,
              lstd: Standardizer, image_scale: float) -> "FeatureTable":
        gs, ls, ps, starts, segs, seg_traj = [], [], [], [], [], []
        pos = 0
        for i, tr in enumerate(trajs):
            g, l = decompose_array(tr.joints)
            gs.append(gstd.transform(g))
            ls.append(lstd.transform(l.reshape(len(tr), -1)))
            ps.append(tr.joints.reshape(len(tr), -1) / image_scale)
            starts.append(pos)
            pos += len(tr)
            for seg in segment_trajectory(tr, window):
                segs.append(seg)
                seg_traj.append(i)
        k2 = lstd.dim
        return cls(
            np.concatenate(gs) if gs else np.zeros((0, 4)),
            np.concatenate(ls) if ls else np.zeros((0, k2)),
            np.concatenate(ps) if ps else np.zeros((0, k2)),
            np.asarray(starts, dtype=np.int64),
            segs,
            np.asarray(seg_traj, dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.segments)

    def batch(self, idx: Sequence[int], window: WindowConfig) -> "SegmentBatch":
        idx = np.asarray(idx, dtype=np.int64)
        first = np.array([self.starts[self.segment_traj[i]] + self.segments[i].offset for i in idx],
                         dtype=np.int64)
        n_future = np.array([self.segments[i].n_future for i in idx], dtype=np.int64)
        rec = first[:, None] + np.arange(window.T)
        fut = first[:, None] + window.T + np.arange(window.P)
        valid = np.arange(window.P)[None, :] < n_future[:, None]
        fut = np.where(valid, fut, first[:, None])  # masked slots point at a real row
        targets = {}
        for space, arr in zip(SPACES, (self.global_, self.local, self.perceptual)):
            pred = arr[fut] * valid[..., None]
            targets[space] = (arr[rec], pred)
        return SegmentBatch(self.global_[rec], self.local[rec], targets, n_future, window.P)


@dataclass
class SegmentBatch:
    global_in: np.ndarray  # (B, T, 4) standardized
    local_in: np.ndarray  # (B, T, 2k) standardized
    targets: dict[str, tuple[np.ndarray, np.ndarray]]  # space -> (rec (B,T,d), pred (B,P,d))
    n_future: np.ndarray  # (B,)
    P: int

    def __len__(self) -> int:
        return self.global_in.shape[0]

    @property
    def T(self) -> int:
        return self.global_in.shape[1]


# ---------------------------------------------------------------------------
# losses


def _coefficients(n_future: np.ndarray, T: int, P: int) -> tuple[np.ndarray, np.ndarray]:
    n_future = np.asarray(n_future)
    rec = np.where(n_future > 0, 0.5 / T, 1.0 / T)[:, None] * np.ones((1, T))
    with np.errstate(divide="ignore"):
        per = np.where(n_future > 0, 0.5 / np.maximum(n_future, 1), 0.0)
    pred = np.where(np.arange(P)[None, :] < n_future[:, None], per[:, None], 0.0)
    return rec, pred


def segment_loss(outputs: SegmentOutputs, batch: SegmentBatch, space: str) -> Tensor:
    """Per-segment loss in one feature space, shape (B,).

    Half the mean squared error over the window plus half the mean over the
    available future frames; with no future frames the window mean alone.
    """
    if space not in SPACES:
        raise ValueError(f"unknown loss space {space!r}; expected one of {SPACES}")
    attr = "global_" if space == "global" else space
    rec_target, pred_target = batch.targets[space]
    rec_coef, pred_coef = _coefficients(batch.n_future, batch.T, batch.P)
    rec_out = getattr(outputs.reconstructed, attr)
    if rec_out.shape[1:] != rec_target.shape[1:]:
        raise ad.ShapeError(f"{space} loss: output {rec_out.shape} vs target {rec_target.shape}")
    err = ad.sq_norm(ad.sub(rec_out, Tensor(rec_target)))
    loss = ad.tsum(ad.mul(err, Tensor(rec_coef)), axis=1)
    if batch.P > 0:
        pred_out = getattr(outputs.predicted, attr)
        err_p = ad.sq_norm(ad.sub(pred_out, Tensor(pred_target)))
        loss = ad.add(loss, ad.tsum(ad.mul(err_p, Tensor(pred_coef)), axis=1))
    return loss


def combined_loss(reports: dict[str, Tensor], w: LossWeights) -> Tensor:
    """Weighted sum of the per-space losses; zero-weight terms are skipped."""
    total = None
    for space, lam in zip(SPACES, (w.g, w.l, w.p)):
        if lam == 0:
            continue
        term = ad.scale(reports[space], lam)
        total = term if total is None else ad.add(total, term)
    return total


def batch_loss(params: ModelParams, batch: SegmentBatch, w: LossWeights) -> tuple[Tensor, dict[str, Tensor]]:
    """Mean combined loss over the batch, plus the per-segment per-space losses."""
    out = forward(batch.global_in, batch.local_in, params, batch.P)
    reports = {space: segment_loss(out, batch, space) for space in SPACES}
    return ad.mean(combined_loss(reports, w)), reports


def evaluate(params: ModelParams, table: FeatureTable, window: WindowConfig, w: LossWeights,
             chunk: int = 2048) -> dict[str, float]:
    """Mean losses over every segment of a table (no gradients recorded)."""
    sums = dict.fromkeys(("L", "Lg", "Ll", "Lp"), 0.0)
    n = len(table)
    for lo in range(0, n, chunk):
        b = table.batch(range(lo, min(n, lo + chunk)), window)
        _, reports = batch_loss(params, b, w)
        lg, ll, lp = (reports[s].value for s in SPACES)
        sums["Lg"] += lg.sum()
        sums["Ll"] += ll.sum()
        sums["Lp"] += lp.sum()
        sums["L"] += (w.g * lg + w.l * ll + w.p * lp).sum()
    return {k: v / max(n, 1) for k, v in sums.items()}


# ---------------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads: ad.Gradient) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.value)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def train_step(params: ModelParams, opt: Adam, batch: SegmentBatch, w: LossWeights) -> float:
    with ad.Tape() as tape:
        loss, _ = batch_loss(params, batch, w)
    grads = ad.backward(loss, tape, params.parameters())
    opt.step(grads)
    return loss.item()


def split_trajectories(trajs: Sequence[Trajectory], frac: float, seed: int) -> tuple[list, list]:
    """Hold out ``frac`` of the trajectories (by trajectory, not by segment)."""
    order = np.random.default_rng(seed).permutation(len(trajs))
    n_val = min(len(trajs) - 1, max(1, int(round(frac * len(trajs))))) if len(trajs) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    train = [t for i, t in enumerate(trajs) if i not in val_idx]
    val = [t for i, t in enumerate(trajs) if i in val_idx]
    return train, val


def fit_feature_standardizers(trajs: Sequence[Trajectory]) -> tuple[Standardizer, Standardizer]:
    joints = np.concatenate([t.joints for t in trajs])
    g, l = decompose_array(joints)
    return fit_standardizer(g), fit_standardizer(l.reshape(len(joints), -1))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_val: float


def train(corpus: Sequence[Trajectory], model_cfg: ModelConfig, train_cfg: TrainConfig,
          window: WindowConfig, weights: LossWeights, image_scale: float | None = None,
          progress: Callable[[dict], None] | None = None, init: Checkpoint | None = None) -> TrainResult:
    """Fit a model on normal trajectories with mini-batch Adam and early stopping.

    Returns the parameters of the epoch with the lowest validation loss. With
    ``init``, training resumes from that checkpoint's parameters and feature
    statistics, and its starting validation loss is the bar to beat.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    if image_scale is None:
        image_scale = float(np.hypot(*DEFAULT_FRAME_SIZE))
    model_cfg = replace(model_cfg, T=window.T, P=window.P)
    if init is not None:
        model_cfg = replace(init.params.config, T=window.T, P=window.P)
    train_set, val_set = split_trajectories(corpus, train_cfg.split, train_cfg.seed)
    if init is not None:
        gstd, lstd = init.global_std, init.local_std
    else:
        gstd, lstd = fit_feature_standardizers(train_set)
    if lstd.dim != model_cfg.local_dim:
        raise ValueError(f"corpus has {lstd.dim // 2} joints but the model expects {model_cfg.k}")
    train_tab = FeatureTable.build(train_set, window, gstd, lstd, image_scale)
    val_tab = FeatureTable.build(val_set, window, gstd, lstd, image_scale)
    if len(train_tab) == 0:
        raise ValueError(f"no training segments: every trajectory is shorter than T={window.T}")
    if len(val_tab) == 0:
        log.warning("validation split has no segments; early stopping on the training set")
        val_tab = train_tab

    rng = np.random.default_rng(train_cfg.seed)
    params = ModelParams.init(model_cfg, seed=int(rng.integers(2**31)))
    if init is not None:
        params = ModelParams(model_cfg, init.params.copy().tensors)
    opt = Adam(params.parameters(), lr=train_cfg.lr)
    best = evaluate(params, val_tab, window, weights)["L"] if init is not None else math.inf
    best_values = {n: t.value.copy() for n, t in params.tensors.items()}
    stale = 0
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_tab))
        total = 0.0
        for lo in range(0, len(order), train_cfg.batch):
            idx = order[lo:lo + train_cfg.batch]
            total += train_step(params, opt, train_tab.batch(idx, window), weights) * len(idx)
        val = evaluate(params, val_tab, window, weights)
        row = {"epoch": epoch, "train_loss": total / len(order), "val_loss": val["L"],
               "Lg": val["Lg"], "Ll": val["Ll"], "Lp": val["Lp"]}
        history.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d train %.6g val %.6g", epoch, row["train_loss"], row["val_loss"])
        if val["L"] < best:
            best = val["L"]
            best_values = {n: t.value.copy() for n, t in params.tensors.items()}
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    for n, t in params.tensors.items():
        t.value = best_values[n]
    meta = {
        "window": {"T": window.T, "s": window.s, "P": window.P},
        "weights": {"g": weights.g, "l": weights.l, "p": weights.p},
        "image_scale": image_scale,
        "best_val": best,
        "epochs_run": len(history),
    }
    return TrainResult(Checkpoint(params, gstd, lstd, meta), history, best)


# ---------------------------------------------------------------------------
# capacity regularization


@dataclass
class CapacitySearchResult:
    selected: int
    losses: list[tuple[int, float]]  # (capacity, best validation loss), in ladder order
    results: dict[int, TrainResult | None]

    @property
    def reference(self) -> float:
        return self.losses[0][1]


def select_capacity(losses: Sequence[tuple[int, float]], tolerance: float = 0.05) -> int:
    """Smallest capacity whose loss is within ``tolerance`` of the first (largest) one."""
    if not losses:
        raise ValueError("empty capacity ladder")
    limit = (1.0 + tolerance) * losses[0][1]
    selected = losses[0][0]
    for h, loss in losses:
        if loss <= limit and h < selected:
            selected = h
    return selected


def capacity_search(corpus: Sequence[Trajectory], ladder: Sequence[int], model_cfg: ModelConfig,
                    train_cfg: TrainConfig, window: WindowConfig, weights: LossWeights,
                    image_scale: float | None = None, tolerance: float = 0.05,
                    trainer: Callable[..., TrainResult] = train) -> CapacitySearchResult:
    """Train each hidden size of a strictly descending ladder and keep the smallest adequate one."""
    ladder = list(ladder)
    if not ladder:
        raise ValueError("capacity ladder must be non-empty")
    if any(a <= b for a, b in zip(ladder, ladder[1:])):
        raise ValueError(f"capacity ladder must be strictly descending, got {ladder}")
    losses, results = [], {}
    for h in ladder:
        res = trainer(corpus, replace(model_cfg, hidden=h), train_cfg, window, weights, image_scale)
        results[h] = res
        losses.append((h, res.best_val))
        log.info("capacity %d: best validation loss %.6g", h, res.best_val)
    return CapacitySearchResult(select_capacity(losses, tolerance), losses, results)
