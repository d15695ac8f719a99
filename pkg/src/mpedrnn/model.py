"""Message-passing encoder / dual-decoder GRU network over global and local skeleton features.

Shapes: ``B`` segments per batch, ``T`` input frames, ``P`` predicted frames,
``k`` joints, hidden size ``H`` per branch, message size ``M``. Global
features are 4-dimensional (x, y, w, h), local and perceptual features are
``2k``-dimensional with joints flattened as (x1, y1, x2, y2, ...).

Weight matrices are stored input-major, so an affine map is ``x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .trajectory import Standardizer

GRU_NAMES = ("enc_g", "enc_l", "rec_g", "rec_l", "pred_g", "pred_l")
STAGES = ("enc", "rec", "pred")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    k: int = 17
    hidden: int = 16
    message: int = 8
    T: int = 12
    P: int = 6
    perceptual_hidden: int | None = None  # defaults to 2 * (4 + 2k)
    share_heads: bool = True

    def __post_init__(self):
        for name in ("k", "hidden", "message", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.P < 0:
            raise ValueError("P must be >= 0")

    @property
    def local_dim(self) -> int:
        return 2 * self.k

    @property
    def perceptual_width(self) -> int:
        return self.perceptual_hidden or 2 * (4 + 2 * self.k)


@dataclass(frozen=True)
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden(self) -> int:
        return self.b_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0] - self.hidden


@dataclass(frozen=True)
class MessageParams:
    W: Tensor
    b: Tensor


@dataclass(frozen=True)
class HeadParams:
    W_g: Tensor
    b_g: Tensor
    W_l: Tensor
    b_l: Tensor
    W_p1: Tensor
    b_p1: Tensor
    W_p2: Tensor
    b_p2: Tensor


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, M, D = cfg.hidden, cfg.message, cfg.local_dim
    inputs = {"enc_g": 4 + M, "enc_l": D + M, "rec_g": M, "rec_l": M, "pred_g": M, "pred_l": M}
    shapes: dict[str, tuple[int, ...]] = {}
    for name in GRU_NAMES:
        for gate in "zrh":
            shapes[f"{name}.W_{gate}"] = (inputs[name] + H, H)
            shapes[f"{name}.b_{gate}"] = (H,)
    for stage in STAGES:
        for direction in ("l2g", "g2l"):
            shapes[f"msg_{stage}_{direction}.W"] = (H, M)
            shapes[f"msg_{stage}_{direction}.b"] = (M,)
    Hp = cfg.perceptual_width
    for prefix in _head_prefixes(cfg):
        shapes[f"{prefix}.W_g"] = (H, 4)
        shapes[f"{prefix}.b_g"] = (4,)
        shapes[f"{prefix}.W_l"] = (H, D)
        shapes[f"{prefix}.b_l"] = (D,)
        shapes[f"{prefix}.W_p1"] = (4 + D, Hp)
        shapes[f"{prefix}.b_p1"] = (Hp,)
        shapes[f"{prefix}.W_p2"] = (Hp, D)
        shapes[f"{prefix}.b_p2"] = (D,)
    return shapes


def _head_prefixes(cfg: ModelConfig) -> tuple[str, ...]:
    return ("head",) if cfg.share_heads else ("head_rec", "head_pred")


@dataclass
class ModelParams:
    """All learnable tensors of one network plus its hyperparameters."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _param_shapes(config).items():
            if len(shape) == 2:
                bound = 1.0 / np.sqrt(shape[0])
                value = rng.uniform(-bound, bound, size=shape)
            else:
                value = np.zeros(shape)
            tensors[name] = Tensor(value, requires_grad=True, name=name)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, {n: Tensor(np.zeros(s), requires_grad=True, name=n)
                            for n, s in _param_shapes(config).items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def gru(self, name: str) -> GruParams:
        t = self.tensors
        return GruParams(*(t[f"{name}.{p}"] for p in ("W_z", "W_r", "W_h", "b_z", "b_r", "b_h")))

    def message(self, stage: str, direction: str) -> MessageParams:
        return MessageParams(self.tensors[f"msg_{stage}_{direction}.W"],
                             self.tensors[f"msg_{stage}_{direction}.b"])

    def heads(self, stage: str) -> HeadParams:
        prefix = "head" if self.config.share_heads else f"head_{stage}"
        t = self.tensors
        return HeadParams(*(t[f"{prefix}.{p}"] for p in
                            ("W_g", "b_g", "W_l", "b_l", "W_p1", "b_p1", "W_p2", "b_p2")))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.value.copy(), True, n) for n, t in self.tensors.items()})

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "tensors": {n: {"shape": list(t.shape), "values": t.value.reshape(-1).tolist()}
                        for n, t in self.tensors.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        cfg = ModelConfig(**d["config"])
        expected = _param_shapes(cfg)
        tensors = {}
        for name, shape in expected.items():
            if name not in d["tensors"]:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            entry = d["tensors"][name]
            if tuple(entry["shape"]) != shape:
                raise ValueError(f"parameter {name!r} has shape {entry['shape']}, expected {list(shape)}")
            value = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
            tensors[name] = Tensor(value, requires_grad=True, name=name)
        return cls(cfg, tensors)


# ---------------------------------------------------------------------------
# cells


def compose_message(h_other: Tensor, p: MessageParams) -> Tensor:
    """Cross-branch message: sigmoid(h_other @ W + b), every coordinate in (0, 1)."""
    return ad.sigmoid(ad.add(ad.matmul(h_other, p.W), p.b))


def gru_step(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    xh = ad.concat([x, h_prev])
    z = ad.sigmoid(ad.add(ad.matmul(xh, p.W_z), p.b_z))
    r = ad.sigmoid(ad.add(ad.matmul(xh, p.W_r), p.b_r))
    cand = ad.tanh(ad.add(ad.matmul(ad.concat([x, ad.mul(r, h_prev)]), p.W_h), p.b_h))
    # (1 - z) * h + z * cand
    return ad.add(h_prev, ad.mul(z, ad.sub(cand, h_prev)))


# ---------------------------------------------------------------------------
# network


@dataclass
class DecoderOutputs:
    """Projections of one decoder, in forward time order: each tensor is (B, n, d)."""

    global_: Tensor
    local: Tensor
    perceptual: Tensor

    def __len__(self) -> int:
        return self.global_.shape[1]

    def triples(self, b: int = 0) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return [(self.global_.value[b, t], self.local.value[b, t], self.perceptual.value[b, t])
                for t in range(len(self))]


@dataclass
class SegmentOutputs:
    reconstructed: DecoderOutputs
    predicted: DecoderOutputs
    hidden: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _batched(x) -> Tensor:
    x = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ad.ShapeError(f"segment features must have shape (B, T, d) or (T, d), got {x.shape}")
    return Tensor(x)


def project(states_g: Tensor, states_l: Tensor, heads: HeadParams) -> DecoderOutputs:
    fg = ad.add(ad.matmul(states_g, heads.W_g), heads.b_g)
    fl = ad.add(ad.matmul(states_l, heads.W_l), heads.b_l)
    hidden = ad.tanh(ad.add(ad.matmul(ad.concat([fg, fl]), heads.W_p1), heads.b_p1))
    fp = ad.add(ad.matmul(hidden, heads.W_p2), heads.b_p2)
    return DecoderOutputs(fg, fl, fp)


def _empty_outputs(batch: int, cfg: ModelConfig) -> DecoderOutputs:
    D = cfg.local_dim
    return DecoderOutputs(Tensor(np.zeros((batch, 0, 4))), Tensor(np.zeros((batch, 0, D))),
                          Tensor(np.zeros((batch, 0, D))))


def encode(global_seq, local_seq, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Run both encoders over a standardized segment; returns final (h_ge, h_le)."""
    g = _batched(global_seq)
    l = _batched(local_seq)
    cfg = params.config
    if g.shape[1] == 0:
        raise ValueError("cannot encode an empty segment (T = 0)")
    if g.shape[:2] != l.shape[:2]:
        raise ad.ShapeError(f"encode: global {g.shape} and local {l.shape} disagree on (B, T)")
    if g.shape[2] != 4 or l.shape[2] != cfg.local_dim:
        raise ad.ShapeError(f"encode: expected feature dims 4 and {cfg.local_dim}, "
                            f"got {g.shape[2]} and {l.shape[2]}")
    B = g.shape[0]
    h_g = Tensor(np.zeros((B, cfg.hidden)))
    h_l = Tensor(np.zeros((B, cfg.hidden)))
    gru_g, gru_l = params.gru("enc_g"), params.gru("enc_l")
    l2g, g2l = params.message("enc", "l2g"), params.message("enc", "g2l")
    for t in range(g.shape[1]):
        m_l2g = compose_message(h_l, l2g)
        m_g2l = compose_message(h_g, g2l)
        x_g = ad.concat([Tensor(g.value[:, t]), m_l2g])
        x_l = ad.concat([Tensor(l.value[:, t]), m_g2l])
        h_g, h_l = gru_step(x_g, h_g, gru_g), gru_step(x_l, h_l, gru_l)
    return h_g, h_l


def _decode(h_g: Tensor, h_l: Tensor, params: ModelParams, stage: str, steps: int) -> tuple[list, list]:
    gru_g, gru_l = params.gru(f"{stage}_g"), params.gru(f"{stage}_l")
    l2g, g2l = params.message(stage, "l2g"), params.message(stage, "g2l")
    states_g, states_l = [], []
    for _ in range(steps):
        # both messages read the other branch's pre-update state
        m_l2g = compose_message(h_l, l2g)
        m_g2l = compose_message(h_g, g2l)
        h_g, h_l = gru_step(m_l2g, h_g, gru_g), gru_step(m_g2l, h_l, gru_l)
        states_g.append(h_g)
        states_l.append(h_l)
    return states_g, states_l


def reconstruct(h_ge: Tensor, h_le: Tensor, params: ModelParams, T: int) -> DecoderOutputs:
    """Decode backward from the encoder states; outputs are returned in forward time order.

    The i-th decoder update (i = 1..T) reconstructs frame T - i + 1.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    states_g, states_l = _decode(h_ge, h_le, params, "rec", T)
    states_g.reverse()
    states_l.reverse()
    return project(ad.stack(states_g, axis=1), ad.stack(states_l, axis=1), params.heads("rec"))


def predict(h_ge: Tensor, h_le: Tensor, params: ModelParams, P: int) -> DecoderOutputs:
    """Decode P frames past the end of the segment."""
    if P < 0:
        raise ValueError("P must be >= 0")
    if P == 0:
        return _empty_outputs(h_ge.shape[0], params.config)
    states_g, states_l = _decode(h_ge, h_le, params, "pred", P)
    return project(ad.stack(states_g, axis=1), ad.stack(states_l, axis=1), params.heads("pred"))


def forward(global_seq, local_seq, params: ModelParams, P: int | None = None) -> SegmentOutputs:
    g = _batched(global_seq)
    h_ge, h_le = encode(g, local_seq, params)
    P = params.config.P if P is None else P
    return SegmentOutputs(
        reconstruct(h_ge, h_le, params, g.shape[1]),
        predict(h_ge, h_le, params, P),
        {"ge": h_ge.value, "le": h_le.value},
    )


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    """Trained parameters bundled with the feature statistics and run metadata."""

    params: ModelParams
    global_std: Standardizer
    local_std: Standardizer
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": "mpedrnn-checkpoint",
            "version": CHECKPOINT_VERSION,
            "model": self.params.to_dict(),
            "global_standardizer": self.global_std.to_dict(),
            "local_standardizer": self.local_std.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != "mpedrnn-checkpoint":
            raise ValueError("not an mpedrnn checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        return cls(ModelParams.from_dict(d["model"]),
                   Standardizer.from_dict(d["global_standardizer"]),
                   Standardizer.from_dict(d["local_standardizer"]),
                   d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))
