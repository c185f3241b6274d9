"""Inter-object interaction, per-object state changes, pooling and the linear head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .slots import LayerNormParams, MLPParams
from .tensor import Tensor, concat, parameter, softmax

TEMPORAL_ATTENTION = "temporal_attention"


def _linear(d_in: int, d_out: int, rng: np.random.Generator, name: str) -> tuple[Tensor, Tensor]:
    a = 1.0 / np.sqrt(d_in)
    return (parameter(rng.uniform(-a, a, (d_in, d_out)), name=f"{name}.w"),
            parameter(np.zeros(d_out), name=f"{name}.b"))


@dataclass
class EncoderLayerParams:
    """Pre-norm Transformer encoder layer acting on the slot axis."""

    ln1: LayerNormParams
    w_qkv: Tensor
    b_qkv: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2: LayerNormParams
    ffn: MLPParams
    heads: int

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator, ffn_mult: int = 4) -> EncoderLayerParams:
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by {heads} heads")
        w_qkv, b_qkv = _linear(dim, 3 * dim, rng, "attn.qkv")
        w_o, b_o = _linear(dim, dim, rng, "attn.out")
        return cls(LayerNormParams.init(dim), w_qkv, b_qkv, w_o, b_o,
                   LayerNormParams.init(dim), MLPParams.init(dim, ffn_mult * dim, dim, rng), heads)

    def named(self) -> dict[str, Tensor]:
        out = {"w_qkv": self.w_qkv, "b_qkv": self.b_qkv, "w_o": self.w_o, "b_o": self.b_o}
        for name in ("ln1", "ln2", "ffn"):
            out.update({f"{name}.{k}": v for k, v in vars(getattr(self, name)).items()})
        return out


@dataclass
class InteractionParams:
    encoder: list[EncoderLayerParams]
    ti: MLPParams  # 2D -> D -> D
    head_w: Tensor
    head_b: Tensor

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator, heads: int = 4,
             depth: int = 1) -> InteractionParams:
        encoder = [EncoderLayerParams.init(dim, heads, rng) for _ in range(depth)]
        ti = MLPParams.init(2 * dim, dim, dim, rng)
        head_w, head_b = _linear(dim, num_classes, rng, "head")
        return cls(encoder, ti, head_w, head_b)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.encoder):
            out.update({f"oi{i}.{k}": v for k, v in layer.named().items()})
        out.update({f"ti.{k}": v for k, v in vars(self.ti).items()})
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out


@dataclass
class StateChangeMatrix:
    s: Tensor  # [..., T', N, D]
    delta: int | str


def self_attention(x: Tensor, layer: EncoderLayerParams) -> Tensor:
    """Multi-head self-attention over axis -2 of ``x`` [..., N, D]; no positional code."""
    *lead, n, d = x.shape
    h = layer.heads
    dh = d // h
    qkv = x @ layer.w_qkv + layer.b_qkv  # [..., N, 3D]
    qkv = qkv.reshape(tuple(lead) + (n, 3, h, dh))
    nl = len(lead)
    # -> [3, ..., H, N, dh]
    qkv = qkv.transpose((nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    ctx = softmax(scores, axis=-1) @ v  # [..., H, N, dh]
    ctx = ctx.swapaxes(-2, -3).reshape(tuple(lead) + (n, d))
    return ctx @ layer.w_o + layer.b_o


def object_interact(o: Tensor, params: InteractionParams) -> Tensor:
    """Transformer encoder over the N object tokens of each frame independently."""
    if o.shape[-2] < 1:
        raise ConfigError("object_interact needs at least one token")
    x = o
    for layer in params.encoder:
        x = x + self_attention(layer.ln1(x), layer)
        x = x + layer.ffn(layer.ln2(x))
    return x


def resolve_delta(delta, num_frames: int) -> int | str:
    if delta == "all":
        if num_frames < 2:
            raise ConfigError("temporal interval exceeds clip length")
        return "all"
    delta = int(delta)
    if not 1 <= delta <= num_frames - 1:
        raise ConfigError(f"temporal interval exceeds clip length (delta={delta}, T={num_frames})")
    return delta


def default_delta(num_frames: int) -> int:
    return max(1, num_frames // 4)


def state_changes(o_tilde: Tensor, delta, params: InteractionParams) -> StateChangeMatrix:
    """Pair each object's state at t with its state at t + delta and map 2D -> D.

    ``o_tilde`` is [..., T, N, D].  ``delta="all"`` stacks every interval
    1..T-1, giving T(T-1)/2 rows.
    """
    t_axis = o_tilde.ndim - 3
    num_frames = o_tilde.shape[t_axis]
    delta = resolve_delta(delta, num_frames)
    lead = (slice(None),) * t_axis
    deltas = range(1, num_frames) if delta == "all" else [delta]
    starts, ends = [], []
    for d in deltas:
        starts.append(o_tilde[lead + (slice(0, num_frames - d),)])
        ends.append(o_tilde[lead + (slice(d, num_frames),)])
    first = concat(starts, axis=t_axis) if len(starts) > 1 else starts[0]
    last = concat(ends, axis=t_axis) if len(ends) > 1 else ends[0]
    return StateChangeMatrix(params.ti(concat([first, last], axis=-1)), delta)


def pool_video(s: StateChangeMatrix | Tensor) -> Tensor:
    """Average over time, then over objects: [..., T', N, D] -> [..., D]."""
    s = s.s if isinstance(s, StateChangeMatrix) else s
    return s.mean(axis=-3).mean(axis=-2)


def classify(v: Tensor, params: InteractionParams) -> Tensor:
    if v.shape[-1] != params.head_w.shape[0]:
        raise ConfigError(f"head expects width {params.head_w.shape[0]}, got {v.shape[-1]}")
    if v.ndim == 1:
        return (v.reshape(1, -1) @ params.head_w).reshape(-1) + params.head_b
    return v @ params.head_w + params.head_b
