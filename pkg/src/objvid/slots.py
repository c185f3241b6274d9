"""Slot attention with learnable queries: frame features -> object tokens."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import GRUParams, Tensor, gelu, gru_cell, layer_norm, parameter, softmax

WEIGHTED_MEAN_EPS = 1e-8


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, dim: int, prefix: str = "ln") -> LayerNormParams:
        return cls(parameter(np.ones(dim), name=f"{prefix}.gain"),
                   parameter(np.zeros(dim), name=f"{prefix}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator) -> MLPParams:
        a, b = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(d_hidden)
        return cls(parameter(rng.uniform(-a, a, (d_in, d_hidden))), parameter(np.zeros(d_hidden)),
                   parameter(rng.uniform(-b, b, (d_hidden, d_out))), parameter(np.zeros(d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


@dataclass
class SlotParams:
    """Trainable state of the slot-attention module.

    Every parameter except ``q`` is shared by all slots, which makes the
    module equivariant to permutations of the query rows.
    """

    q: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    gru: GRUParams
    input_norm: LayerNormParams | None
    slot_norm: LayerNormParams | None
    mlp_norm: LayerNormParams | None = None
    mlp: MLPParams | None = None
    iterations: int = 3

    def __post_init__(self):
        if self.q.ndim != 2 or self.q.shape[0] < 1:
            raise ConfigError(f"queries must be [N>=1, D], got {self.q.shape}")
        if self.iterations < 1:
            raise ConfigError("slot attention needs at least one iteration")

    @property
    def num_slots(self) -> int:
        return self.q.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    @classmethod
    def init(cls, num_slots: int, dim: int, rng: np.random.Generator, iterations: int = 3,
             use_norm: bool = True, use_mlp: bool = True) -> SlotParams:
        s = 1.0 / np.sqrt(dim)
        q = parameter(rng.normal(0.0, s, (num_slots, dim)), name="slots.q")
        w = {k: parameter(rng.uniform(-s, s, (dim, dim)), name=f"slots.{k}")
             for k in ("w_q", "w_k", "w_v")}
        gru = GRUParams.init(dim, rng)
        norms = ({"input_norm": LayerNormParams.init(dim), "slot_norm": LayerNormParams.init(dim)}
                 if use_norm else {"input_norm": None, "slot_norm": None})
        mlp = {"mlp_norm": LayerNormParams.init(dim), "mlp": MLPParams.init(dim, dim, dim, rng)} if use_mlp else {}
        return cls(q=q, **w, gru=gru, **norms, **mlp, iterations=iterations)

    def named(self) -> dict[str, Tensor]:
        out = {"q": self.q, "w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}
        out.update({f"gru.{k}": v for k, v in self.gru.named().items()})
        for name in ("input_norm", "slot_norm", "mlp_norm", "mlp"):
            sub = getattr(self, name)
            if sub is not None:
                out.update({f"{name}.{k}": v for k, v in vars(sub).items()})
        return out


@dataclass
class SlotOutput:
    tokens: Tensor  # [..., N, D]
    attn: Tensor  # [..., N, HW], final iteration
    attn_history: list[np.ndarray] = field(default_factory=list, repr=False)


def project_inputs(f: Tensor, params: SlotParams) -> tuple[Tensor, Tensor]:
    """Keys and values for frame features ``f`` [..., HW, D]."""
    if params.input_norm is not None:
        f = params.input_norm(f)
    return f @ params.w_k, f @ params.w_v


def slot_step(S: Tensor, f: Tensor, params: SlotParams,
              kv: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """One routing iteration. Returns the updated slots and the slot-normalized attention."""
    if S.shape[-1] != params.dim or f.shape[-1] != params.dim:
        raise ConfigError(f"slot_step: slots {S.shape} / features {f.shape} vs dim {params.dim}")
    k, v = kv if kv is not None else project_inputs(f, params)
    s_in = params.slot_norm(S) if params.slot_norm is not None else S
    q = s_in @ params.w_q
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(params.dim))
    attn = softmax(logits, axis=-2)
    weights = attn / (attn.sum(axis=-1, keepdims=True) + WEIGHTED_MEAN_EPS)
    updates = weights @ v
    S_new = gru_cell(updates, S, params.gru)
    if params.mlp is not None:
        S_new = S_new + params.mlp(params.mlp_norm(S_new))
    return S_new, attn


def decompose(grid: Tensor, params: SlotParams) -> SlotOutput:
    """Run slot attention independently on every frame of ``grid`` [..., HW, D].

    Slots start as a copy of the learnable queries; tokens and attention come
    from the final iteration.
    """
    lead = grid.shape[:-2]
    k, v = project_inputs(grid, params)
    S = params.q.reshape((1,) * len(lead) + params.q.shape) + Tensor(np.zeros(lead + params.q.shape))
    history = []
    attn = None
    for _ in range(params.iterations):
        S, attn = slot_step(S, grid, params, kv=(k, v))
        history.append(attn.data)
    return SlotOutput(S, attn, history)
