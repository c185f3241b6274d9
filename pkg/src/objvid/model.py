"""The trainable adaptation head: fusion -> slots -> object-time -> pooled logits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import init_fusion_kernel, temporal_fusion
from .config import TrainConfig
from .object_time import InteractionParams, StateChangeMatrix, classify, object_interact, pool_video, state_changes
from .slots import SlotParams, decompose
from .tensor import Tensor


@dataclass
class ForwardOutput:
    tokens: Tensor  # [B, T, N, D]
    attn: Tensor  # [B, T, N, HW]
    o_tilde: Tensor  # [B, T, N, D]
    s: StateChangeMatrix  # [B, T', N, D]
    v: Tensor  # [B, D]
    logits: Tensor  # [B, K]


class ObjectCentricHead:
    def __init__(self, config: TrainConfig, num_classes: int, seed: int | None = None):
        rng = np.random.default_rng(config.seed if seed is None else seed)
        d = config.dim
        self.config = config
        self.num_classes = num_classes
        self.fusion_kernel = init_fusion_kernel(d)
        self.slots = SlotParams.init(config.num_slots, d, rng, config.iterations,
                                     use_norm=config.slot_norm, use_mlp=config.slot_mlp)
        self.interaction = InteractionParams.init(d, num_classes, rng, heads=config.heads, depth=config.depth)

    def parameters(self) -> dict[str, Tensor]:
        out = {"fusion.kernel": self.fusion_kernel}
        out.update({f"slots.{k}": v for k, v in self.slots.named().items()})
        out.update({f"inter.{k}": v for k, v in self.interaction.named().items()})
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, grid) -> ForwardOutput:
        """``grid`` holds frozen patch features [B, T, HW, D]."""
        grid = grid if isinstance(grid, Tensor) else Tensor(grid)
        fused = temporal_fusion(grid, self.fusion_kernel)
        out = decompose(fused, self.slots)
        o_tilde = object_interact(out.tokens, self.interaction)
        s = state_changes(o_tilde, self.config.delta, self.interaction)
        v = pool_video(s)
        return ForwardOutput(out.tokens, out.attn, o_tilde, s, v, classify(v, self.interaction))

    __call__ = forward
