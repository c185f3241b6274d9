"""Training configuration."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError
from .object_time import TEMPORAL_ATTENTION, default_delta, resolve_delta


@dataclass
class TrainConfig:
    manifest: str = "data/manifest.json"
    out_dir: str = "runs/default"
    frames: int = 8
    num_slots: int = 4
    dim: int = 64
    delta: int | str | None = None  # None -> T // 4
    patch: int = 8
    iterations: int = 3
    tau: float = 0.07
    tau_outer: float | None = None
    margin: float = 1.0
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    stub_seed: int = 1234
    pos_scale: float = 0.5
    heads: int = 4
    depth: int = 1
    slot_norm: bool = True
    slot_mlp: bool = True
    use_obj: bool = True
    use_temp: bool = True
    normalize_temp: bool = True
    max_negatives: int | None = None
    min_per_class: int = 2
    grad_clip: float | None = 1.0
    lr_schedule: str = "constant"
    temporal_module: str = "state_change"
    eval_every: int = 10

    def __post_init__(self):
        if self.delta is None:
            self.delta = default_delta(self.frames)

    def validate(self) -> TrainConfig:
        if self.temporal_module == TEMPORAL_ATTENTION:
            raise ConfigError("temporal attention (TimeSformer-style) is not implemented; "
                              "use temporal_module='state_change'")
        if self.temporal_module != "state_change":
            raise ConfigError(f"unknown temporal_module {self.temporal_module!r}")
        if self.frames < 2:
            raise ConfigError("frames must be >= 2")
        self.delta = resolve_delta(self.delta, self.frames)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2: the contrastive losses need negatives")
        if self.num_slots < 1 or self.iterations < 1:
            raise ConfigError("num_slots and iterations must be >= 1")
        if self.dim % self.heads or self.dim % 4:
            raise ConfigError("dim must be divisible by 4 and by the number of heads")
        if self.tau <= 0 or self.margin < 0 or self.lr < 0:
            raise ConfigError("tau must be > 0, margin and lr >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def hash(self) -> str:
        """Digest of the fields that shape the model and its optimisation (paths excluded)."""
        d = self.to_dict()
        for k in ("manifest", "out_dir", "epochs", "eval_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
