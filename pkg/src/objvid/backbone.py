"""Frozen per-frame encoder stand-in and the trainable temporal fusion block."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stf
from .errors import ConfigError, FormatError
from .tensor import Tensor, concat, parameter

POS_SCALE = 0.5


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, C, H, W] in [0, 1]
    label: int
    gt_masks: np.ndarray | None = None  # [T, H, W] integer ids, 0 = background
    clip_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ConfigError(f"frames must be [T, C, H, W], got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise ConfigError("a clip needs at least two frames")
        if self.gt_masks is not None:
            want = (self.frames.shape[0],) + self.frames.shape[2:]
            if self.gt_masks.shape != want:
                raise ConfigError(f"gt_masks {self.gt_masks.shape} do not match frames {want}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FrameFeatures:
    cls: Tensor  # [T, D]
    grid: Tensor  # [T, H*W, D]
    H: int
    W: int

    def __post_init__(self):
        t, d = self.cls.shape
        if self.grid.shape != (t, self.H * self.W, d):
            raise FormatError(
                f"cls {self.cls.shape} inconsistent with grid {self.grid.shape} on a {self.H}x{self.W} grid")
        if not (np.all(np.isfinite(self.cls.data)) and np.all(np.isfinite(self.grid.data))):
            raise FormatError("non-finite feature values")


def sincos_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal position code of shape [h*w, dim]; half the channels per axis."""
    if dim % 4:
        raise ConfigError(f"positional encoding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def stub_projections(in_dim: int, dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    a = 1.0 / np.sqrt(in_dim)
    w_patch = rng.uniform(-a, a, (in_dim, dim))
    b = 1.0 / np.sqrt(dim)
    w_cls = rng.uniform(-b, b, (dim, dim))
    return w_patch, w_cls


def encode_stub(clip: VideoClip, patch: int, dim: int, seed: int,
                pos_scale: float = POS_SCALE) -> FrameFeatures:
    """Deterministic patch-embedding encoder standing in for a frozen image model.

    Each non-overlapping ``patch`` x ``patch`` block is flattened and projected
    to ``dim`` channels by a seed-derived matrix, then a fixed sinusoidal
    position code is added.  The cls vector is the mean patch projection
    passed through a second fixed matrix.
    """
    frames = np.asarray(clip.frames, dtype=np.float64)
    t, c, h, w = frames.shape
    if patch <= 0 or h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible into {patch}px patches")
    gh, gw = h // patch, w // patch
    patches = (frames.reshape(t, c, gh, patch, gw, patch)
               .transpose(0, 2, 4, 1, 3, 5)
               .reshape(t, gh * gw, c * patch * patch))
    w_patch, w_cls = stub_projections(c * patch * patch, dim, seed)
    content = patches @ w_patch
    grid = content + pos_scale * sincos_2d(gh, gw, dim)[None]
    cls = content.mean(axis=1) @ w_cls
    return FrameFeatures(Tensor(cls), Tensor(grid), gh, gw)


def save_features(feats: FrameFeatures, path: str | os.PathLike) -> None:
    """Write ``cls.stf`` ([T, D]) and ``grid.stf`` ([T, H, W, D]) into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t, _, d = feats.grid.shape
    stf.save(path / "cls.stf", feats.cls.data)
    stf.save(path / "grid.stf", feats.grid.data.reshape(t, feats.H, feats.W, d))


def load_features(path: str | os.PathLike) -> FrameFeatures:
    """Read a feature directory written by :func:`save_features` or an external exporter.

    ``grid.stf`` may be [T, H, W, D] or [T, HW, D] with square HW.
    """
    path = Path(path)
    try:
        cls = stf.load(path / "cls.stf")
        grid = stf.load(path / "grid.stf")
    except FileNotFoundError as exc:
        raise FormatError(f"missing feature file: {exc.filename}") from exc
    if cls.ndim != 2:
        raise FormatError(f"cls must be [T, D], got {cls.shape}")
    if grid.ndim == 4:
        t, h, w, d = grid.shape
        grid = grid.reshape(t, h * w, d)
    elif grid.ndim == 3:
        hw = grid.shape[1]
        h = w = int(round(np.sqrt(hw)))
        if h * w != hw:
            raise FormatError(f"cannot infer a square grid from {hw} positions")
    else:
        raise FormatError(f"grid must be rank 3 or 4, got {grid.shape}")
    if grid.shape[0] != cls.shape[0] or grid.shape[2] != cls.shape[1]:
        raise FormatError(f"cls {cls.shape} and grid {grid.shape} disagree on T or D")
    return FrameFeatures(Tensor(cls), Tensor(grid), h, w)


def init_fusion_kernel(dim: int) -> Tensor:
    return parameter(np.zeros((3, dim)), name="fusion.kernel")


def temporal_fusion(grid: Tensor, kernel: Tensor) -> Tensor:
    """Residual depthwise temporal convolution (kernel 3, zero padding).

    ``grid`` is [..., T, HW, D]; ``kernel[0]`` weights the previous frame,
    ``kernel[1]`` the current one, ``kernel[2]`` the next.
    """
    if grid.ndim < 3 or kernel.shape != (3, grid.shape[-1]):
        raise ConfigError(f"temporal_fusion: grid {grid.shape} vs kernel {kernel.shape}")
    t_axis = grid.ndim - 3
    zero = Tensor(np.zeros(grid.shape[:t_axis] + (1,) + grid.shape[t_axis + 1:]))
    t = grid.shape[t_axis]
    lead = (slice(None),) * t_axis
    prev = concat([zero, grid[lead + (slice(0, t - 1),)]], axis=t_axis)
    nxt = concat([grid[lead + (slice(1, t),)], zero], axis=t_axis)
    return grid + prev * kernel[0] + grid * kernel[1] + nxt * kernel[2]
