"""Deterministic synthetic moving-shapes clips with action labels and object masks."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import stf
from .backbone import VideoClip
from .errors import ConfigError, FormatError

ACTIONS = ("translate-left", "translate-right", "translate-up", "grow", "shrink", "rotate-orbit")
SHAPES = ("square", "circle", "triangle")

SPEED = 2  # px / frame for translations
SIZE_STEP = 1  # px / frame for grow and shrink (half-size)
ORBIT_RADIUS = 6.0
ORBIT_STEP = np.pi / 8  # rad / frame
MIN_HALF, MAX_HALF = 3, 14


@dataclass
class ObjectSpec:
    shape: str
    size: int  # half-extent in pixels
    color: tuple[float, float, float]
    position: tuple[float, float]  # (row, col) centre at t = 0


@dataclass
class SceneSpec:
    seed: int
    action: int
    objects: list[ObjectSpec]
    frames: int = 8
    canvas: int = 64
    phase: float = 0.0  # orbit start angle

    def __post_init__(self):
        if not self.objects:
            raise ConfigError("a scene needs at least one object")
        if self.frames < 2:
            raise ConfigError("a scene needs at least two frames")
        if not 0 <= self.action < len(ACTIONS):
            raise ConfigError(f"unknown action id {self.action}")


def object_state(obj: ObjectSpec, action: int, t: int, canvas: int, phase: float = 0.0
                 ) -> tuple[float, float, int]:
    """Centre (row, col) and half-size of ``obj`` at frame ``t``, clamped to the canvas."""
    r, c = obj.position
    half = obj.size
    name = ACTIONS[action]
    if name == "translate-left":
        c -= SPEED * t
    elif name == "translate-right":
        c += SPEED * t
    elif name == "translate-up":
        r -= SPEED * t
    elif name == "grow":
        half += SIZE_STEP * t
    elif name == "shrink":
        half -= SIZE_STEP * t
    elif name == "rotate-orbit":
        ang = phase + ORBIT_STEP * t
        r += ORBIT_RADIUS * np.sin(ang)
        c += ORBIT_RADIUS * np.cos(ang)
    half = int(np.clip(half, MIN_HALF, MAX_HALF))
    r = float(np.clip(r, half, canvas - 1 - half))
    c = float(np.clip(c, half, canvas - 1 - half))
    return r, c, half


def rasterize(shape: str, r: float, c: float, half: int, canvas: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    dy, dx = yy - r, xx - c
    if shape == "square":
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "circle":
        return dy * dy + dx * dx <= half * half
    if shape == "triangle":
        # apex up; base on row r + half
        return (dy <= half) & (dy >= -half) & (np.abs(dx) <= (dy + half) / 2.0)
    raise ConfigError(f"unknown shape {shape!r}")


def generate(spec: SceneSpec, clip_id: str = "") -> VideoClip:
    """Render a clip; later objects occlude earlier ones."""
    t_n, size = spec.frames, spec.canvas
    frames = np.zeros((t_n, 3, size, size))
    masks = np.zeros((t_n, size, size), dtype=np.int64)
    for t in range(t_n):
        for k, obj in enumerate(spec.objects, start=1):
            r, c, half = object_state(obj, spec.action, t, size, spec.phase)
            m = rasterize(obj.shape, r, c, half, size)
            frames[t][:, m] = np.asarray(obj.color)[:, None]
            masks[t][m] = k
    return VideoClip(frames, spec.action, masks, clip_id)


def random_scene(rng: np.random.Generator, action: int, frames: int = 8, canvas: int = 64,
                 max_objects: int = 3, seed: int = 0) -> SceneSpec:
    """Random start state for ``action``; start positions leave room for the motion."""
    n_obj = int(rng.integers(1, max_objects + 1))
    travel = SPEED * (frames - 1)
    name = ACTIONS[action]
    objects = []
    for _ in range(n_obj):
        half = int(rng.integers(5, 9))
        if name == "shrink":
            half = int(rng.integers(9, 12))
        lo, hi = half + 1, canvas - 2 - half
        r_lo, r_hi, c_lo, c_hi = lo, hi, lo, hi
        if name == "translate-left":
            c_lo = min(lo + travel, hi)
        elif name == "translate-right":
            c_hi = max(hi - travel, lo)
        elif name == "translate-up":
            r_lo = min(lo + travel, hi)
        elif name == "grow":
            pad = min(SIZE_STEP * (frames - 1), MAX_HALF - half)
            r_lo, r_hi, c_lo, c_hi = lo + pad, hi - pad, lo + pad, hi - pad
        elif name == "rotate-orbit":
            pad = int(np.ceil(ORBIT_RADIUS))
            r_lo, r_hi, c_lo, c_hi = lo + pad, hi - pad, lo + pad, hi - pad
        if r_lo > r_hi or c_lo > c_hi:
            raise ConfigError(f"canvas {canvas} is too small for a half-size {half} {name} object")
        pos = (float(rng.integers(r_lo, r_hi + 1)), float(rng.integers(c_lo, c_hi + 1)))
        color = tuple(float(x) for x in rng.uniform(0.3, 1.0, 3))
        objects.append(ObjectSpec(str(rng.choice(SHAPES)), half, color, pos))
    phase = float(rng.uniform(0, 2 * np.pi))
    return SceneSpec(seed=seed, action=action, objects=objects, frames=frames, canvas=canvas, phase=phase)


def scene_from_seed(seed: int, action: int, frames: int = 8, canvas: int = 64) -> SceneSpec:
    return random_scene(np.random.default_rng(seed), action, frames, canvas, seed=seed)


# ----------------------------------------------------------------------
# splits and manifests


@dataclass
class ManifestEntry:
    id: str
    label: int
    split: str
    frames: str
    masks: str | None = None
    features: str | None = None
    scene_seed: int | None = None


@dataclass
class Manifest:
    root: str
    classes: int
    frames: int
    canvas: int
    seed: int
    clips: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [c for c in self.clips if c.split == name]

    def entry(self, clip_id: str) -> ManifestEntry:
        for c in self.clips:
            if c.id == clip_id:
                return c
        raise KeyError(f"no clip {clip_id!r} in manifest")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d


def make_split(n_clips: int, classes: int, seed: int, out_dir: str | os.PathLike | None = None,
               frames: int = 8, canvas: int = 64, val_fraction: float = 0.2) -> Manifest:
    """Balanced clips per class with a stratified train/val split.

    When ``out_dir`` is given, clip tensors and ``manifest.json`` are written there.
    """
    if classes < 1 or classes > len(ACTIONS):
        raise ConfigError(f"classes must be in 1..{len(ACTIONS)}")
    if n_clips < classes:
        raise ConfigError("need at least one clip per class")
    rng = np.random.default_rng(seed)
    per_class = [n_clips // classes + (1 if k < n_clips % classes else 0) for k in range(classes)]
    root = Path(out_dir) if out_dir is not None else Path(".")
    manifest = Manifest(str(root), classes, frames, canvas, seed)
    idx = 0
    for label, count in enumerate(per_class):
        n_val = int(round(count * val_fraction))
        order = rng.permutation(count)
        for j in range(count):
            clip_id = f"clip{idx:04d}"
            scene_seed = int(rng.integers(2**31))
            spec = scene_from_seed(scene_seed, label, frames, canvas)
            split = "val" if order[j] < n_val else "train"
            entry = ManifestEntry(clip_id, label, split, f"{clip_id}/frames.stf", f"{clip_id}/masks.stf",
                                  scene_seed=scene_seed)
            if out_dir is not None:
                clip = generate(spec, clip_id)
                (root / clip_id).mkdir(parents=True, exist_ok=True)
                stf.save(root / entry.frames, clip.frames)
                stf.save(root / entry.masks, clip.gt_masks)
                with open(root / clip_id / "spec.json", "w") as fh:
                    json.dump(asdict(spec), fh)
            manifest.clips.append(entry)
            idx += 1
    if out_dir is not None:
        write_manifest(manifest, root / "manifest.json")
    return manifest


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1)


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
        clips = [ManifestEntry(**c) for c in raw.pop("clips")]
        return Manifest(root=str(path.parent), clips=clips, **raw)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed manifest {path}: {exc}") from exc


def load_clip(manifest: Manifest, entry: ManifestEntry) -> VideoClip:
    """Read a clip's tensors; in-memory manifests regenerate the clip from its scene seed."""
    path = manifest.resolve(entry.frames)
    if not path.exists() and entry.scene_seed is not None:
        spec = scene_from_seed(entry.scene_seed, entry.label, manifest.frames, manifest.canvas)
        return generate(spec, entry.id)
    frames = stf.load(path)
    masks = stf.load(manifest.resolve(entry.masks)).astype(np.int64) if entry.masks else None
    return VideoClip(frames, entry.label, masks, entry.id)
