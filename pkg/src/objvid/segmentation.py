"""Zero-shot masks from slot attention, Hungarian track matching and J&F scoring."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import stf

BOUNDARY_TOL = 1


@dataclass
class MaskSet:
    assignments: np.ndarray  # [T, H, W] slot index per pixel
    n_slots: int

    def slot_mask(self, n: int) -> np.ndarray:
        return self.assignments == n


@dataclass
class SegScore:
    J: float
    F: float
    JF: float
    empty: bool = False
    matches: list | None = None

    def as_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------
# masks


def _interp_matrix(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-centred bilinear sampling: lower index, upper index, fraction."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def upsample_bilinear(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the last two axes of ``maps``; constant inputs stay exactly constant."""
    ylo, yhi, fy = _interp_matrix(maps.shape[-2], height)
    xlo, xhi, fx = _interp_matrix(maps.shape[-1], width)
    a = maps[..., ylo, :]
    rows = a + fy[:, None] * (maps[..., yhi, :] - a)
    b = rows[..., xlo]
    return b + fx * (rows[..., xhi] - b)


def binarize(attn, H: int, W: int, H_img: int, W_img: int) -> MaskSet:
    """Per-pixel argmax over upsampled slot attention maps [T, N, H*W].

    Ties go to the lowest slot index.
    """
    attn = np.asarray(getattr(attn, "data", attn), dtype=np.float64)
    t, n, hw = attn.shape
    if hw != H * W:
        raise ValueError(f"attention has {hw} positions, grid is {H}x{W}")
    maps = upsample_bilinear(attn.reshape(t, n, H, W), H_img, W_img)
    return MaskSet(np.argmax(maps, axis=1), n)


# ----------------------------------------------------------------------
# metrics


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Inner 1-pixel boundary: mask pixels with a 4-neighbour outside the mask.

    The image border is not treated as a boundary.
    """
    mask = np.asarray(mask, bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                    border_value=1)
    return mask & ~eroded


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: int = BOUNDARY_TOL) -> float:
    """Boundary F-measure with a Chebyshev tolerance of ``tol`` pixels."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if np.array_equal(pred, gt):
        return 1.0
    bp, bg = boundary(pred), boundary(gt)
    if not bp.any() or not bg.any():
        return 0.0
    if tol > 0:
        square = np.ones((2 * tol + 1, 2 * tol + 1), bool)
        near_gt = ndimage.binary_dilation(bg, structure=square)
        near_pred = ndimage.binary_dilation(bp, structure=square)
    else:
        near_gt, near_pred = bg, bp
    precision = (bp & near_gt).sum() / bp.sum()
    recall = (bg & near_pred).sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


# ----------------------------------------------------------------------
# assignment


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of min(A, B) row/column pairs.

    Shortest augmenting paths with row/column potentials, O(n^2 m).
    Returned pairs are sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    transposed = cost.shape[0] > cost.shape[1]
    c = cost.T if transposed else cost
    n, m = c.shape
    if n == 0:
        return []
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match_col = np.zeros(m + 1, dtype=int)  # row (1-based) matched to each column, 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    pairs = [(int(match_col[j]) - 1, j - 1) for j in range(1, m + 1) if match_col[j]]
    if transposed:
        pairs = [(col, row) for row, col in pairs]
    return sorted(pairs)


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[r, c] for r, c in sorted(pairs)))


# ----------------------------------------------------------------------
# clip evaluation


def gt_track_ids(gt: np.ndarray) -> list[int]:
    return [int(k) for k in np.unique(gt) if k != 0]


def track_jaccard(masks: MaskSet, gt: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """[N, K] matrix of frame-averaged Jaccard between slot tracks and gt tracks."""
    ids = gt_track_ids(gt)
    out = np.zeros((masks.n_slots, len(ids)))
    for n in range(masks.n_slots):
        pm = masks.assignments == n
        for j, k in enumerate(ids):
            gm = gt == k
            out[n, j] = np.mean([jaccard(pm[t], gm[t]) for t in range(gt.shape[0])])
    return out, ids


def evaluate_clip(masks: MaskSet, gt, tol: int = BOUNDARY_TOL) -> SegScore:
    """Video-level J&F after Hungarian matching of slot tracks to gt tracks.

    Scores are averaged over frames, then over gt tracks; a gt track left
    without a slot scores zero.
    """
    gt = np.asarray(gt).astype(np.int64)
    if masks.assignments.shape != gt.shape:
        raise ValueError(f"mask shape {masks.assignments.shape} vs gt {gt.shape}")
    tj, ids = track_jaccard(masks, gt)
    if not ids:
        warnings.warn("ground truth has no foreground tracks; score is empty", RuntimeWarning, stacklevel=2)
        return SegScore(0.0, 0.0, 0.0, empty=True, matches=[])
    pairs = hungarian_match(1.0 - tj)
    js, fs = np.zeros(len(ids)), np.zeros(len(ids))
    for n, j in pairs:
        pm = masks.assignments == n
        gm = gt == ids[j]
        js[j] = tj[n, j]
        fs[j] = np.mean([boundary_f(pm[t], gm[t], tol) for t in range(gt.shape[0])])
    J, F = float(js.mean()), float(fs.mean())
    return SegScore(J, F, (J + F) / 2, matches=[(int(n), ids[j]) for n, j in pairs])


def random_baseline_jf(attn_shape: tuple, H: int, W: int, gt, n_draws: int = 20,
                       seed: int = 0) -> float:
    """Monte-Carlo J&F of random attention maps at the model's grid resolution.

    Draws i.i.d. normal logits of ``attn_shape`` [T, N, HW], softmaxes over
    slots, and pushes them through the same binarize/evaluate path.
    """
    rng = np.random.default_rng(seed)
    gt = np.asarray(gt)
    scores = []
    for _ in range(n_draws):
        logits = rng.normal(size=attn_shape)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        masks = binarize(attn, H, W, gt.shape[1], gt.shape[2])
        scores.append(evaluate_clip(masks, gt).JF)
    return float(np.mean(scores))


# ----------------------------------------------------------------------
# export


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_masks(masks: MaskSet, out_dir: str | os.PathLike, clip_id: str,
                 score: SegScore | None = None) -> Path:
    """Write ``<clip_id>.stf`` plus one grey-level PGM per frame (and a JSON score)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stf.save(out / f"{clip_id}.stf", masks.assignments.astype(np.float64))
    scale = 255 // max(masks.n_slots - 1, 1)
    for t, frame in enumerate(masks.assignments):
        write_pgm(out / f"{clip_id}_{t:03d}.pgm", (frame * scale).astype(np.uint8))
    if score is not None:
        with open(out / f"{clip_id}_score.json", "w") as fh:
            json.dump({"clip_id": clip_id, "J": score.J, "F": score.F, "JF": score.JF}, fh)
    return out
