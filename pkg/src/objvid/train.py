"""Training loop, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stf
from .backbone import encode_stub, load_features
from .config import TrainConfig
from .dataset import Manifest, load_clip, load_manifest
from .errors import FormatError, NaNLossError
from .losses import BatchContext, total_loss
from .model import ObjectCentricHead
from .optim import AdamW, clip_grad_norm
from .segmentation import binarize, evaluate_clip, hungarian_match, random_baseline_jf, track_jaccard
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class ClipData:
    clip_id: str
    label: int
    cls: np.ndarray  # [T, D]
    grid: np.ndarray  # [T, HW, D]
    H: int
    W: int
    gt_masks: np.ndarray | None = None


@dataclass
class SplitData:
    clips: list[ClipData] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    def stack(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sel = [self.clips[i] for i in idx]
        return (np.stack([c.cls for c in sel]), np.stack([c.grid for c in sel]),
                np.array([c.label for c in sel], dtype=np.int64))


def featurize(manifest: Manifest, config: TrainConfig, split: str) -> SplitData:
    out = SplitData()
    for entry in manifest.split(split):
        clip = load_clip(manifest, entry)
        if entry.features:
            feats = load_features(manifest.resolve(entry.features))
        else:
            feats = encode_stub(clip, config.patch, config.dim, config.stub_seed, config.pos_scale)
        if feats.cls.shape[0] != config.frames:
            raise FormatError(f"{entry.id}: {feats.cls.shape[0]} frames, config expects {config.frames}")
        out.clips.append(ClipData(entry.id, entry.label, feats.cls.data, feats.grid.data,
                                  feats.H, feats.W, clip.gt_masks))
    return out


def label_aware_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator,
                        min_per_class: int = 2) -> list[np.ndarray]:
    """Partition a shuffled epoch so each batch holds ``min_per_class`` clips of every class when possible.

    The leftover clips fill the batches in random order; every clip appears exactly once.
    """
    n = len(labels)
    n_batches = max(1, n // batch_size)
    queues = {k: list(rng.permutation(np.flatnonzero(labels == k))) for k in np.unique(labels)}
    batches: list[list[int]] = [[] for _ in range(n_batches)]
    for b in range(n_batches):
        for k in queues:
            for _ in range(min_per_class):
                if queues[k] and len(batches[b]) < batch_size:
                    batches[b].append(int(queues[k].pop()))
    rest = [i for q in queues.values() for i in q]
    rest = list(rng.permutation(rest)) if rest else []
    b = 0
    for i in rest:
        while len(batches[b]) >= batch_size and b < n_batches - 1:
            b += 1
        batches[b].append(int(i))
    return [np.array(sorted(bt, key=lambda i: (labels[i], i))) for bt in batches if bt]


class Trainer:
    def __init__(self, config: TrainConfig, manifest: Manifest | None = None):
        self.config = config.validate()
        self.manifest = manifest if manifest is not None else load_manifest(config.manifest)
        self.train_data = featurize(self.manifest, config, "train")
        self.val_data = featurize(self.manifest, config, "val")
        self.num_classes = self.manifest.classes
        self.model = ObjectCentricHead(config, self.num_classes)
        self.params = self.model.parameters()
        self.opt = AdamW(self.params, lr=config.lr, weight_decay=config.weight_decay)
        self.step = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.train_data.clips) // self.config.batch_size)

    def epoch_batches(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.config.seed, epoch])
        return label_aware_batches(self.train_data.labels, self.config.batch_size, rng,
                                   self.config.min_per_class)

    def lr_at(self, step: int) -> float:
        if self.config.lr_schedule == "cosine":
            total = self.steps_per_epoch * self.config.epochs
            return 0.5 * self.config.lr * (1.0 + math.cos(math.pi * min(step, total) / total))
        return self.config.lr

    def batch_loss(self, cls: np.ndarray, grid: np.ndarray, labels: np.ndarray, step: int = 0):
        out = self.model(grid)
        ctx = BatchContext(out.tokens, Tensor(cls), out.s.s, out.logits, labels,
                           tau=self.config.tau, margin=self.config.margin, tau_outer=self.config.tau_outer,
                           normalize_temp=self.config.normalize_temp, max_negatives=self.config.max_negatives,
                           rng=np.random.default_rng([self.config.seed, step, 1]),
                           use_obj=self.config.use_obj, use_temp=self.config.use_temp)
        return total_loss(ctx)

    def train_step(self, idx: np.ndarray) -> dict:
        cls, grid, labels = self.train_data.stack(idx)
        self.opt.zero_grad()
        loss, parts = self.batch_loss(cls, grid, labels, self.step)
        if not all(math.isfinite(v) for v in parts.values()):
            ids = [self.train_data.clips[i].clip_id for i in idx]
            raise NaNLossError(f"non-finite loss at step {self.step}: {parts}", self.step, ids)
        loss.backward()
        parts["grad_norm"] = clip_grad_norm(self.params, self.config.grad_clip)
        self.opt.step(self.lr_at(self.step))
        self.step += 1
        parts["step"] = self.step
        return parts

    def fit(self, epochs: int | None = None, log_path: str | os.PathLike | None = None,
            evaluate_every: int | None = None, on_record=None) -> list[dict]:
        """Train until ``epochs`` epochs have completed in total (resumes mid-epoch).

        Every step record (and every periodic val record) is appended to
        ``log_path`` as a JSON line and handed to ``on_record`` if given.
        """
        epochs = self.config.epochs if epochs is None else epochs
        evaluate_every = self.config.eval_every if evaluate_every is None else evaluate_every
        fh = open(log_path, "a") if log_path else None
        try:
            while self.step < epochs * self.steps_per_epoch:
                epoch, within = divmod(self.step, self.steps_per_epoch)
                batch = self.epoch_batches(epoch)[within]
                rec = self.train_step(batch)
                rec["epoch"] = epoch
                self.history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if on_record:
                    on_record(rec)
                if within == self.steps_per_epoch - 1 and evaluate_every and (epoch + 1) % evaluate_every == 0:
                    metrics = self.evaluate("val", segmentation=False)
                    log.info("epoch %d: loss %.4f val acc %.3f", epoch + 1, rec["total"], metrics["accuracy"])
                    val_rec = {"epoch": epoch + 1, "val": metrics}
                    if fh:
                        fh.write(json.dumps(val_rec) + "\n")
                    if on_record:
                        on_record(val_rec)
        finally:
            if fh:
                fh.close()
        return self.history

    # ------------------------------------------------------------------

    def predict(self, data: SplitData, batch_size: int | None = None):
        batch_size = batch_size or self.config.batch_size
        outs = []
        with no_grad():
            for start in range(0, len(data.clips), batch_size):
                idx = np.arange(start, min(start + batch_size, len(data.clips)))
                _, grid, _ = data.stack(idx)
                out = self.model(grid)
                outs.append((out.logits.data, out.attn.data, out.s.s.data))
        logits = np.concatenate([o[0] for o in outs])
        attn = np.concatenate([o[1] for o in outs])
        s = np.concatenate([o[2] for o in outs])
        return logits, attn, s

    def evaluate(self, split: str = "val", segmentation: bool = True, baseline_draws: int = 10,
                 details: bool = False) -> dict:
        """Top-1 accuracy; with gt masks also zero-shot J&F, its random baseline and the fg/bg norm ratio.

        ``details`` adds the per-slot norm lists ``fg_norms``/``bg_norms`` and per-clip scores.
        """
        data = self.val_data if split == "val" else self.train_data
        logits, attn, s = self.predict(data)
        result = {"accuracy": float(np.mean(np.argmax(logits, axis=1) == data.labels))}
        if not segmentation or any(c.gt_masks is None for c in data.clips):
            return result
        jf, j, f, base, fg, bg, per_clip = [], [], [], [], [], [], []
        for i, clip in enumerate(data.clips):
            gt = clip.gt_masks
            masks = binarize(attn[i], clip.H, clip.W, gt.shape[1], gt.shape[2])
            score = evaluate_clip(masks, gt)
            if score.empty:
                continue
            per_clip.append({"clip_id": clip.clip_id, "J": score.J, "F": score.F, "JF": score.JF})
            jf.append(score.JF)
            j.append(score.J)
            f.append(score.F)
            base.append(random_baseline_jf(attn[i].shape, clip.H, clip.W, gt, n_draws=baseline_draws, seed=i))
            norms = np.linalg.norm(s[i], axis=-1).mean(axis=0)  # [N]
            fg_slots = foreground_slots(masks, gt)
            for n in range(masks.n_slots):
                (fg if n in fg_slots else bg).append(norms[n])
        result.update({"JF": float(np.mean(jf)), "J": float(np.mean(j)), "F": float(np.mean(f)),
                       "JF_random": float(np.mean(base)),
                       "fg_norm": float(np.mean(fg)) if fg else float("nan"),
                       "bg_norm": float(np.mean(bg)) if bg else float("nan")})
        result["fg_bg_norm_ratio"] = (result["fg_norm"] / result["bg_norm"]
                                      if fg and bg and result["bg_norm"] > 0 else float("nan"))
        if details:
            result.update({"fg_norms": [float(x) for x in fg], "bg_norms": [float(x) for x in bg],
                           "clips": per_clip})
        return result

    # ------------------------------------------------------------------

    def save_checkpoint(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        index = {"config": self.config.to_dict(), "config_hash": self.config.hash(),
                 "num_classes": self.num_classes, "step": self.step, "opt_t": self.opt.t, "tensors": {}}
        for k, p in self.params.items():
            files = {}
            for kind, arr in (("param", p.data), ("m", self.opt.m[k]), ("v", self.opt.v[k])):
                fname = f"{kind}__{k}.stf"
                stf.save(path / fname, arr)
                files[kind] = fname
            index["tensors"][k] = files
        with open(path / "index.json", "w") as fh:
            json.dump(index, fh, indent=1)
        return path

    @classmethod
    def from_checkpoint(cls, path: str | os.PathLike, manifest: Manifest | None = None,
                        **overrides) -> Trainer:
        path = Path(path)
        try:
            with open(path / "index.json") as fh:
                index = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read checkpoint index in {path}: {exc}") from exc
        cfg = dict(index["config"], **overrides)
        trainer = cls(TrainConfig.from_dict(cfg), manifest)
        if trainer.config.hash() != index["config_hash"]:
            raise FormatError("checkpoint config hash mismatch")
        for k, p in trainer.params.items():
            files = index["tensors"].get(k)
            if files is None:
                raise FormatError(f"checkpoint lacks tensor {k}")
            arr = stf.load(path / files["param"])
            if arr.shape != p.shape:
                raise FormatError(f"{k}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr
            trainer.opt.m[k] = stf.load(path / files["m"])
            trainer.opt.v[k] = stf.load(path / files["v"])
        trainer.step = index["step"]
        trainer.opt.t = index["opt_t"]
        return trainer


def foreground_slots(masks, gt) -> set[int]:
    """Slots matched to a gt track with non-zero overlap."""
    tj, ids = track_jaccard(masks, gt)
    if not ids:
        return set()
    return {n for n, j in hungarian_match(1.0 - tj) if tj[n, j] > 0}


def train(config: TrainConfig, manifest: Manifest | None = None, out_dir: str | os.PathLike | None = None,
          on_record=None) -> Trainer:
    """Train from scratch; with ``out_dir``, also write the step log and final checkpoint."""
    trainer = Trainer(config, manifest)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")
    trainer.fit(log_path=log_path, on_record=on_record)
    if out_dir is not None:
        trainer.save_checkpoint(out_dir / "checkpoint")
    return trainer
