"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

The training criteria share cached runs on the 60-clip corpus (6 classes,
48 train / 12 val, seed 7) at D=64, N=4, T=8, batch 16, 50 epochs.
"""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import report
from objvid.config import TrainConfig
from objvid.dataset import make_split
from objvid.errors import ConfigError
from objvid.gradsuite import GRAD_TOL, run_suite
from objvid.losses import (
    BatchContext, classification_loss, correspondence, object_distillation_loss, temporal_reasoning_loss,
    total_loss,
)
from objvid.segmentation import MaskSet, assignment_cost, evaluate_clip, hungarian_match
from objvid.slots import SlotParams, decompose
from objvid.tensor import Tensor
from objvid.train import Trainer


def run_config(**kw) -> TrainConfig:
    base = dict(dim=64, num_slots=4, frames=8, delta=2, batch_size=16, epochs=50, seed=0, eval_every=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def manifest():
    return make_split(60, 6, seed=7)


_RUNS: dict = {}


def trained(manifest, name, **kw):
    """Train once per distinct configuration and cache the evaluated result."""
    if name not in _RUNS:
        start = time.perf_counter()
        t = Trainer(run_config(**kw), manifest)
        t.fit()
        _RUNS[name] = {"trainer": t, "val": t.evaluate("val"),
                       "train_acc": t.evaluate("train", segmentation=False)["accuracy"],
                       "seconds": time.perf_counter() - start}
    return _RUNS[name]


# ----------------------------------------------------------------------


def test_1_gradient_suite():
    start = time.perf_counter()
    reports = run_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(r.worst for r in reports.values())
    failing = [k for k, r in reports.items() if not r.worst < GRAD_TOL]
    ok = not failing and GRAD_TOL == 1e-4 and elapsed < 60
    report("1 gradient suite", ok, f"{len(reports)} modules, worst rel err {worst:.2e} (< 1e-4), "
           f"failing {failing}, {elapsed:.1f} s (< 60 s)")
    assert ok


def test_2_slot_attention_invariants():
    rng = np.random.default_rng(2)
    p = SlotParams.init(4, 16, rng, iterations=3)
    grid = Tensor(rng.normal(size=(3, 12, 16)))
    base = decompose(grid, p)
    col_err = max(np.abs(a.sum(axis=-2) - 1.0).max() for a in base.attn_history)
    q0 = p.q.data.copy()
    exact = 0
    for _ in range(20):
        perm = rng.permutation(4)
        p.q.data = q0[perm]
        moved = decompose(grid, p)
        exact += bool(np.array_equal(moved.tokens.data, base.tokens.data[:, perm])
                      and all(np.array_equal(m, b[:, perm]) for m, b in zip(moved.attn_history, base.attn_history)))
    ok = col_err <= 1e-9 and exact == 20
    report("2 slot-attention invariants", ok,
           f"max column-sum error {col_err:.1e} (<= 1e-9) over {len(base.attn_history)} iterations, "
           f"{exact}/20 permutations bit-exact")
    assert ok


def test_3_loss_analytics():
    rng = np.random.default_rng(3)
    t_n = 6

    def ctx(tokens, cls, s, labels, **kw):
        b = tokens.shape[0]
        return BatchContext(Tensor(tokens), Tensor(cls), Tensor(s), Tensor(rng.normal(size=(b, 4))),
                            np.asarray(labels), **kw)

    # equal logits, one negative: each frame contributes ln 2
    shared = rng.normal(size=(t_n, 8))
    c = ctx(rng.normal(size=(2, t_n, 3, 8)), np.stack([shared, shared]), np.zeros((2, 1, 3, 8)), [0, 1])
    obj_err = abs(object_distillation_loss(c).item() - t_n * math.log(2))

    o, p = rng.normal(size=(5, 8)), rng.normal(size=8)
    base = correspondence(Tensor(o), Tensor(p), 0.07).item()
    scale_err = max(abs(correspondence(Tensor(o * rng.uniform(0.01, 100, size=(5, 1))), Tensor(p * a), 0.07).item()
                        - base) for a in (1e-3, 1.0, 400.0))

    s = np.broadcast_to(rng.normal(size=(1, 2, 3, 8)), (4, 2, 3, 8)).copy()
    temp = temporal_reasoning_loss(ctx(np.ones((4, 1, 3, 8)), np.ones((4, 1, 8)), s, [0, 0, 1, 1],
                                       margin=0.0)).item()

    c = ctx(rng.normal(size=(4, 3, 3, 8)), rng.normal(size=(4, 3, 8)), rng.normal(size=(4, 2, 3, 8)), [0, 0, 1, 2])
    total, parts = total_loss(c)
    exact_sum = (total.item() == parts["L_obj"] + parts["L_temp"] + parts["L_cls"]
                 and parts["L_obj"] == object_distillation_loss(c).item()
                 and parts["L_temp"] == temporal_reasoning_loss(c).item()
                 and parts["L_cls"] == classification_loss(c).item())

    ok = obj_err <= 1e-12 and scale_err <= 1e-12 and temp == 0.0 and exact_sum
    report("3 loss analytics", ok, f"|L_obj - T ln2| {obj_err:.1e}, scale-invariance err {scale_err:.1e} "
           f"(<= 1e-12), L_temp(margin 0, identical) = {temp}, total exact sum {exact_sum}")
    assert ok


def test_4_hungarian_oracle():
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(500):
        a, b = (int(x) for x in rng.integers(1, 7, size=2))
        cost = rng.integers(0, 50, size=(a, b)).astype(float)
        if a <= b:
            brute = min(sum(cost[i, q[i]] for i in range(a)) for q in itertools.permutations(range(b), a))
        else:
            brute = min(sum(cost[q[j], j] for j in range(b)) for q in itertools.permutations(range(a), b))
        mismatches += assignment_cost(cost, hungarian_match(cost)) != brute
    elapsed = time.perf_counter() - start
    ok = mismatches == 0
    report("4 Hungarian oracle", ok, f"{500 - mismatches}/500 matrices (up to 6x6) equal brute force exactly, "
           f"{elapsed:.1f} s")
    assert ok


def test_5_segmentation_sanity():
    rng = np.random.default_rng(5)
    gt = np.zeros((4, 24, 24), dtype=int)
    gt[:, 2:10, 3:12] = 1
    gt[:, 14:22, 10:20] = 2
    relabel = np.array([2, 0, 3, 1])
    perfect = evaluate_clip(MaskSet(relabel[gt], 4), gt)
    ones = (perfect.J, perfect.F, perfect.JF) == (1.0, 1.0, 1.0)
    invariant = 0
    for _ in range(20):
        g = np.zeros((3, 16, 16), dtype=int)
        for k in range(1, int(rng.integers(1, 4)) + 1):
            y, x = rng.integers(0, 11, size=2)
            g[:, y:y + 5, x:x + 5] = k
        assign = rng.integers(0, 4, size=g.shape)
        assign[g == 1] = int(rng.integers(0, 4))
        base = evaluate_clip(MaskSet(assign, 4), g)
        moved = evaluate_clip(MaskSet(rng.permutation(4)[assign], 4), g)
        invariant += (moved.J, moved.F, moved.JF) == (base.J, base.F, base.JF)
    ok = ones and invariant == 20
    report("5 segmentation sanity", ok, f"relabelled gt J/F/JF = {perfect.J}/{perfect.F}/{perfect.JF}, "
           f"{invariant}/20 mask sets invariant under slot permutation")
    assert ok


# ----------------------------------------------------------------------
# training outcomes


@pytest.mark.slow
def test_6_end_to_end_training(manifest):
    full = trained(manifest, "full")
    ablation = trained(manifest, "ablation", use_obj=False, use_temp=False)
    v = full["val"]
    a_ok = full["train_acc"] >= 0.90 and v["accuracy"] >= 0.70
    b_ok = v["accuracy"] - ablation["val"]["accuracy"] >= 0.05
    c_ok = v["JF"] >= 2.0 * v["JF_random"]
    report("6a train/val accuracy", a_ok, f"train {full['train_acc']:.3f} (>= 0.90), val {v['accuracy']:.3f} "
           f"(>= 0.70), {full['seconds']:.0f} s")
    report("6b full beats both-losses-disabled ablation", b_ok,
           f"val {v['accuracy']:.3f} vs {ablation['val']['accuracy']:.3f} "
           f"(margin {100 * (v['accuracy'] - ablation['val']['accuracy']):+.1f} points, needs >= +5), "
           f"ablation train {ablation['train_acc']:.3f}")
    report("6c zero-shot J&F vs random", c_ok, f"JF {v['JF']:.3f} vs random {v['JF_random']:.3f} "
           f"(ratio {v['JF'] / v['JF_random']:.2f}, needs >= 2)")
    assert a_ok and b_ok and c_ok


@pytest.mark.slow
def test_7_state_change_norm_separation(manifest):
    ratio = trained(manifest, "full")["val"]["fg_bg_norm_ratio"]
    ok = ratio > 1.0
    report("7 fg/bg state-change norm ratio", ok, f"{ratio:.3f} (> 1)")
    assert ok


@pytest.mark.slow
def test_8_delta_robustness(manifest):
    accs = {d: trained(manifest, "full" if d == 2 else f"delta{d}", delta=d)["val"]["accuracy"] for d in (1, 2, 4)}
    spread = max(accs.values()) - min(accs.values())
    try:
        run_config(delta=8).validate()
        rejects = False
    except ConfigError:
        rejects = True
    ok = spread < 0.10 and rejects
    report("8 delta robustness", ok, f"val acc {', '.join(f'd={d}: {a:.3f}' for d, a in accs.items())}, "
           f"spread {100 * spread:.1f} points (< 10), delta=T rejected {rejects}")
    assert ok


def test_9_determinism_and_checkpoint(manifest, tmp_path):
    cfg = dict(epochs=2)
    a, b = Trainer(run_config(**cfg), manifest), Trainer(run_config(**cfg), manifest)
    same_log = a.fit() == b.fit()

    c = Trainer(run_config(**cfg), manifest)
    c.fit(epochs=1)
    c.save_checkpoint(tmp_path / "ck")
    d = Trainer.from_checkpoint(tmp_path / "ck", manifest)
    round_trip = all(np.array_equal(c.params[k].data, d.params[k].data) and np.array_equal(c.opt.m[k], d.opt.m[k])
                     and np.array_equal(c.opt.v[k], d.opt.v[k]) for k in c.params)
    d.fit()
    resumed = all(np.array_equal(a.params[k].data, d.params[k].data) for k in a.params)
    ok = same_log and round_trip and resumed
    report("9 determinism and checkpointing", ok, f"identical loss logs {same_log} ({len(a.history)} steps), "
           f"bit-exact round trip {round_trip}, resumed run equals uninterrupted {resumed}")
    assert ok
