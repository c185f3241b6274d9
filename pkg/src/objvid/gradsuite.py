"""Finite-difference gradient checks for every trainable module on small random instances."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .backbone import temporal_fusion
from .losses import BatchContext, classification_loss, object_distillation_loss, temporal_reasoning_loss, total_loss
from .object_time import InteractionParams, classify, object_interact, pool_video, state_changes
from .slots import SlotParams, decompose
from .tensor import GRUParams, GradCheckReport, Tensor, grad_check, gru_cell, parameter

GRAD_TOL = 1e-4
T, N, D, HW, B, K = 2, 2, 8, 4, 2, 3


def _probe(shape, rng) -> Tensor:
    """Random weights that turn a tensor output into a scalar."""
    return Tensor(rng.normal(size=shape))


def _named(params: dict[str, Tensor]) -> tuple[list[Tensor], list[str]]:
    names = list(params)
    return [params[k] for k in names], names


def check_fusion(rng: np.random.Generator) -> GradCheckReport:
    grid = parameter(rng.normal(size=(B, T + 1, HW, D)), name="grid")
    kernel = parameter(rng.normal(scale=0.5, size=(3, D)), name="kernel")
    w = _probe(grid.shape, rng)
    return grad_check(lambda g, k: (temporal_fusion(g, k) * w).sum(), [grid, kernel], tol=GRAD_TOL)


def check_gru(rng: np.random.Generator) -> GradCheckReport:
    p = GRUParams.init(D, rng, scale=0.5)
    for b in (p.b_z, p.b_r, p.b_n):
        b.data[:] = rng.normal(scale=0.1, size=D)
    x = parameter(rng.normal(size=(N, D)), name="x")
    h = parameter(rng.normal(size=(N, D)), name="h")
    w = _probe((N, D), rng)
    tensors, names = _named(p.named())

    def f(x_, h_, *_):
        return (gru_cell(x_, h_, p) * w).sum()

    return grad_check(f, [x, h, *tensors], tol=GRAD_TOL, names=["x", "h", *names])


def check_slots(rng: np.random.Generator) -> GradCheckReport:
    p = SlotParams.init(N, D, rng, iterations=3)
    grid = parameter(rng.normal(size=(T, HW, D)), name="grid")
    w = _probe((T, N, D), rng)
    tensors, names = _named(p.named())

    def f(g, *_):
        return (decompose(g, p).tokens * w).sum()

    return grad_check(f, [grid, *tensors], tol=GRAD_TOL, names=["grid", *names])


def _interaction(rng) -> InteractionParams:
    p = InteractionParams.init(D, K, rng, heads=4)
    for t in p.named().values():  # move biases and gains off their trivial init
        t.data += rng.normal(scale=0.1, size=t.shape)
    return p


def check_object_interaction(rng: np.random.Generator) -> GradCheckReport:
    p = _interaction(rng)
    o = parameter(rng.normal(size=(T, N, D)), name="tokens")
    w = _probe((T, N, D), rng)
    params = {k: v for k, v in p.named().items() if k.startswith("oi")}
    tensors, names = _named(params)

    def f(x, *_):
        return (object_interact(x, p) * w).sum()

    return grad_check(f, [o, *tensors], tol=GRAD_TOL, names=["tokens", *names])


def check_state_change(rng: np.random.Generator) -> GradCheckReport:
    p = _interaction(rng)
    o = parameter(rng.normal(size=(T + 2, N, D)), name="o_tilde")
    w = _probe((2, N, D), rng)
    params = {k: v for k, v in p.named().items() if k.startswith("ti")}
    tensors, names = _named(params)

    def f(x, *_):
        return (state_changes(x, 2, p).s * w).sum()

    return grad_check(f, [o, *tensors], tol=GRAD_TOL, names=["o_tilde", *names])


def check_head(rng: np.random.Generator) -> GradCheckReport:
    p = _interaction(rng)
    s = parameter(rng.normal(size=(B, T, N, D)), name="s")
    w = _probe((B, K), rng)

    def f(x, hw, hb):
        return (classify(pool_video(x), p) * w).sum()

    return grad_check(f, [s, p.head_w, p.head_b], tol=GRAD_TOL, names=["s", "head.w", "head.b"])


def _loss_inputs(rng):
    tokens = parameter(rng.normal(size=(B, T, N, D)), name="tokens")
    cls = Tensor(rng.normal(size=(B, T, D)))
    s = parameter(rng.normal(scale=0.3, size=(B, T, N, D)), name="s")
    logits = parameter(rng.normal(size=(B, K)), name="logits")
    return tokens, cls, s, logits


def _loss_check(loss_fn: Callable, rng, batch_labels) -> GradCheckReport:
    tokens, cls, s, logits = _loss_inputs(rng)

    def f(o, s_, lg):
        return loss_fn(BatchContext(o, cls, s_, lg, batch_labels))

    return grad_check(f, [tokens, s, logits], tol=GRAD_TOL, names=["tokens", "s", "logits"])


def check_obj_loss(rng):
    return _loss_check(object_distillation_loss, rng, np.array([0, 1]))


def check_temp_loss(rng):
    # a four-clip batch so both the positive and the negative pools are populated
    s = parameter(rng.normal(scale=0.3, size=(4, T, N, D)), name="s")
    labels = np.array([0, 0, 1, 1])
    dummy = Tensor(np.ones((4, T, N, D)))

    def f(s_):
        return temporal_reasoning_loss(BatchContext(dummy, Tensor(np.ones((4, T, D))), s_,
                                                    Tensor(np.zeros((4, K))), labels))

    return grad_check(f, [s], tol=GRAD_TOL, names=["s"])


def check_cls_loss(rng):
    return _loss_check(classification_loss, rng, np.array([0, 2]))


def check_total_loss(rng):
    return _loss_check(lambda ctx: total_loss(ctx)[0], rng, np.array([1, 1]))


SUITE: dict[str, Callable[[np.random.Generator], GradCheckReport]] = {
    "fusion": check_fusion,
    "gru": check_gru,
    "slots": check_slots,
    "object_interaction": check_object_interaction,
    "state_change": check_state_change,
    "head": check_head,
    "loss_obj": check_obj_loss,
    "loss_temp": check_temp_loss,
    "loss_cls": check_cls_loss,
    "loss_total": check_total_loss,
}


def run_suite(modules=None, seed: int = 0) -> dict[str, GradCheckReport]:
    """Run the named checks (all by default); unknown names raise KeyError."""
    modules = list(SUITE) if modules is None else list(modules)
    unknown = [m for m in modules if m not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradcheck module(s) {unknown}; choose from {sorted(SUITE)}")
    return {m: SUITE[m](np.random.default_rng([seed, i])) for i, m in enumerate(modules)}
