"""Finite-difference verification suites: every tensor primitive plus one
full detector-forecaster-loss graph at toy size.

Check points are sampled away from non-differentiable kinks (relu/abs at
zero, bilinear lattice lines, argmax ties); at a kink the two one-sided
derivatives legitimately disagree and the comparison is meaningless.
"""

from __future__ import annotations

import numpy as np

from . import losses as losses_mod
from .config import config_from_dict
from .diffcore import (
    MLP,
    ParamStore,
    Tensor,
    bilinear_sample,
    concat,
    grad_check,
    layer_norm,
    linear,
    multi_head_attention,
    positional_encoding,
    positive_scale,
    softmax,
    stack,
)
from .harness import Model, compute_scene_loss, scene_targets
from .synthscene import generate_scene


def primitive_gradchecks(seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)

    def t(*shape, offset=0.0, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale + offset)

    a, b = t(3, 4), t(3, 4)
    w = t(4, 5)
    results = []

    def check(name, fn, inputs, **kw):
        results.append((name, grad_check(fn, inputs, rng=np.random.default_rng(seed), **kw)))

    check("add", lambda x, y: (x + y).sum(), [t(3, 4), t(3, 4)])
    check("sub_broadcast", lambda x, y: (x - y).sum(), [t(3, 4), t(4)])
    check("mul", lambda x, y: (x * y).sum(), [t(3, 4), t(3, 4)])
    check("div", lambda x, y: (x / y).sum(), [t(3, 4), t(3, 4, offset=3.0)])
    check("pow", lambda x: (x ** 3).sum(), [t(3, 4)])
    check("matmul", lambda x, y: (x @ y).sum(), [a, w])
    check("matmul_batched", lambda x, y: (x @ y).sum(), [t(2, 3, 4), t(2, 4, 5)])
    check("exp", lambda x: x.exp().sum(), [t(3, 4, scale=0.5)])
    check("log", lambda x: x.log().sum(), [t(3, 4, offset=3.0)])
    check("sqrt", lambda x: x.sqrt().sum(), [t(3, 4, offset=5.0, scale=0.5)])
    check("sin", lambda x: x.sin().sum(), [t(3, 4)])
    check("cos", lambda x: x.cos().sum(), [t(3, 4)])
    check("abs", lambda x: x.abs().sum(), [t(3, 4, offset=2.0)])
    check("relu", lambda x: x.relu().sum(), [t(3, 4, offset=2.0)])
    check("sigmoid", lambda x: x.sigmoid().sum(), [t(3, 4)])
    check("softplus", lambda x: x.softplus().sum(), [t(3, 4)])
    check("tanh", lambda x: x.tanh().sum(), [t(3, 4)])
    check("sum_axis", lambda x: (x.sum(axis=1) ** 2).sum(), [t(3, 4)])
    check("mean", lambda x: (x.mean(axis=0) ** 2).sum(), [t(3, 4)])
    check("reshape", lambda x: (x.reshape(4, 3) @ w[:3, :]).sum(), [t(3, 4)])
    check("transpose", lambda x: (x.transpose(1, 0) ** 2).sum(), [t(3, 4)])
    check("getitem", lambda x: (x[np.array([0, 2]), np.array([1, 3])] ** 2).sum(),
          [t(3, 4)])
    check("concat", lambda x, y: (concat([x, y], axis=1) ** 2).sum(),
          [t(3, 2), t(3, 3)])
    check("stack", lambda x, y: (stack([x, y], axis=0) ** 2).sum(),
          [t(3, 2), t(3, 2)])
    check("linear", lambda x, W, bb: linear(x, W, bb).sum(), [a, w, t(5)])
    check("layer_norm", lambda x, g, bb: (layer_norm(x, g, bb) ** 2).sum(),
          [t(3, 6), t(6, scale=0.1, offset=1.0), t(6, scale=0.1)])
    check("softmax", lambda x: (softmax(x, axis=-1) ** 2).sum(), [t(3, 5)])
    check("positive_scale", lambda x: positive_scale(x).sum(), [t(3, 4)])
    # weight the output: the squared norm of a sin/cos pair is constant
    pe_w = Tensor(rng.normal(size=(3, 5, 8)))
    check("positional_encoding",
          lambda x: (positional_encoding(x, 8) * pe_w).sum(), [t(3, 5, 2)])
    check("multi_head_attention",
          lambda q, k, v: (multi_head_attention(q, k, v, 2) ** 2).sum(),
          [t(2, 3, 8), t(2, 4, 8), t(2, 4, 8)])
    # generic interior coordinates, off lattice lines
    grid = t(6, 7, 3)
    coords = Tensor(rng.uniform(0.3, 4.6, size=(5, 2)) + 0.137)
    check("bilinear_grid", lambda g: (bilinear_sample(g, coords) ** 2).sum(), [grid])
    check("bilinear_coords",
          lambda c: (bilinear_sample(grid, c) ** 2).sum(), [coords])
    return results


TOY_CONFIG = {
    "scene": {"h_cells": 24, "w_cells": 24, "feature_dim": 16,
              "t_history": 4, "t_future": 4, "n_agents": 3,
              "spawn_margin": 3.0},
    "model": {"n_queries": 3, "embed_dim": 16, "n_hypotheses": 2,
              "n_modes": 2, "n_layers_detector": 2, "n_layers_forecaster": 2,
              "n_heads": 2, "n_offsets": 2},
}


def full_graph_gradcheck(seed: int = 0, max_per_input: int = 2) -> float:
    """Check the whole pipeline — detector layers, forecaster, matching and
    all loss terms — against finite differences at toy size.

    Parameters are randomly perturbed first so zero-initialized residual
    heads do not mask upstream gradient paths.
    """
    cfg = config_from_dict(dict(TOY_CONFIG, seed=seed))
    model = Model(cfg)
    rng = np.random.default_rng([seed, 77])
    for _, p in model.store.items():
        p.value = p.value + rng.normal(size=p.value.shape) * 0.05
    scene = generate_scene(cfg.scene, 424)
    targets = scene_targets(scene)

    params = [p for _, p in model.store.items()]

    # scoring targets are detached constants in the backward pass; freeze
    # them at the base point so the difference quotient checks the same
    # function the gradient describes
    cache: dict = {}

    def fn(*_):
        total, _, _, _ = compute_scene_loss(model, scene, targets,
                                            target_cache=cache)
        return total

    # eps small enough that piecewise-smooth joins (bilinear cell boundaries
    # amplified through attention) are resolved; min_grad floors out the
    # matching finite-difference cancellation noise (~2e-9 absolute here)
    return grad_check(fn, params, max_per_input=max_per_input, eps=3e-6,
                      rng=np.random.default_rng([seed, 5]), min_grad=3e-5)


def run_all_gradchecks(seed: int = 0) -> list[tuple[str, float]]:
    results = primitive_gradchecks(seed=seed)
    results.append(("full_graph", full_graph_gradcheck(seed=seed)))
    return results
