"""Past-conditioned forecasting decoder.

Refines a future query volume (objects x modes x future steps) through
blocks of past cross-attention followed by factorized temporal, mode, and
social self-attention, emitting Laplacian trajectory parameters and mode
scores at the end of every block. The decoder sees only per-object state
(object queries, motion queries, refined past trajectories) and never a
scene-level representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .diffcore import (
    MLP,
    AttentionBlock,
    LayerNorm,
    ParamStore,
    Tensor,
    concat,
    positional_encoding,
    positive_scale,
)


@dataclass
class Forecast:
    means: Tensor        # (N, M_f, T_f, 2) absolute, current-ego frame
    scales: Tensor       # (N, M_f, T_f, 2) strictly positive
    mode_scores: Tensor  # (N, M_f)


VALID_AXES = ("time", "mode", "social")


def factorized_attention(Q_fut: Tensor, axis: str, block: AttentionBlock) -> Tensor:
    """Self-attention along one axis of the (N, M_f, T_f, D) volume, with the
    remaining axes folded into the batch dimension."""
    N, M_f, T_f, D = Q_fut.shape
    if axis == "time":
        x = Q_fut.reshape(N * M_f, T_f, D)
        return block(x).reshape(N, M_f, T_f, D)
    if axis == "mode":
        x = Q_fut.transpose(0, 2, 1, 3).reshape(N * T_f, M_f, D)
        return block(x).reshape(N, T_f, M_f, D).transpose(0, 2, 1, 3)
    if axis == "social":
        x = Q_fut.transpose(1, 2, 0, 3).reshape(M_f * T_f, N, D)
        return block(x).reshape(M_f, T_f, N, D).transpose(2, 0, 1, 3)
    raise ValueError(f"unknown factorized axis {axis!r}, expected one of {VALID_AXES}")


class ForecastDecoder:
    def __init__(self, store: ParamStore, cfg: ModelConfig, t_future: int):
        D = cfg.embed_dim
        self.cfg = cfg
        self.t_future = t_future
        if cfg.query_init_weights:
            self.e_mode = store.add("pfd.e_mode", (cfg.n_modes, D), init="embed")
            self.e_fut = store.add("pfd.e_fut", (t_future, D), init="embed")
        if cfg.query_init_object:
            self.obj_proj = MLP(store, "pfd.obj_proj", [D, D, D])
        self.init_norm = LayerNorm(store, "pfd.init_norm", D)
        self.blocks = []
        for i in range(cfg.n_layers_forecaster):
            block = {
                "time": AttentionBlock(store, f"pfd.{i}.time", D, cfg.n_heads),
                "mode": AttentionBlock(store, f"pfd.{i}.mode", D, cfg.n_heads),
                "social": AttentionBlock(store, f"pfd.{i}.social", D, cfg.n_heads),
                "reg": MLP(store, f"pfd.{i}.reg", [D, D, 4], zero_init_last=True),
                "score": MLP(store, f"pfd.{i}.score", [D, D, 1]),
            }
            if cfg.past_cross_attention:
                block["past"] = AttentionBlock(store, f"pfd.{i}.past", D, cfg.n_heads)
            self.blocks.append(block)

    def init_future_queries(self, q_obj: Tensor) -> Tensor:
        cfg = self.cfg
        N, D = q_obj.shape
        M_f, T_f = cfg.n_modes, self.t_future
        vol = Tensor(np.zeros((N, M_f, T_f, D)))
        if cfg.query_init_weights:
            vol = vol + self.e_mode.reshape(1, M_f, 1, D) + self.e_fut.reshape(1, 1, T_f, D)
        if cfg.query_init_object:
            vol = vol + self.obj_proj(q_obj).reshape(N, 1, 1, D)
        return self.init_norm(vol)

    def past_cross_attention(self, Q_fut: Tensor, q_mo: Tensor, P: Tensor,
                             block: AttentionBlock) -> Tensor:
        """Each object's future queries attend to its own past tokens."""
        N, M_f, T_f, D = Q_fut.shape
        T_h = P.shape[1]
        keys = q_mo.reshape(N, 1, D) + positional_encoding(P, D)   # (N, T_h, D)
        q = Q_fut.reshape(N, M_f * T_f, D)
        return block(q, keys, keys).reshape(N, M_f, T_f, D)

    def forward(self, q_obj: Tensor, q_mo: Tensor, P: Tensor,
                anchor: Tensor) -> list[Forecast]:
        """Run L_f blocks; `anchor` (N, 2) is the per-object current center
        that accumulated residual means are anchored at."""
        cfg = self.cfg
        N = q_obj.shape[0]
        M_f, T_f = cfg.n_modes, self.t_future
        Q_fut = self.init_future_queries(q_obj)
        offset = Tensor(np.zeros((N, M_f, T_f, 2)))
        forecasts: list[Forecast] = []
        for block in self.blocks:
            if cfg.past_cross_attention:
                Q_fut = self.past_cross_attention(Q_fut, q_mo, P, block["past"])
            Q_fut = factorized_attention(Q_fut, "time", block["time"])
            Q_fut = factorized_attention(Q_fut, "mode", block["mode"])
            Q_fut = factorized_attention(Q_fut, "social", block["social"])
            raw = block["reg"](Q_fut)                              # (N, M_f, T_f, 4)
            offset = offset + raw[..., 0:2]
            means = anchor.reshape(N, 1, 1, 2) + offset
            scales = positive_scale(raw[..., 2:4])
            pooled = Q_fut.mean(axis=2)                            # (N, M_f, D)
            mode_scores = block["score"](pooled).reshape(N, M_f)
            forecasts.append(Forecast(means=means, scales=scales,
                                      mode_scores=mode_scores))
        return forecasts
