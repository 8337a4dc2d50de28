"""Detector decoder: iterative appearance-guided past-motion refinement.

Each layer predicts multiple candidate past trajectories per object query,
maps them into the past ego frames, samples temporal BEV features along
them with deformable offsets, aggregates those features by adaptive mixing,
scores hypothesis/appearance compatibility, and refines the object state
with the winning hypothesis.

Trajectory step j corresponds to frame t = -j (step 0 is the current
position), matching the BEV grid stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .diffcore import (
    MLP,
    AttentionBlock,
    LayerNorm,
    Linear,
    ParamStore,
    Tensor,
    as_tensor,
    bilinear_sample,
    concat,
    positional_encoding,
    positive_scale,
    softmax,
    stack,
)
from .geometry import SE2Transform
from .synthscene import CLASS_NAMES, BEVSequence


@dataclass
class BoxState:
    """Differentiable box estimates for all queries."""

    center: Tensor      # (N, 3)
    log_size: Tensor    # (N, 3)
    yaw_sincos: Tensor  # (N, 2)
    velocity: Tensor    # (N, 2)

    @property
    def size(self) -> Tensor:
        return self.log_size.exp()

    def yaw(self) -> np.ndarray:
        v = self.yaw_sincos.value
        return np.arctan2(v[:, 0], v[:, 1])


@dataclass
class QueryState:
    q_obj: Tensor          # (N, D)
    q_mo: Tensor           # (N, D)
    P: Tensor              # (N, T_h, 2), current-ego frame
    boxes: BoxState
    class_logits: Tensor   # (N, C + 1), last column = no-object


@dataclass
class LayerOutput:
    state: QueryState
    hypotheses: Tensor | None       # (N, M_h, T_h, 4) means + scales
    scores: Tensor | None           # (N, M_h)
    selected: np.ndarray | None     # (N,) winning hypothesis index


def bev_peak_proposals(bev: BEVSequence, n: int,
                       min_sep_cells: int = 3) -> np.ndarray:
    """Reference-point proposals from the current BEV frame.

    Picks the n strongest activation peaks (squared feature norm per cell)
    with greedy square suppression, and returns their metric coordinates.
    Treated as constant inputs by the decoder; residual heads refine them.
    """
    occ = np.square(bev.grids[0]).sum(axis=-1)
    occ = occ.copy()
    H, W = occ.shape
    cells = np.empty((n, 2))
    for i in range(n):
        flat = int(occ.argmax())
        r, c = divmod(flat, W)
        # sub-cell refinement: centroid of the 3x3 neighborhood
        r0, r1 = max(0, r - 1), min(H, r + 2)
        c0, c1 = max(0, c - 1), min(W, c + 2)
        patch = np.maximum(occ[r0:r1, c0:c1], 0.0)
        mass = patch.sum()
        if mass > 0:
            rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1),
                                 indexing="ij")
            cells[i] = ((patch * rr).sum() / mass, (patch * cc).sum() / mass)
        else:
            cells[i] = (r, c)
        occ[max(0, r - min_sep_cells):r + min_sep_cells + 1,
            max(0, c - min_sep_cells):c + min_sep_cells + 1] = -np.inf
    return np.asarray(bev.origin) + cells * bev.meters_per_cell


def estimate_proposal_velocities(bev: BEVSequence, proposals: np.ndarray,
                                 transforms: list[SE2Transform], dt: float,
                                 window_cells: int = 4) -> np.ndarray:
    """One-step velocity estimates by peak-matching proposals against the
    previous BEV frame.

    Each proposal is mapped into the previous frame's ego coordinates, the
    strongest activation within a window around it is centroid-refined, and
    the displacement back in the current frame over dt gives the velocity.
    The window radius caps the recoverable speed. Like the proposals, these
    are constant inputs; residual heads refine them.
    """
    proposals = np.asarray(proposals)
    if len(bev.grids) < 2 or not transforms:
        return np.zeros_like(proposals)
    cur, prev_grid = bev.grids[0], bev.grids[1]
    H, W = prev_grid.shape[:2]
    mpc = bev.meters_per_cell
    origin = np.asarray(bev.origin)
    R = transforms[0].matrix
    t = np.asarray(transforms[0].translation)
    vel = np.zeros_like(proposals)
    for i, p0 in enumerate(proposals):
        cell0 = np.clip(np.round((p0 - origin) / mpc).astype(int),
                        0, [H - 1, W - 1])
        f0 = cur[cell0[0], cell0[1]]
        n0 = np.linalg.norm(f0)
        if n0 <= 0:
            continue
        guess_cell = (R @ p0 + t - origin) / mpc
        gr, gc = int(round(guess_cell[0])), int(round(guess_cell[1]))
        r0, r1 = max(0, gr - window_cells), min(H, gr + window_cells + 1)
        c0, c1 = max(0, gc - window_cells), min(W, gc + window_cells + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        # correlate the current-frame feature against the window, so the
        # match locks onto the same agent rather than the strongest neighbor
        score = np.maximum(prev_grid[r0:r1, c0:c1] @ (f0 / n0), 0.0)
        wr, wc = divmod(int(score.argmax()), score.shape[1])
        p0_, p1_ = max(0, wr - 1), min(score.shape[0], wr + 2)
        q0_, q1_ = max(0, wc - 1), min(score.shape[1], wc + 2)
        patch = score[p0_:p1_, q0_:q1_]
        mass = patch.sum()
        if mass > 0:
            rr, cc = np.meshgrid(np.arange(r0 + p0_, r0 + p1_),
                                 np.arange(c0 + q0_, c0 + q1_), indexing="ij")
            cell = np.array([(patch * rr).sum() / mass,
                             (patch * cc).sum() / mass])
        else:
            cell = np.array([float(r0 + wr), float(c0 + wc)])
        prev = origin + cell * mpc                  # previous-frame coords
        prev_in_cur = R.T @ (prev - t)
        vel[i] = (p0 - prev_in_cur) / dt
    return vel


def transform_hypotheses(H: Tensor, transforms: list[SE2Transform]) -> Tensor:
    """Map mean channels of step j >= 1 into frame -j coordinates.

    `transforms` holds T_{0->-j} for j = 1 .. T_h-1; step 0 is already in
    its own frame. Scale channels pass through unchanged.
    """
    N, M_h, T_h, _ = H.shape
    if len(transforms) != T_h - 1:
        raise ValueError(
            f"need {T_h - 1} transforms for {T_h} steps, got {len(transforms)}"
        )
    rots = np.stack([np.eye(2)] + [t.matrix for t in transforms])
    trans = np.stack([np.zeros(2)] + [np.asarray(t.translation) for t in transforms])
    means = H[..., 0:2]
    scales = H[..., 2:4]
    m = means.transpose(2, 0, 1, 3).reshape(T_h, N * M_h, 2)
    m = m @ Tensor(rots.transpose(0, 2, 1)) + Tensor(trans[:, None, :])
    m = m.reshape(T_h, N, M_h, 2).transpose(1, 2, 0, 3)
    return concat([m, scales], axis=-1)


class MotionDecoder:
    """Two factorized attention blocks (modes, then time) plus a residual
    Laplacian regression head over the hypothesis volume."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        D = cfg.embed_dim
        self.cfg = cfg
        self.mode_block = AttentionBlock(store, f"{name}.mode", D, cfg.n_heads)
        self.time_block = AttentionBlock(store, f"{name}.time", D, cfg.n_heads)
        self.reg_head = MLP(store, f"{name}.reg", [D, D, 4], zero_init_last=True)

    def __call__(self, Q_mo: Tensor, P: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (H, volume): H is (N, M_h, T_h, 4), volume (N, M_h, T_h, D).

        `P` is the anchor trajectory: (N, T_h, 2) shared across hypotheses,
        or (N, M_h, T_h, 2) with one anchor per hypothesis.
        """
        N, M_h, D = Q_mo.shape
        if P.ndim == 3:
            T_h = P.shape[1]
            P = P.reshape(N, 1, T_h, 2) + Tensor(np.zeros((N, M_h, T_h, 2)))
        T_h = P.shape[2]
        pe = positional_encoding(P, D)                       # (N, M_h, T_h, D)
        vol = Q_mo.reshape(N, M_h, 1, D) + pe
        # attention over hypotheses (modes)
        x = vol.transpose(0, 2, 1, 3).reshape(N * T_h, M_h, D)
        x = self.mode_block(x)
        vol = x.reshape(N, T_h, M_h, D).transpose(0, 2, 1, 3)
        # attention over time
        x = vol.reshape(N * M_h, T_h, D)
        x = self.time_block(x)
        vol = x.reshape(N, M_h, T_h, D)
        raw = self.reg_head(vol)                             # (N, M_h, T_h, 4)
        means = P + raw[..., 0:2]
        scales = positive_scale(raw[..., 2:4])
        return concat([means, scales], axis=-1), vol


class TemporalBEVSampler:
    """Deformable sampling of temporal BEV features along hypotheses."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        D, K, P = cfg.embed_dim, cfg.n_heads, cfg.n_offsets
        self.cfg = cfg
        self.offset_net = Linear(store, f"{name}.offsets", D, K * P * 2)
        self.weight_net = Linear(store, f"{name}.weights", D, K * P)

    def __call__(self, bev: BEVSequence, H_hat: Tensor, q_obj: Tensor,
                 boxes: BoxState) -> Tensor:
        cfg = self.cfg
        N, M_h, T_h, _ = H_hat.shape
        K, P = cfg.n_heads, cfg.n_offsets
        D = cfg.embed_dim
        d_head = D // K

        wl = boxes.size[:, 0:2] * 0.5                          # (N, 2)
        offs = self.offset_net(q_obj).reshape(N, K, P, 2)
        offs = offs * wl.reshape(N, 1, 1, 2)
        weights = softmax(self.weight_net(q_obj).reshape(N, K, P), axis=-1)

        origin = np.asarray(bev.origin)
        inv_res = 1.0 / bev.meters_per_cell
        per_step = []
        for j in range(T_h):
            pos_j = H_hat[:, :, j, 0:2]                        # (N, M_h, 2)
            head_feats = []
            for k in range(K):
                pts = pos_j.reshape(N, 1, M_h, 2) + offs[:, k].reshape(N, P, 1, 2)
                cells = (pts - Tensor(origin)) * inv_res       # (N, P, M_h, 2)
                coords = cells.reshape(N * P * M_h, 2)
                grid_k = Tensor(bev.grids[j][:, :, k * d_head:(k + 1) * d_head])
                sampled = bilinear_sample(grid_k, coords)
                sampled = sampled.reshape(N, P, M_h, d_head)
                w = weights[:, k].reshape(N, P, 1, 1)
                head_feats.append((sampled * w).sum(axis=1))   # (N, M_h, d_head)
            per_step.append(concat(head_feats, axis=-1))       # (N, M_h, D)
        return stack(per_step, axis=2)                         # (N, M_h, T_h, D)


class AdaptiveMixer:
    """Query-conditioned channel and point mixing over sampled features."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig, t_history: int):
        D = cfg.embed_dim
        self.D, self.T = D, t_history
        self.chan_gen = Linear(store, f"{name}.chan", D, D * D, zero_init=True)
        self.point_gen = Linear(store, f"{name}.point", D, t_history * t_history,
                                zero_init=True)
        self.chan_norm = LayerNorm(store, f"{name}.chan_norm", D)
        self.point_norm = LayerNorm(store, f"{name}.point_norm", D)
        self.out_proj = Linear(store, f"{name}.out", t_history * D, D)
        self.out_norm = LayerNorm(store, f"{name}.out_norm", D)

    def __call__(self, F: Tensor, q_obj: Tensor) -> Tensor:
        N, M_h, T_h, D = F.shape
        # generators are zero-initialized; mixing starts at identity
        Wc = self.chan_gen(q_obj).reshape(N, 1, D, D) + Tensor(np.eye(D))
        Wp = self.point_gen(q_obj).reshape(N, 1, T_h, T_h) + Tensor(np.eye(T_h))
        x = self.chan_norm(F @ Wc).relu()
        x = self.point_norm(Wp @ x).relu()
        x = self.out_proj(x.reshape(N, M_h, T_h * D))
        return self.out_norm(x)


class DetectionHead:
    """Per-layer box regression (center residual) and classification."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        D = cfg.embed_dim
        self.box_head = MLP(store, f"{name}.box", [D, D, 10], zero_init_last=True)
        self.cls_head = MLP(store, f"{name}.cls", [D, D, len(CLASS_NAMES) + 1])

    def __call__(self, q_obj: Tensor, boxes: BoxState) -> tuple[BoxState, Tensor]:
        raw = self.box_head(q_obj)
        new = BoxState(
            center=boxes.center + raw[:, 0:3],
            log_size=raw[:, 3:6],
            yaw_sincos=raw[:, 6:8],
            velocity=boxes.velocity + raw[:, 8:10],
        )
        return new, self.cls_head(q_obj)


class APRDecoder:
    """L_d refinement layers over object, motion, and trajectory state."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, t_history: int,
                 dt: float, extent: float):
        D = cfg.embed_dim
        N = cfg.n_queries
        self.cfg = cfg
        self.t_history = t_history
        self.dt = dt
        self.query_embed = store.add("apr.query_embed", (N, D), init="embed")
        ref = (np.random.default_rng(12).uniform(-0.7, 0.7, (N, 2)) * extent)
        self.ref_points = store.add("apr.ref_points", (N, 2), init="zeros")
        self.ref_points.value = ref
        self.mlp_init = MLP(store, "apr.mlp_init", [D, D, D])
        self.mlp_update = MLP(store, "apr.mlp_update", [D, D, D])
        self.update_norm = LayerNorm(store, "apr.update_norm", D)
        if cfg.past_motion_mode != "constant_velocity":
            self.e_past = store.add("apr.e_past", (1, cfg.n_hypotheses, D), init="embed")
            self._anchor_W = self._build_anchor_matrix()
        self.layers = []
        for i in range(cfg.n_layers_detector):
            layer = {
                "sampler": TemporalBEVSampler(store, f"apr.{i}.sampler", cfg),
                "mixer": AdaptiveMixer(store, f"apr.{i}.mixer", cfg, t_history),
                "det": DetectionHead(store, f"apr.{i}.det", cfg),
            }
            if cfg.past_motion_mode != "constant_velocity":
                layer["motion"] = MotionDecoder(store, f"apr.{i}.motion", cfg)
                if cfg.past_motion_mode == "appearance_guided":
                    # mixed features plus the raw per-step sample energy:
                    # the mixer's layer norms erase magnitude, but magnitude
                    # along the trail is the direct evidence signal
                    layer["score"] = MLP(store, f"apr.{i}.score",
                                         [D + t_history, D, 1])
                    # positive init: before any training the hypothesis with
                    # the most appearance mass along its trail wins selection
                    gain = store.add(f"apr.{i}.score_gain", (1,), init="zeros")
                    gain.value[:] = 2.0
                    layer["score_gain"] = gain
                else:
                    layer["score"] = MLP(store, f"apr.{i}.score_mo", [D, D, 1])
            self.layers.append(layer)

    # -- initialization ------------------------------------------------
    def init_queries(self, ref_xy: np.ndarray | None = None,
                     ref_vel: np.ndarray | None = None) -> QueryState:
        """Build the initial query state.

        `ref_xy` supplies per-scene reference points (e.g. BEV activation
        peaks); without it the learned fallback positions are used. Queries
        are conditioned on their reference location so downstream heads can
        regress in local coordinates. `ref_vel` seeds the velocity estimates
        (and hence the back-extrapolated initial trajectory), so the first
        layer samples appearance near the true past trail instead of a
        static stack at the current center.
        """
        cfg = self.cfg
        N = cfg.n_queries
        refs = self.ref_points if ref_xy is None else Tensor(np.asarray(ref_xy, dtype=float))
        vel = np.zeros((N, 2)) if ref_vel is None else np.asarray(ref_vel, dtype=float)
        q_obj = self.query_embed + positional_encoding(refs, cfg.embed_dim)
        q_mo = self.mlp_init(q_obj)
        boxes = BoxState(
            center=concat([refs, Tensor(np.zeros((N, 1)))], axis=-1),
            log_size=Tensor(np.zeros((N, 3))),
            yaw_sincos=Tensor(np.zeros((N, 2))),
            velocity=Tensor(vel),
        )
        P = self._constant_velocity_proposals(boxes)
        class_logits = Tensor(np.zeros((N, len(CLASS_NAMES) + 1)))
        return QueryState(q_obj=q_obj, q_mo=q_mo, P=P, boxes=boxes,
                          class_logits=class_logits)

    def _build_anchor_matrix(self) -> np.ndarray:
        """Constant matrix mapping a velocity to per-hypothesis arc anchors.

        Hypothesis m back-extrapolates along a circular arc with turn rate
        omega_m, the rates spread evenly over +-hypothesis_turn_rate (a
        straight line at omega = 0). For fixed omega the arc position is
        linear in the velocity: p(-t) = c - (1/omega) J (R(-omega t) - I) v,
        which reduces to c - t v as omega -> 0. The spread gives the
        hypotheses distinct curvature priors, so appearance scoring can
        disambiguate which way an agent actually turned.
        """
        M_h, T_h, dt = self.cfg.n_hypotheses, self.t_history, self.dt
        w0 = self.cfg.hypothesis_turn_rate
        omegas = np.linspace(-w0, w0, M_h) if M_h > 1 else np.array([0.0])
        J = np.array([[0.0, -1.0], [1.0, 0.0]])
        A = np.zeros((M_h, T_h, 2, 2))
        for m, om in enumerate(omegas):
            for j in range(T_h):
                t = j * dt
                if abs(om) < 1e-9:
                    A[m, j] = -t * np.eye(2)
                else:
                    th = -om * t
                    R = np.array([[np.cos(th), -np.sin(th)],
                                  [np.sin(th), np.cos(th)]])
                    A[m, j] = -(1.0 / om) * J @ (R - np.eye(2))
        # W[b, (m, j, a)] so offsets = v @ W, reshaped to (N, M_h, T_h, 2)
        return A.transpose(3, 0, 1, 2).reshape(2, M_h * T_h * 2)

    def _turn_anchors(self, boxes: BoxState) -> Tensor:
        """Per-hypothesis arc anchors (N, M_h, T_h, 2) from the current
        center and velocity estimates."""
        N = self.cfg.n_queries
        M_h, T_h = self.cfg.n_hypotheses, self.t_history
        offsets = (boxes.velocity @ Tensor(self._anchor_W)).reshape(N, M_h, T_h, 2)
        return boxes.center[:, 0:2].reshape(N, 1, 1, 2) + offsets

    def _constant_velocity_proposals(self, boxes: BoxState) -> Tensor:
        """P[j] = center - j * dt * velocity for j = 0 .. T_h-1."""
        steps = np.arange(self.t_history)[None, :, None] * self.dt
        center = boxes.center[:, 0:2].reshape(-1, 1, 2)
        vel = boxes.velocity.reshape(-1, 1, 2)
        return center - vel * Tensor(steps)

    # -- forward -------------------------------------------------------
    def forward(self, bev: BEVSequence, transforms: list[SE2Transform],
                state: QueryState | None = None) -> list[LayerOutput]:
        cfg = self.cfg
        if bev.n_frames != self.t_history:
            raise ValueError(
                f"BEV has {bev.n_frames} frames, decoder expects {self.t_history}"
            )
        if state is None:
            state = self.init_queries()
        N = cfg.n_queries
        outputs: list[LayerOutput] = []
        for layer in self.layers:
            if cfg.past_motion_mode == "constant_velocity":
                H = None
                scores = None
                selected = None
                # single pseudo-hypothesis: the proposal itself, unit scale
                means = state.P.reshape(N, 1, self.t_history, 2)
                scales = Tensor(np.ones((N, 1, self.t_history, 2)))
                H_sample = concat([means, scales], axis=-1)
                H_hat = transform_hypotheses(H_sample, transforms)
                F = layer["sampler"](bev, H_hat, state.q_obj, state.boxes)
                F_traj = layer["mixer"](F, state.q_obj)          # (N, 1, D)
                q_obj = self.update_norm(state.q_obj + F_traj[:, 0, :])
                q_mo = state.q_mo + self.mlp_update(q_obj)
                boxes, class_logits = layer["det"](q_obj, state.boxes)
                P = self._constant_velocity_proposals(boxes)
            else:
                Q_mo = state.q_mo.reshape(N, 1, -1) + self.e_past
                # per-hypothesis curvature anchors from the current box
                # estimate; the zero-init residual head makes these arcs the
                # exact starting behavior and learned refinement bends them
                anchor = self._turn_anchors(state.boxes)
                H, vol = layer["motion"](Q_mo, anchor)
                H_hat = transform_hypotheses(H, transforms)
                F = layer["sampler"](bev, H_hat, state.q_obj, state.boxes)
                F_traj = layer["mixer"](F, state.q_obj)          # (N, M_h, D)
                if cfg.past_motion_mode == "appearance_guided":
                    energy = (F * F).mean(axis=-1)       # (N, M_h, T_h)
                    score_in = concat([F_traj, energy], axis=-1)
                    scores = (layer["score"](score_in).reshape(N, cfg.n_hypotheses)
                              + layer["score_gain"] * energy.mean(axis=-1))
                else:
                    # guidance-free: score from the motion volume only
                    scores = layer["score"](vol.mean(axis=2)).reshape(N, cfg.n_hypotheses)
                w = softmax(scores, axis=-1)
                q_obj = self.update_norm(
                    state.q_obj + (w.reshape(N, -1, 1) * F_traj).sum(axis=1)
                )
                selected = np.argmax(scores.value, axis=1)
                rows = np.arange(N)
                q_mo = Q_mo[rows, selected] + self.mlp_update(q_obj)
                P = H[rows, selected][..., 0:2]
                boxes, class_logits = layer["det"](q_obj, state.boxes)
            state = QueryState(q_obj=q_obj, q_mo=q_mo, P=P, boxes=boxes,
                               class_logits=class_logits)
            outputs.append(LayerOutput(state=state, hypotheses=H, scores=scores,
                                       selected=selected))
        return outputs
