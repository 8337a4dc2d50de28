"""Training loop, evaluation runner, ablation driver, and reporting.

Every number produced here is a deterministic function of the experiment
config and its seed: scenes are regenerated from seeds, the optimizer is
seeded, and evaluation order is fixed.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .apr import (APRDecoder, LayerOutput, bev_peak_proposals,
                  estimate_proposal_velocities)
from .config import ExperimentConfig, config_from_dict, with_overrides
from .diffcore import ParamStore, Tensor
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .metrics import (
    Detection,
    EvalFrame,
    GroundTruth,
    MetricsReport,
    evaluate_frames,
)
from .pfd import ForecastDecoder
from .synthscene import CLASS_NAMES, SceneSample, generate_scene
from . import losses as losses_mod

PREDICTIONS_FORMAT = "retrocast-predictions"
PREDICTIONS_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term goes non-finite during training."""


@dataclass
class RunReport:
    steps: int
    loss_curve: list = field(default_factory=list)   # (step, total) pairs
    final_loss: float = 0.0
    wall_clock_s: float = 0.0
    config_hash: str = ""
    seed: int = 0
    n_params: int = 0

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "loss_curve": self.loss_curve,
            "final_loss": self.final_loss, "wall_clock_s": self.wall_clock_s,
            "config_hash": self.config_hash, "seed": self.seed,
            "n_params": self.n_params,
        }


@dataclass
class SceneTargets:
    centers: np.ndarray       # (A, 3)
    classes: np.ndarray       # (A,) int
    boxes: list               # dicts for detection_loss
    past: np.ndarray          # (A, T_h, 2)
    future: np.ndarray        # (A, T_f, 2)
    dynamic: np.ndarray       # (A,) bool


def scene_targets(scene: SceneSample) -> SceneTargets:
    boxes = []
    for a in scene.agents:
        b = a.box
        boxes.append({
            "center": np.asarray(b.center, dtype=float),
            "log_size": np.log(np.asarray(b.size, dtype=float)),
            "yaw_sincos": np.array([np.sin(b.yaw), np.cos(b.yaw)]),
            "velocity": np.asarray(b.velocity, dtype=float),
            "class_id": CLASS_NAMES.index(a.class_id),
        })
    return SceneTargets(
        centers=np.array([b["center"] for b in boxes]),
        classes=np.array([b["class_id"] for b in boxes]),
        boxes=boxes,
        past=np.stack([t.positions for t in scene.gt_past]),
        future=np.stack([t.positions for t in scene.gt_future]),
        dynamic=np.array([a.is_dynamic for a in scene.agents]),
    )


class Model:
    """Detector decoder plus forecaster sharing one parameter store."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        sc = cfg.scene
        self.store = ParamStore(seed=cfg.seed)
        extent = sc.h_cells * sc.meters_per_cell / 2.0
        self.apr = APRDecoder(self.store, cfg.model, sc.t_history, sc.dt, extent)
        self.pfd = ForecastDecoder(self.store, cfg.model, sc.t_future)

    @property
    def n_params(self) -> int:
        return self.store.n_scalars()

    def forward(self, scene: SceneSample,
                pfd_past: Tensor | None = None) -> tuple[list[LayerOutput], list]:
        """Full pass: detector layers, then the forecaster on final-layer
        state. `pfd_past` optionally overrides the refined past trajectories
        fed to the forecaster (teacher forcing)."""
        proposals = bev_peak_proposals(scene.bev, self.cfg.model.n_queries)
        vels = estimate_proposal_velocities(
            scene.bev, proposals, scene.past_transforms(), self.cfg.scene.dt)
        state = self.apr.init_queries(proposals, vels)
        outs = self.apr.forward(scene.bev, scene.past_transforms(), state)
        st = outs[-1].state
        P = st.P if pfd_past is None else pfd_past
        anchor = st.boxes.center[:, 0:2]
        forecasts = self.pfd.forward(st.q_obj, st.q_mo, P, anchor)
        return outs, forecasts

    def save(self, path) -> None:
        save_checkpoint(self.store, path)

    def load(self, path) -> None:
        load_checkpoint(self.store, path)


def _pair_arrays(assignment: losses_mod.Assignment):
    pairs = assignment.gated_pairs
    if not pairs:
        return None, None
    return (np.array([q for q, _ in pairs], dtype=int),
            np.array([g for _, g in pairs], dtype=int))


def compute_scene_loss(model: Model, scene: SceneSample, targets: SceneTargets,
                       tf_ratio: float = 0.0, tf_seed: int = 0,
                       target_cache: dict | None = None):
    """Deep-supervised loss over all detector layers and forecaster blocks.

    Matching is recomputed at every detector layer. The forecaster is
    supervised with the final layer's assignment; teacher forcing mixes the
    ground-truth past into its input only.

    `target_cache` (a mutable dict) freezes the detached scoring targets at
    their first-computed values across repeated calls. Finite-difference
    gradient verification needs this: the targets are constants to the
    backward pass, so re-deriving them from perturbed activations would make
    the difference quotient measure a path the gradient deliberately
    excludes.
    """
    cfg = model.cfg
    lc = cfg.loss
    proposals = bev_peak_proposals(scene.bev, cfg.model.n_queries)
    vels = estimate_proposal_velocities(
        scene.bev, proposals, scene.past_transforms(), cfg.scene.dt)
    state = model.apr.init_queries(proposals, vels)
    outs = model.apr.forward(scene.bev, scene.past_transforms(), state)

    def frozen(key, compute):
        if target_cache is None:
            return compute()
        if key not in target_cache:
            target_cache[key] = compute()
        return target_cache[key]

    det_terms, past_terms = [], []
    assignment = None
    for layer_idx, out in enumerate(outs):
        st = out.state
        assignment = losses_mod.match_detections(
            st.boxes.center.value, st.class_logits.value,
            targets.centers, targets.classes, gate_distance=lc.gate_distance)
        det_terms.append(losses_mod.detection_loss(
            st.boxes, st.class_logits, assignment, targets.boxes,
            no_object_weight=lc.no_object_weight))
        if out.hypotheses is not None:
            q_idx, g_idx = _pair_arrays(assignment)
            if q_idx is not None:
                nll = losses_mod.laplace_nll(
                    out.hypotheses[q_idx][..., 0:2],
                    out.hypotheses[q_idx][..., 2:4],
                    targets.past[g_idx][:, None])
                past_terms.append(nll)
            score_t = frozen(("past", layer_idx),
                             lambda: losses_mod.past_score_targets(
                                 out.hypotheses.value, targets.past,
                                 assignment, tau=lc.tau_past))
            past_terms.append(losses_mod.past_scoring_loss(
                out.scores, out.hypotheses, targets.past, assignment,
                tau=lc.tau_past, targets=score_t))

    st = outs[-1].state
    P_in = st.P
    if tf_ratio > 0.0 and assignment.pairs:
        P_gt = np.zeros(st.P.shape)
        for q, g in assignment.pairs:
            P_gt[q] = targets.past[g]
        P_in = losses_mod.teacher_forcing_mix(st.P, P_gt, tf_ratio,
                                              assignment, tf_seed)
    forecasts = model.pfd.forward(st.q_obj, st.q_mo, P_in,
                                  st.boxes.center[:, 0:2])

    fut_terms = []
    q_idx, g_idx = _pair_arrays(assignment)
    for block_idx, fc in enumerate(forecasts):
        if q_idx is not None:
            # winner-take-all regression: supervise the closest mode only
            fm = fc.means.value[q_idx]                       # (n, M_f, T_f, 2)
            gt = targets.future[g_idx][:, None]
            best = np.linalg.norm(fm - gt, axis=-1).mean(axis=-1).argmin(axis=1)
            rows = np.arange(len(q_idx))
            fut_terms.append(losses_mod.laplace_nll(
                fc.means[q_idx][rows, best], fc.scales[q_idx][rows, best],
                targets.future[g_idx]))
        mode_t = frozen(("future", block_idx),
                        lambda: losses_mod.future_score_targets(
                            fc.means.value, targets.future, assignment,
                            tau=lc.tau_future))
        fut_terms.append(losses_mod.future_scoring_loss(
            fc.mode_scores, fc.means, targets.future, assignment,
            tau=lc.tau_future, targets=mode_t))

    def avg(terms):
        if not terms:
            return Tensor(0.0)
        return sum(terms[1:], terms[0]) / float(len(terms))

    l_det, l_past, l_fut = avg(det_terms), avg(past_terms), avg(fut_terms)
    total, report = losses_mod.total_loss(
        l_det, l_past, l_fut, lc.lambda_past, lc.lambda_future)
    return total, report, outs, forecasts


class Adam:
    """Adam with global-norm gradient clipping."""

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, grad_clip: float = 0.0):
        self.store = store
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in store.items()}

    def step(self) -> float:
        grads = {}
        sq = 0.0
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            grads[name] = g
            sq += float((g * g).sum())
        norm = float(np.sqrt(sq))
        scale = 1.0
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / norm
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.store.items():
            g = grads[name] * scale
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


def train(cfg: ExperimentConfig, out_dir=None, workers: int = 1,
          progress: bool = False) -> tuple[Model, RunReport]:
    """Train a model from scratch; returns it with a run report.

    Scenes cycle through `n_train_scenes` seeds starting at
    `train_seed_start`, one scene per optimizer step.
    """
    t0 = time.time()
    model = Model(cfg)
    opt = cfg.optim
    optimizer = Adam(model.store, opt.learning_rate, opt.adam_beta1,
                     opt.adam_beta2, opt.adam_eps, opt.grad_clip)
    report = RunReport(steps=opt.steps, config_hash=cfg.hash(), seed=cfg.seed,
                       n_params=model.n_params)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for step in range(opt.steps):
        for name, p in model.store.items():
            if not np.all(np.isfinite(p.value)):
                raise TrainingDivergedError(
                    f"non-finite parameter {name} entering step {step}")
        seed = cfg.train_seed_start + step % cfg.n_train_scenes
        scene = generate_scene(cfg.scene, seed)
        targets = scene_targets(scene)
        ratio = losses_mod.curriculum_ratio(step, opt.steps) \
            if opt.teacher_forcing else 0.0
        total, loss_report, _, _ = compute_scene_loss(
            model, scene, targets, tf_ratio=ratio, tf_seed=cfg.seed * 100003 + step)
        for term, value in (("detection", loss_report.l_det),
                            ("past", loss_report.l_past),
                            ("future", loss_report.l_future)):
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite {term} loss at step {step}: {value}")
        model.store.zero_grad()
        total.backward()
        optimizer.lr = opt.lr_at(step)
        optimizer.step()
        if step % 10 == 0 or step == opt.steps - 1:
            report.loss_curve.append((step, loss_report.total))
        if progress and step % 100 == 0:
            print(f"  step {step:5d}  loss {loss_report.total:.4f}", flush=True)
        report.final_loss = loss_report.total
        if out_path is not None and opt.checkpoint_interval > 0 \
                and (step + 1) % opt.checkpoint_interval == 0:
            model.save(out_path / f"checkpoint_{step + 1}.ckpt")

    report.wall_clock_s = time.time() - t0
    if out_path is not None:
        model.save(out_path / "checkpoint.ckpt")
        (out_path / "run_report.json").write_text(
            json.dumps(report.to_dict(), indent=2))
    return model, report


# -- inference and evaluation ---------------------------------------------

def predict_scene(model: Model, scene: SceneSample) -> dict:
    """One JSON-ready prediction record for a scene."""
    cfg = model.cfg
    outs, forecasts = model.forward(scene)
    st = outs[-1].state
    logits = st.class_logits.value
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    confidence = 1.0 - probs[:, -1]
    class_ids = probs[:, :-1].argmax(axis=1)
    fc = forecasts[-1]
    detections = []
    for i in range(cfg.model.n_queries):
        if confidence[i] < cfg.confidence_threshold:
            continue
        detections.append({
            "center": st.boxes.center.value[i].tolist(),
            "size": st.boxes.size.value[i].tolist(),
            "yaw": float(st.boxes.yaw()[i]),
            "velocity": st.boxes.velocity.value[i].tolist(),
            "class": CLASS_NAMES[class_ids[i]],
            "confidence": float(confidence[i]),
            "past": st.P.value[i].tolist(),
            "futures": fc.means.value[i].tolist(),
            "mode_scores": fc.mode_scores.value[i].tolist(),
        })
    return {"seed": scene.seed, "detections": detections}


def record_to_frame(record: dict, scene: SceneSample) -> EvalFrame:
    dets = [Detection(
        center_xy=np.asarray(d["center"][:2]),
        class_name=d["class"],
        confidence=d["confidence"],
        futures=np.asarray(d["futures"]),
        mode_scores=np.asarray(d["mode_scores"]),
        past=np.asarray(d["past"]),
    ) for d in record["detections"]]
    gts = [GroundTruth(
        center_xy=np.asarray(a.box.center[:2]),
        class_name=a.class_id,
        future=scene.gt_future[i].positions,
        past=scene.gt_past[i].positions,
        is_dynamic=a.is_dynamic,
    ) for i, a in enumerate(scene.agents)]
    return EvalFrame(detections=dets, gts=gts)


def oracle_record(scene: SceneSample) -> dict:
    """Bypass record built directly from ground truth (perfect model bound)."""
    detections = []
    for i, a in enumerate(scene.agents):
        detections.append({
            "center": list(a.box.center),
            "size": list(a.box.size),
            "yaw": a.box.yaw,
            "velocity": list(a.box.velocity),
            "class": a.class_id,
            "confidence": 1.0,
            "past": scene.gt_past[i].positions.tolist(),
            "futures": [scene.gt_future[i].positions.tolist()],
            "mode_scores": [0.0],
        })
    return {"seed": scene.seed, "detections": detections}


_WORKER_MODEL = None


def _eval_worker_init(cfg_dict: dict, param_blob: dict):
    global _WORKER_MODEL
    cfg = config_from_dict(cfg_dict)
    _WORKER_MODEL = Model(cfg)
    for name, p in _WORKER_MODEL.store.items():
        p.value = param_blob[name]


def _eval_worker(seed: int) -> dict:
    scene = generate_scene(_WORKER_MODEL.cfg.scene, seed)
    return predict_scene(_WORKER_MODEL, scene)


def eval_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.eval_seed_start + i for i in range(cfg.n_eval_scenes)]


def evaluate(cfg: ExperimentConfig, model: Model, out_dir=None,
             workers: int = 1) -> MetricsReport:
    """Run inference over the held-out seed range and score it.

    Writes (when `out_dir` is given): predictions.jsonl, metrics.json, and
    a human-readable summary.txt.
    """
    seeds = eval_seeds(cfg)
    if workers > 1:
        from dataclasses import asdict
        blob = {name: p.value for name, p in model.store.items()}
        with ProcessPoolExecutor(
                max_workers=workers, initializer=_eval_worker_init,
                initargs=(asdict(cfg), blob)) as pool:
            records = list(pool.map(_eval_worker, seeds))
    else:
        records = []
        for seed in seeds:
            scene = generate_scene(cfg.scene, seed)
            records.append(predict_scene(model, scene))

    frames = [record_to_frame(rec, generate_scene(cfg.scene, rec["seed"]))
              for rec in records]
    report = evaluate_frames(frames, alpha=cfg.loss.epa_alpha)
    if out_dir is not None:
        write_outputs(cfg, records, report, out_dir)
    return report


def write_outputs(cfg: ExperimentConfig, records: list[dict],
                  report: MetricsReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {"format": PREDICTIONS_FORMAT, "version": PREDICTIONS_VERSION,
              "config_hash": cfg.hash()}
    lines = [json.dumps(header)] + [json.dumps(r) for r in records]
    (out / "predictions.jsonl").write_text("\n".join(lines) + "\n")
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out / "summary.txt").write_text(summarize(report))


def read_predictions(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty predictions file")
    header = json.loads(lines[0])
    if header.get("format") != PREDICTIONS_FORMAT:
        raise ValueError(f"{path}: not a predictions file")
    if header.get("version") != PREDICTIONS_VERSION:
        raise ValueError(
            f"{path}: unsupported predictions version {header.get('version')}")
    return header, [json.loads(ln) for ln in lines[1:]]


def summarize(report: MetricsReport) -> str:
    rows = [
        ("minADE", report.min_ade), ("minFDE", report.min_fde),
        ("MR", report.miss_rate), ("EPA", report.epa),
        ("FDE_past", report.fde_past), ("mAP", report.mean_ap),
    ]
    lines = ["metric      value", "-----------------"]
    for name, value in rows:
        lines.append(f"{name:<10}  {value:.4f}")
    for thr, ap in report.ap.items():
        lines.append(f"AP@{thr:<7}  {ap:.4f}")
    lines.append(f"matched {report.n_matched} / {report.n_gt} gts")
    return "\n".join(lines) + "\n"


# -- ablations ------------------------------------------------------------

ABLATION_METRICS = ("minADE", "minFDE", "MR", "EPA", "FDE_past", "mAP")


def ablate(cfg: ExperimentConfig, variants: list[tuple[str, dict]],
           out_dir=None, workers: int = 1, progress: bool = False) -> str:
    """Train and evaluate the base config plus each variant with the same
    seeds; returns a delimited comparison table. Failures in one row are
    reported in place and do not stop the remaining rows."""
    rows = []
    for name, overrides in [("base", {})] + list(variants):
        try:
            vcfg = with_overrides(cfg, overrides)
            if progress:
                print(f"[{name}] training...", flush=True)
            model, _ = train(vcfg, workers=workers, progress=progress)
            rep = evaluate(vcfg, model, workers=workers)
            d = rep.to_dict()
            rows.append((name, [f"{d[m]:.4f}" for m in ABLATION_METRICS]))
        except Exception as exc:  # keep remaining rows running
            rows.append((name, [f"error: {exc}"]))
    width = max(len(r[0]) for r in rows)
    lines = ["\t".join(["variant".ljust(width)] + list(ABLATION_METRICS))]
    for name, cells in rows:
        lines.append("\t".join([name.ljust(width)] + cells))
    table = "\n".join(lines) + "\n"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.tsv").write_text(table)
    return table


def generate_dataset(cfg: ExperimentConfig, path, split: str = "train",
                     workers: int = 1) -> list[int]:
    """Write the dataset manifest for a split; grids are regenerated from
    seeds on load, so this also validates that every seed renders cleanly."""
    from .synthscene import serialize_dataset
    if split == "train":
        seeds = [cfg.train_seed_start + i for i in range(cfg.n_train_scenes)]
    elif split == "eval":
        seeds = eval_seeds(cfg)
    else:
        raise ValueError(f"unknown split {split!r}, expected 'train' or 'eval'")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_check_seed, [(cfg.scene, s) for s in seeds]))
    else:
        for s in seeds:
            generate_scene(cfg.scene, s, render=False)
    serialize_dataset(cfg.scene, seeds, path)
    return seeds


def _check_seed(args):
    scene_cfg, seed = args
    generate_scene(scene_cfg, seed, render=False)
    return seed
