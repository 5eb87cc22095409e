"""Continual training loop: per-task Adam with projected updates, post-task
feature extraction, evaluation over seen tasks, and ACC/FT metrics.

Mode semantics:

    lora           adapters train unprojected, residual adapter frozen
    lora_o         orthogonal projection on the k/v adapters, residual frozen
    lora_o_r       both projections, evaluation uses the raw residual path
    duallora       both projections, dynamic-memory inference, per-sample
                   task-identity prediction with confidence logit scaling
    duallora_plus  duallora with batch-averaged features for prediction
                   (test batches grouped by true task; identity still
                   predicted, never given)
    oracle_id      duallora's forward, but the argmax is restricted to the
                   true task's head (upper-bound ablation)

Projections are applied to the gradient before the Adam moments and again
to the Adam step: the moments then live in the projected subspace and the
elementwise moment normalization cannot leak forbidden directions back in.
Optimizer state is reset at every task boundary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import RunConfig
from .data import (
    PURPOSE_ADAPTER_INIT,
    PURPOSE_COLLECT,
    PURPOSE_MODEL_INIT,
    PURPOSE_SHUFFLE,
    GeneratedTasks,
    TaskData,
    generate_tasks,
    load_file_tasks,
    stream_rng,
)
from .memory import (
    FeatureMemory,
    collect_features,
    dm_residual_hook,
    project_residual_gradients,
    update_feature_memory,
)
from .taskid import SignatureSet, compute_signature, predict_task, scale_logits
from .vit import EncoderConfig, MiniViT

__all__ = [
    "Adam",
    "AccMatrix",
    "RunReport",
    "build_model",
    "pretrain_backbone",
    "projection_transforms",
    "train_task",
    "evaluate",
    "compute_metrics",
    "run_continual",
]

_ORTHO_MODES = ("lora_o", "lora_o_r", "duallora", "duallora_plus", "oracle_id")
_RESID_MODES = ("lora_o_r", "duallora", "duallora_plus", "oracle_id")
_DM_MODES = ("duallora", "duallora_plus", "oracle_id")

_PRETEXT_SHUFFLE_INDEX = 65535


class Adam:
    """Adam over a named parameter dict, updating arrays in place."""

    def __init__(self, params: dict, lr: float, beta1: float, beta2: float,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, transforms: Optional[dict] = None):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for key, param in self.params.items():
            g = grads[key]
            tr = transforms.get(key) if transforms else None
            if tr is not None:
                g = tr(g)
            m = self.m[key]
            v = self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            step = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if tr is not None:
                step = tr(step)
            param -= step


@dataclass
class AccMatrix:
    """acc[task, after_task] percentages; entries below the diagonal undefined."""

    values: np.ndarray  # (T, T) with NaN where undefined

    @classmethod
    def empty(cls, tasks: int) -> "AccMatrix":
        return cls(np.full((tasks, tasks), np.nan))

    def record_column(self, after_task: int, accs: np.ndarray):
        self.values[: len(accs), after_task] = accs

    def to_lists(self) -> list:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.values]


def compute_metrics(acc: np.ndarray):
    """(ACC, FT, ft_defined) from a full accuracy matrix.

    ACC averages the last column; FT averages best-minus-final over the
    first T-1 tasks. T=1 has no forgetting: FT reported as 0, flagged.
    """
    acc = np.asarray(acc, dtype=np.float64)
    T = acc.shape[0]
    final = acc[:, T - 1]
    acc_value = float(final.mean())
    if T == 1:
        return acc_value, 0.0, False
    terms = []
    for tau in range(T - 1):
        best = np.nanmax(acc[tau, tau:])
        terms.append(best - final[tau])
    return acc_value, float(sum(terms) / (T - 1)), True


def build_model(cfg: RunConfig) -> MiniViT:
    grid = cfg.data.image_side // cfg.patch_side
    enc = EncoderConfig(layers=cfg.layers, seq_len=grid * grid + 1,
                        embed_dim=cfg.embed_dim, ffn_ratio=cfg.ffn_ratio,
                        patch_side=cfg.patch_side, channels=cfg.data.channels)
    return MiniViT(enc, stream_rng(cfg.seed, PURPOSE_MODEL_INIT))


def pretrain_backbone(model: MiniViT, pretext: TaskData, cfg: RunConfig):
    """Brief supervised training on the disjoint pretext labels, then freeze.

    The pretext head is dropped afterwards; the continual phase never
    touches the backbone again.
    """
    if cfg.pretext_epochs == 0 or len(pretext.train_x) == 0:
        return
    model.add_head(pretext.classes, label_base=0)
    params = {k: model.param(k) for k in model.backbone_keys()}
    params["head.w"] = model.bank.heads[0].w
    params["head.b"] = model.bank.heads[0].b
    adam = Adam(params, cfg.pretext_lr, cfg.beta1, cfg.beta2)
    rng = stream_rng(cfg.seed, PURPOSE_SHUFFLE, _PRETEXT_SHUFFLE_INDEX)
    n = len(pretext.train_x)
    for _ in range(cfg.pretext_epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch):
            idx = order[s : s + cfg.batch]
            model.train_forward(pretext.train_x[idx], pretext.train_y[idx], 0)
            adam.step(model.backward(train_backbone=True))
    model.bank.heads.clear()


def projection_transforms(model: MiniViT, mem: FeatureMemory, mode: str) -> dict:
    """Per-parameter linear projectors for the current task's training."""
    transforms: dict = {}
    ortho = mode in _ORTHO_MODES
    resid = mode in _RESID_MODES
    for l in range(model.cfg.layers):
        lm = mem.layers[l]
        if ortho:
            if lm.phi_k.rank:
                pk = lm.phi_k.vectors
                transforms[f"L{l}.a_k"] = lambda g, pk=pk: g - (g @ pk.T) @ pk
            if lm.phi_v.rank:
                pv = lm.phi_v.vectors
                transforms[f"L{l}.b_v"] = lambda g, pv=pv: g - pv.T @ (pv @ g)
        if resid:
            psi_prev = lm.psi[-1] if lm.psi else None
            if psi_prev is None or psi_prev.rank == 0:
                transforms[f"L{l}.b_r"] = lambda g: np.zeros_like(g)
            else:
                transforms[f"L{l}.b_r"] = (
                    lambda g, p=psi_prev: project_residual_gradients(g, p))
    return transforms


def trainable_params(model: MiniViT, head_idx: int, mode: str) -> dict:
    params = {}
    for l in range(model.cfg.layers):
        ad = model.adapters.layers[l]
        params[f"L{l}.a_k"] = ad.a_k
        params[f"L{l}.b_v"] = ad.b_v
        if mode in _RESID_MODES:
            params[f"L{l}.b_r"] = ad.b_r
    head = model.bank.heads[head_idx]
    params["head.w"] = head.w
    params["head.b"] = head.b
    return params


def train_task(model: MiniViT, mem: FeatureMemory, task: TaskData,
               cfg: RunConfig, task_idx: int) -> float:
    """Fine-tune adapters plus the newest head on one task.

    Returns the mean loss of the final epoch. The newest head must already
    exist; previous tasks' feature memory drives the projections.
    """
    if len(task.train_x) == 0:
        raise ValueError("task has no training data")
    head_idx = len(model.bank.heads) - 1
    params = trainable_params(model, head_idx, cfg.mode)
    adam = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    transforms = projection_transforms(model, mem, cfg.mode)
    rng = stream_rng(cfg.seed, PURPOSE_SHUFFLE, task_idx)
    y_local = task.train_y - task.label_base
    n = len(task.train_x)
    last_epoch_loss = 0.0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for s in range(0, n, cfg.batch):
            idx = order[s : s + cfg.batch]
            total += model.train_forward(task.train_x[idx], y_local[idx], head_idx)
            adam.step(model.backward(), transforms)
            batches += 1
        last_epoch_loss = total / batches
    return last_epoch_loss


def evaluate(model: MiniViT, mem: FeatureMemory, signatures: SignatureSet,
             tasks: list, cfg: RunConfig):
    """Per-task accuracies (percent) plus task-identity statistics.

    Returns (accs, id_hits, id_total); id_total is 0 for modes that do not
    predict identities.
    """
    ranges = model.bank.ranges()
    accs = np.zeros(len(tasks))
    id_hits = 0
    id_total = 0
    hook = dm_residual_hook(mem, model.adapters) if cfg.mode in _DM_MODES else None
    for ti, task in enumerate(tasks):
        x, y = task.test_x, task.test_y
        if cfg.mode in ("lora", "lora_o", "lora_o_r"):
            logits, _ = model.forward(x, mode="infer")
            preds = np.argmax(logits, axis=1)
        elif cfg.mode == "oracle_id":
            logits, _ = model.forward(x, mode="infer_dm", residual_hook=hook)
            start, stop = ranges[ti]
            preds = start + np.argmax(logits[:, start:stop], axis=1)
        elif cfg.mode == "duallora":
            logits, taps = model.forward(x, mode="infer_dm", collect_taps=True,
                                         residual_hook=hook)
            preds = np.empty(len(x), dtype=np.int64)
            for i in range(len(x)):
                pi_star = compute_signature(taps[i][-1].s_class, mem)
                pred = predict_task(pi_star, signatures)
                preds[i] = np.argmax(scale_logits(logits[i], ranges, pred))
                id_total += 1
                id_hits += int(pred.task == ti)
        else:  # duallora_plus: same-task batches, batch-averaged features
            preds = np.empty(len(x), dtype=np.int64)
            for s in range(0, len(x), cfg.batch):
                xb = x[s : s + cfg.batch]
                logits, taps = model.forward(xb, mode="infer_dm",
                                             collect_taps=True,
                                             residual_hook=hook)
                v_bar = np.mean([t[-1].s_class for t in taps], axis=0)
                pred = predict_task(compute_signature(v_bar, mem), signatures)
                id_total += len(xb)
                id_hits += len(xb) * int(pred.task == ti)
                for i in range(len(xb)):
                    preds[s + i] = np.argmax(scale_logits(logits[i], ranges, pred))
        accs[ti] = 100.0 * float(np.mean(preds == y))
    return accs, id_hits, id_total


def _composite_snapshot(model: MiniViT) -> list:
    return [dict(k=ad.o_k(), v=ad.o_v(), r=ad.r_mat())
            for ad in model.adapters.layers]


def _projection_residuals(before: list, model: MiniViT, mem: FeatureMemory) -> dict:
    """Worst relative leakage of the task's composite updates, per kind.

    Key stream is measured in the transposed orientation (Phi_k against
    (Delta O^k)^T), the value stream directly, the residual adapter against
    the complement of span(Psi_prev). Zero updates contribute zero.
    """
    worst = dict(ortho_k=0.0, ortho_v=0.0, residual=0.0)
    for l, ad in enumerate(model.adapters.layers):
        lm = mem.layers[l]
        dk = ad.o_k() - before[l]["k"]
        dv = ad.o_v() - before[l]["v"]
        dr = ad.r_mat() - before[l]["r"]
        if lm.phi_k.rank and np.max(np.abs(dk)) > 0:
            ratio = np.max(np.abs(lm.phi_k.vectors @ dk.T)) / np.max(np.abs(dk))
            worst["ortho_k"] = max(worst["ortho_k"], float(ratio))
        phi_v = lm.phi_v
        if phi_v.rank and np.max(np.abs(dv)) > 0:
            ratio = np.max(np.abs(phi_v.vectors @ dv)) / np.max(np.abs(dv))
            worst["ortho_v"] = max(worst["ortho_v"], float(ratio))
        if np.max(np.abs(dr)) > 0:
            psi_prev = lm.psi[-1] if lm.psi else None
            if psi_prev is None or psi_prev.rank == 0:
                worst["residual"] = max(worst["residual"], 1.0)
            else:
                out = dr - psi_prev.vectors.T @ (psi_prev.vectors @ dr)
                ratio = np.max(np.abs(out)) / np.max(np.abs(dr))
                worst["residual"] = max(worst["residual"], float(ratio))
    return worst


@dataclass
class RunReport:
    config: dict
    mode: str
    seed: int
    acc_matrix: AccMatrix
    acc: float
    ft: float
    ft_defined: bool
    acc_per_step: list
    acc_bar: float
    task_id_top1: Optional[float]
    train_losses: list
    projection_residuals: dict
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "mode": self.mode,
            "seed": self.seed,
            "acc_matrix": self.acc_matrix.to_lists(),
            "final_accuracies": [row[-1] for row in self.acc_matrix.to_lists()],
            "acc": self.acc,
            "ft": self.ft,
            "ft_defined": self.ft_defined,
            "acc_per_step": self.acc_per_step,
            "acc_bar": self.acc_bar,
            "task_id_top1": self.task_id_top1,
            "train_losses": self.train_losses,
            "projection_residuals": self.projection_residuals,
            "wall_time_s": self.wall_time_s,
        }


def load_tasks(cfg: RunConfig) -> GeneratedTasks:
    if cfg.data.kind == "synthetic":
        return generate_tasks(cfg.synthetic_spec(), cfg.seed)
    return load_file_tasks(cfg.data.path, cfg.tasks, cfg.classes_per_task,
                           cfg.data.pretext_classes, cfg.data.test_fraction,
                           cfg.seed)


def run_continual(cfg: RunConfig, data: Optional[GeneratedTasks] = None):
    """Full pipeline: pretrain, then per task train / collect / update
    memory / signature / evaluate. Returns (report, model, mem, signatures).
    """
    t0 = time.perf_counter()
    if data is None:
        data = load_tasks(cfg)
    model = build_model(cfg)
    pretrain_backbone(model, data.pretext, cfg)
    model.attach_adapters(cfg.rank, stream_rng(cfg.seed, PURPOSE_ADAPTER_INIT))
    mem = FeatureMemory.empty(cfg.layers, cfg.embed_dim)
    signatures = SignatureSet(lam=cfg.lam)
    matrix = AccMatrix.empty(cfg.tasks)
    acc_per_step = []
    losses = []
    id_stats = (0, 0)
    residuals = dict(ortho_k=0.0, ortho_v=0.0, residual=0.0)
    for t, task in enumerate(data.tasks):
        model.add_head(task.classes, task.label_base)
        before = _composite_snapshot(model)
        losses.append(train_task(model, mem, task, cfg, t))
        current = _projection_residuals(before, model, mem)
        for key in residuals:
            residuals[key] = max(residuals[key], current[key])
        m = cfg.effective_sample_m(len(task.train_x))
        feats = collect_features(model, task.train_x, m,
                                 stream_rng(cfg.seed, PURPOSE_COLLECT, t))
        update_feature_memory(mem, feats.k_feats, feats.v_feats, cfg.epsilon)
        signatures.add(compute_signature(feats.v_bar_last, mem))
        accs, id_hits, id_total = evaluate(model, mem, signatures,
                                           data.tasks[: t + 1], cfg)
        matrix.record_column(t, accs)
        acc_per_step.append(float(accs.mean()))
        id_stats = (id_hits, id_total)
    acc, ft, ft_defined = compute_metrics(matrix.values)
    task_id_top1 = (100.0 * id_stats[0] / id_stats[1]) if id_stats[1] else None
    report = RunReport(
        config=cfg.to_dict(), mode=cfg.mode, seed=cfg.seed, acc_matrix=matrix,
        acc=acc, ft=ft, ft_defined=ft_defined, acc_per_step=acc_per_step,
        acc_bar=float(np.mean(acc_per_step)), task_id_top1=task_id_top1,
        train_losses=losses, projection_residuals=residuals,
        wall_time_s=time.perf_counter() - t0)
    return report, model, mem, signatures
