"""Feature-subspace memory and the dual-adapter projection machinery.

After each task, class-token features are collected per layer (the first
row of Q for the key stream and the first row of softmax(QK^T/sqrt(d)) a
for the value stream), residualized against the stored orthonormal bases,
decomposed by thin SVD and appended under an energy threshold. The rows
appended to the value-stream basis at task t form the task's residual
basis Psi_t; residual-adapter updates are confined to span(Psi_t) while
orthogonal-adapter updates are projected out of span(Phi).

At inference, per-sample relevance weights omega_tau = |Psi_tau v| /
(r_tau |v|) modulate the residual adapter's output (dynamic memory).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import (
    Basis,
    ParameterError,
    SvdResult,
    empty_basis,
    select_basis,
    thin_svd,
)
from .vit import AdapterSet, MiniViT

__all__ = [
    "LayerMemory",
    "FeatureMemory",
    "CollectedFeatures",
    "DynamicMemoryContext",
    "collect_features",
    "update_feature_memory",
    "project_orthogonal_gradients",
    "project_residual_gradients",
    "relevance",
    "build_dm_context",
    "dm_residual_hook",
]

# Residual singular values at or below this fraction of the raw feature
# scale are treated as zero energy (repeated features add no basis rows).
ZERO_ENERGY_REL = 1e-10


@dataclass
class LayerMemory:
    """Per-layer bases: Phi_k as one block, Phi_v as the ordered Psi blocks."""

    dim: int
    phi_k: Basis
    psi: list = field(default_factory=list)   # Basis per task, value stream

    @property
    def phi_v(self) -> Basis:
        if not self.psi:
            return empty_basis(self.dim)
        return Basis(np.concatenate([p.vectors for p in self.psi], axis=0))

    @property
    def psi_ranks(self) -> list:
        return [p.rank for p in self.psi]

    @property
    def total_psi_rank(self) -> int:
        return sum(p.rank for p in self.psi)


@dataclass
class FeatureMemory:
    layers: list

    @classmethod
    def empty(cls, num_layers: int, dim: int) -> "FeatureMemory":
        return cls([LayerMemory(dim=dim, phi_k=empty_basis(dim)) for _ in range(num_layers)])

    @property
    def tasks(self) -> int:
        return len(self.layers[0].psi) if self.layers else 0


@dataclass
class CollectedFeatures:
    k_feats: list          # per layer, (m, d): rows are Q_1 per sample
    v_feats: list          # per layer, (m, d): rows are S_1 per sample
    v_bar_last: np.ndarray  # (d,): mean S_1 at the last block
    indices: np.ndarray


def collect_features(model: MiniViT, task_x: np.ndarray, m: int,
                     rng: np.random.Generator) -> CollectedFeatures:
    """Tapped forward over m randomly chosen task samples (raw residual path)."""
    task_x = np.atleast_2d(np.asarray(task_x, dtype=np.float64))
    if m > task_x.shape[0]:
        raise ParameterError(f"cannot sample m={m} from {task_x.shape[0]} points")
    idx = np.sort(rng.choice(task_x.shape[0], size=m, replace=False))
    L, d = model.cfg.layers, model.cfg.embed_dim
    k_feats = [np.empty((m, d)) for _ in range(L)]
    v_feats = [np.empty((m, d)) for _ in range(L)]
    _, taps = model.forward(task_x[idx], mode="infer", collect_taps=True)
    for i, sample_taps in enumerate(taps):
        for l in range(L):
            k_feats[l][i] = sample_taps[l].q_class
            v_feats[l][i] = sample_taps[l].s_class
    v_bar_last = v_feats[-1].mean(axis=0)
    return CollectedFeatures(k_feats=k_feats, v_feats=v_feats,
                             v_bar_last=v_bar_last, indices=idx)


def _extract_new_rows(existing: Basis, feats: np.ndarray, epsilon: float) -> Basis:
    """Energy-selected directions of the features not yet in the basis."""
    feats = np.asarray(feats, dtype=np.float64)
    scale = float(np.linalg.norm(feats))
    if existing.rank:
        resid = feats - (feats @ existing.vectors.T) @ existing.vectors
    else:
        resid = feats
    svd = thin_svd(resid)
    keep = int(np.count_nonzero(svd.sigma > ZERO_ENERGY_REL * max(scale, 1e-300)))
    if keep == 0:
        return empty_basis(feats.shape[1])
    truncated = SvdResult(u=svd.u[:, :keep], sigma=svd.sigma[:keep], vt=svd.vt[:keep])
    return select_basis(truncated, epsilon)


def update_feature_memory(mem: FeatureMemory, k_feats: list, v_feats: list,
                          epsilon: float) -> list:
    """Append new basis rows per layer and stream; returns per-layer Psi_t.

    The value-stream rows appended at this call are recorded as the new
    task's residual basis. Zero residual energy yields an empty Psi_t.
    """
    new_psi = []
    for lm, kf, vf in zip(mem.layers, k_feats, v_feats):
        k_rows = _extract_new_rows(lm.phi_k, kf, epsilon)
        if k_rows.rank:
            if lm.phi_k.rank:
                lm.phi_k = Basis(np.concatenate([lm.phi_k.vectors, k_rows.vectors]))
            else:
                lm.phi_k = k_rows
        psi_t = _extract_new_rows(lm.phi_v, vf, epsilon)
        lm.psi.append(psi_t)
        new_psi.append(psi_t)
    return new_psi


def project_orthogonal_gradients(grad_a_k: np.ndarray, grad_b_v: np.ndarray,
                                 layer_mem: LayerMemory):
    """Remove forbidden directions from the orthogonal adapters' updates.

    The key-stream factor a_k (r x d) is projected on the right by
    (I - Phi_k^T Phi_k) so the composite satisfies (Delta O^k) Phi_k^T = 0;
    the value-stream factor b_v (d x r) is projected on the left by
    (I - Phi_v^T Phi_v) so Phi_v (Delta O^v) = 0. Empty bases are no-ops.
    """
    phi_k, phi_v = layer_mem.phi_k, layer_mem.phi_v
    if phi_k.rank:
        grad_a_k = grad_a_k - (grad_a_k @ phi_k.vectors.T) @ phi_k.vectors
    else:
        grad_a_k = grad_a_k.copy()
    if phi_v.rank:
        grad_b_v = grad_b_v - phi_v.vectors.T @ (phi_v.vectors @ grad_b_v)
    else:
        grad_b_v = grad_b_v.copy()
    return grad_a_k, grad_b_v


def project_residual_gradients(grad_b_r: np.ndarray, psi_t: Basis) -> np.ndarray:
    """Confine the residual factor update to span(Psi_t); empty Psi freezes it."""
    if psi_t.rank == 0:
        return np.zeros_like(grad_b_r)
    return (psi_t.vectors.T @ psi_t.vectors) @ grad_b_r


def relevance(psi_tau: Basis, v: np.ndarray) -> float:
    """omega_tau = |Psi_tau v| / (r_tau |v|); zero for empty basis or zero v."""
    if psi_tau.rank == 0:
        return 0.0
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return 0.0
    return float(np.linalg.norm(psi_tau.vectors @ v) / (psi_tau.rank * vnorm))


@dataclass
class DynamicMemoryContext:
    """Per-layer relevance weights and assembled modulation matrices."""

    omegas: list           # per layer, (tasks,) array of omega_tau
    omega_mats: list       # per layer, Omega (r' x d) or None when r' = 0

    def omega_gram(self, layer: int) -> Optional[np.ndarray]:
        """Omega^T Omega for one layer (None when no residual rows exist)."""
        om = self.omega_mats[layer]
        if om is None:
            return None
        return om.T @ om


def _layer_dm(lm: LayerMemory, v: np.ndarray):
    """(omegas, Omega, expanded omega per stacked row) for one layer."""
    omegas = np.array([relevance(p, v) for p in lm.psi])
    if lm.total_psi_rank == 0:
        return omegas, None, None
    stack = lm.phi_v.vectors
    w = np.repeat(omegas, [p.rank for p in lm.psi])
    omega_mat = np.sqrt(w)[:, None] * stack
    return omegas, omega_mat, w


def build_dm_context(mem: FeatureMemory, v_per_layer: list) -> DynamicMemoryContext:
    """Assemble the dynamic-memory context for one sample's per-layer v.

    Omega = blockdiag(omega_tau^(1/2) I_{r_tau}) stacked-Psi, so
    Omega^T Omega = sum_tau omega_tau Psi_tau^T Psi_tau.
    """
    omegas, mats = [], []
    for lm, v in zip(mem.layers, v_per_layer):
        om, mat, _ = _layer_dm(lm, v)
        if om.size:
            bad = [o for o, p in zip(om, lm.psi) if p.rank and not (0.0 <= o <= 1.0 / p.rank + 1e-12)]
            if bad:
                raise ParameterError(f"relevance weight outside [0, 1/r]: {bad}")
        omegas.append(om)
        mats.append(mat)
    return DynamicMemoryContext(omegas=omegas, omega_mats=mats)


def dm_residual_hook(mem: FeatureMemory, adapters: AdapterSet) -> Callable:
    """Residual-path modulator for MiniViT.forward(mode="infer_dm").

    Per layer and per sample: v = S_1 = (p a)[0]; the residual value output
    becomes a Omega^T Omega R instead of a R. All-empty Psi disables the
    residual path entirely.
    """

    def hook(layer: int, u: np.ndarray, p: np.ndarray) -> np.ndarray:
        lm = mem.layers[layer]
        ad = adapters.layers[layer]
        if lm.total_psi_rank == 0:
            return np.zeros((u.shape[0], u.shape[1]))
        v = p[0] @ u
        _, _, w = _layer_dm(lm, v)
        stack = lm.phi_v.vectors
        t1 = u @ stack.T
        t2 = (t1 * w) @ stack
        return (t2 @ ad.b_r) @ ad.a_r

    return hook
