"""Miniature single-head vision transformer with hand-written backprop.

The encoder is a stack of pre-norm blocks: layer norm, single-head
attention, output projection, residual add, layer norm, 4x FFN with tanh
GELU, residual add. Attention itself is exactly

    h = softmax(Q K^T / sqrt(d)) V

with Q = u W^q, K = u (W^k + B_k A_k), V = u (W^v + B_v A_v) + V_r, where
u is the normed block input and V_r is the residual-adapter contribution
(u B_r A_r raw during training, or whatever the injected residual hook
returns during dynamic-memory inference). The classifier reads only the
class token (sequence row 0) of the last block's output.

All compute-path products inside the encoder go through the counted
``linalg.matmul``; patch embedding, classifier heads and the backward pass
stay outside the FLOP inventory by design.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import DimensionError, matmul, softmax_rows

__all__ = [
    "EncoderConfig",
    "BlockWeights",
    "LayerAdapters",
    "AdapterSet",
    "Head",
    "ClassifierBank",
    "LayerTaps",
    "NumericFailure",
    "StateError",
    "MiniViT",
    "attention_block",
    "gelu",
    "gelu_grad",
]

LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


class NumericFailure(RuntimeError):
    """Non-finite activations appeared in the forward pass."""

    def __init__(self, layer: int):
        super().__init__(f"non-finite activations in encoder block {layer}")
        self.layer = layer


class StateError(RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)


@dataclass
class EncoderConfig:
    layers: int
    seq_len: int          # patches + 1 class token
    embed_dim: int
    ffn_ratio: int = 4
    patch_side: int = 4
    channels: int = 1

    def __post_init__(self):
        if self.embed_dim < 4:
            raise ValueError("embed_dim must be >= 4")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.ffn_ratio < 1 or self.patch_side < 1 or self.channels < 1:
            raise ValueError("ffn_ratio, patch_side and channels must be positive")

    @property
    def n_patches(self) -> int:
        return self.seq_len - 1

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels

    @property
    def image_side(self) -> int:
        grid = int(round(np.sqrt(self.n_patches)))
        if grid * grid != self.n_patches:
            raise ValueError("seq_len - 1 must be a perfect square")
        return grid * self.patch_side


@dataclass
class BlockWeights:
    """Frozen backbone weights of one encoder block."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray      # d x 4d
    w2: np.ndarray      # 4d x d
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class LayerAdapters:
    """Low-rank adapters of one block.

    Trainable factors are a_k, b_v and b_r; b_k, a_v and a_r stay frozen at
    their random initialization so each per-task composite update is a
    product of a step matrix with a constant factor, which makes the
    orthogonality of projected updates exact rather than first order.
    """

    a_k: np.ndarray     # r x d, trainable
    b_k: np.ndarray     # d x r, frozen
    a_v: np.ndarray     # r x d, frozen
    b_v: np.ndarray     # d x r, trainable
    a_r: np.ndarray     # r x d, frozen
    b_r: np.ndarray     # d x r, trainable

    @property
    def rank(self) -> int:
        return self.a_k.shape[0]

    def o_k(self) -> np.ndarray:
        return self.b_k @ self.a_k

    def o_v(self) -> np.ndarray:
        return self.b_v @ self.a_v

    def r_mat(self) -> np.ndarray:
        return self.b_r @ self.a_r


@dataclass
class AdapterSet:
    layers: list
    rank: int


@dataclass
class Head:
    w: np.ndarray        # d x C
    b: np.ndarray        # C
    label_base: int

    @property
    def classes(self) -> int:
        return self.w.shape[1]


@dataclass
class ClassifierBank:
    heads: list = field(default_factory=list)

    def total_classes(self) -> int:
        return sum(h.classes for h in self.heads)

    def ranges(self) -> list:
        out = []
        start = 0
        for h in self.heads:
            out.append((start, start + h.classes))
            start += h.classes
        return out


@dataclass
class LayerTaps:
    q_class: np.ndarray   # Q row 0
    s_class: np.ndarray   # (P u) row 0
    a_in: np.ndarray      # activation entering the attention weights
    h_out: np.ndarray     # softmax(QK^T/sqrt(d)) V


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def _layer_norm_backward(dout, xhat, inv, g):
    dxhat = dout * g
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    dg = (dout * xhat).sum(axis=0)
    db = dout.sum(axis=0)
    return dx, dg, db


class MiniViT:
    """Patch embedding + L attention blocks + expanding classifier bank."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        scale = 1.0 / np.sqrt(d)
        self.patch_w = rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_dim), (cfg.patch_dim, d))
        self.cls = rng.normal(0.0, 0.02, d)
        self.pos = rng.normal(0.0, 0.02, (cfg.seq_len, d))
        self.blocks = []
        for _ in range(cfg.layers):
            self.blocks.append(BlockWeights(
                wq=rng.normal(0.0, scale, (d, d)),
                wk=rng.normal(0.0, scale, (d, d)),
                wv=rng.normal(0.0, scale, (d, d)),
                wo=rng.normal(0.0, scale, (d, d)),
                w1=rng.normal(0.0, scale, (d, cfg.ffn_ratio * d)),
                w2=rng.normal(0.0, 1.0 / np.sqrt(cfg.ffn_ratio * d), (cfg.ffn_ratio * d, d)),
                ln1_g=np.ones(d), ln1_b=np.zeros(d),
                ln2_g=np.ones(d), ln2_b=np.zeros(d),
            ))
        self.adapters: Optional[AdapterSet] = None
        self.bank = ClassifierBank()
        self._cache = None

    # -- construction ------------------------------------------------------

    def attach_adapters(self, rank: int, rng: np.random.Generator):
        d = self.cfg.embed_dim
        if rank > d // 2:
            raise ValueError(f"adapter rank {rank} exceeds d/2 = {d // 2}")
        scale = 1.0 / np.sqrt(d)
        layers = []
        for _ in range(self.cfg.layers):
            layers.append(LayerAdapters(
                a_k=np.zeros((rank, d)),
                b_k=rng.normal(0.0, scale, (d, rank)),
                a_v=rng.normal(0.0, scale, (rank, d)),
                b_v=np.zeros((d, rank)),
                a_r=rng.normal(0.0, scale, (rank, d)),
                b_r=np.zeros((d, rank)),
            ))
        self.adapters = AdapterSet(layers=layers, rank=rank)

    def add_head(self, num_classes: int, label_base: int):
        d = self.cfg.embed_dim
        self.bank.heads.append(Head(w=np.zeros((d, num_classes)),
                                    b=np.zeros(num_classes),
                                    label_base=label_base))

    # -- parameter access ----------------------------------------------------

    def param(self, key: str) -> np.ndarray:
        """Live array behind a flat parameter key (adapters, heads, backbone)."""
        if key == "patch.w":
            return self.patch_w
        if key == "cls":
            return self.cls
        if key == "pos":
            return self.pos
        if key.startswith("head"):
            idx, attr = key[4:].split(".")
            return getattr(self.bank.heads[int(idx)], attr)
        layer, attr = key.split(".")
        l = int(layer[1:])
        if attr in ("a_k", "b_k", "a_v", "b_v", "a_r", "b_r"):
            if self.adapters is None:
                raise KeyError(key)
            return getattr(self.adapters.layers[l], attr)
        return getattr(self.blocks[l], attr)

    def adapter_keys(self, trainable_only: bool = False) -> list:
        if self.adapters is None:
            return []
        attrs = ("a_k", "b_v", "b_r") if trainable_only else ("a_k", "b_k", "a_v", "b_v", "a_r", "b_r")
        return [f"L{l}.{a}" for l in range(self.cfg.layers) for a in attrs]

    def backbone_keys(self) -> list:
        keys = ["patch.w", "cls", "pos"]
        for l in range(self.cfg.layers):
            keys += [f"L{l}.{a}" for a in
                     ("wq", "wk", "wv", "wo", "w1", "w2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")]
        return keys

    def backbone_fingerprint(self) -> str:
        h = hashlib.sha256()
        for key in self.backbone_keys():
            h.update(np.ascontiguousarray(self.param(key)).tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------

    def _patchify(self, image: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        side, ps, c = cfg.image_side, cfg.patch_side, cfg.channels
        img = np.asarray(image, dtype=np.float64).reshape(side, side, c)
        grid = side // ps
        return (img.reshape(grid, ps, grid, ps, c)
                   .transpose(0, 2, 1, 3, 4)
                   .reshape(cfg.n_patches, cfg.patch_dim))

    def _embed_patches(self, patches: np.ndarray) -> np.ndarray:
        seq = np.empty((self.cfg.seq_len, self.cfg.embed_dim))
        seq[0] = self.cls
        seq[1:] = patches @ self.patch_w
        return seq + self.pos

    def embed(self, image: np.ndarray) -> np.ndarray:
        return self._embed_patches(self._patchify(image))

    def _encode_sample(self, seq: np.ndarray, collect_taps: bool,
                       residual_hook: Optional[Callable], keep_cache: bool):
        d = self.cfg.embed_dim
        inv_sqrt_d = 1.0 / np.sqrt(d)
        taps = [] if collect_taps else None
        cache = [] if keep_cache else None
        x = seq
        for l, blk in enumerate(self.blocks):
            ad = self.adapters.layers[l] if self.adapters is not None else None
            u, xhat1, inv1 = _layer_norm(x, blk.ln1_g, blk.ln1_b)
            q = matmul(u, blk.wq)
            k = matmul(u, blk.wk)
            tk = tv = tr = None
            if ad is not None:
                tk = matmul(u, ad.b_k)
                k = k + matmul(tk, ad.a_k)
            v = matmul(u, blk.wv)
            if ad is not None:
                tv = matmul(u, ad.b_v)
                v = v + matmul(tv, ad.a_v)
            z = matmul(q, k.T) * inv_sqrt_d
            p = softmax_rows(z)
            if ad is not None:
                if residual_hook is not None:
                    v = v + residual_hook(l, u, p)
                else:
                    tr = matmul(u, ad.b_r)
                    v = v + matmul(tr, ad.a_r)
            h = matmul(p, v)
            if not np.all(np.isfinite(h)):
                raise NumericFailure(l)
            if collect_taps:
                taps.append(LayerTaps(q_class=q[0].copy(),
                                      s_class=p[0] @ u,
                                      a_in=u.copy(),
                                      h_out=h.copy()))
            pr = matmul(h, blk.wo)
            y = x + pr
            w, xhat2, inv2 = _layer_norm(y, blk.ln2_g, blk.ln2_b)
            f1 = matmul(w, blk.w1)
            gq = gelu(f1)
            f2 = matmul(gq, blk.w2)
            x_next = y + f2
            if keep_cache:
                cache.append(dict(x=x, xhat1=xhat1, inv1=inv1, u=u, q=q, k=k, v=v,
                                  p=p, h=h, y=y, xhat2=xhat2, inv2=inv2, w=w,
                                  f1=f1, gq=gq, tk=tk, tv=tv, tr=tr))
            x = x_next
        return x, taps, cache

    def class_logits(self, class_emb: np.ndarray) -> np.ndarray:
        if not self.bank.heads:
            raise StateError("classifier bank is empty")
        return np.concatenate([class_emb @ h.w + h.b for h in self.bank.heads])

    def forward(self, images: np.ndarray, mode: str = "infer",
                collect_taps: bool = False,
                residual_hook: Optional[Callable] = None):
        """Batch forward. Returns (logits (b x C_total), list of per-sample taps)."""
        if mode not in ("infer", "infer_dm"):
            raise ValueError(f"unknown forward mode {mode!r}")
        if mode == "infer_dm" and residual_hook is None:
            raise ValueError("infer_dm requires a residual hook")
        if mode == "infer":
            residual_hook = None
        if not self.bank.heads:
            raise StateError("classifier bank is empty")
        images = np.atleast_2d(np.asarray(images, dtype=np.float64))
        logits = np.empty((images.shape[0], self.bank.total_classes()))
        taps_out = [] if collect_taps else None
        for i, img in enumerate(images):
            out, taps, _ = self._encode_sample(self.embed(img), collect_taps,
                                               residual_hook, keep_cache=False)
            logits[i] = self.class_logits(out[0])
            if collect_taps:
                taps_out.append(taps)
        return logits, taps_out

    # -- training ------------------------------------------------------------

    def train_forward(self, images: np.ndarray, labels_local: np.ndarray,
                      head_idx: int) -> float:
        """Cross-entropy forward over the given head; retains state for backward."""
        images = np.atleast_2d(np.asarray(images, dtype=np.float64))
        labels_local = np.asarray(labels_local, dtype=np.int64)
        head = self.bank.heads[head_idx]
        caches, probs = [], []
        loss = 0.0
        for img, y in zip(images, labels_local):
            patches = self._patchify(img)
            out, _, cache = self._encode_sample(self._embed_patches(patches),
                                                False, None, keep_cache=True)
            e = out[0]
            z = e @ head.w + head.b
            zs = z - z.max()
            pz = np.exp(zs)
            pz /= pz.sum()
            loss -= np.log(max(pz[y], 1e-300))
            caches.append((cache, e, patches))
            probs.append(pz)
        self._cache = dict(caches=caches, probs=probs, labels=labels_local,
                           head_idx=head_idx, batch=images.shape[0])
        return float(loss / images.shape[0])

    def backward(self, train_backbone: bool = False) -> dict:
        """Gradients of the cached batch loss.

        Continual mode returns adapter factors plus the current head only;
        the frozen backbone has no entries. ``train_backbone=True`` (pretext
        phase) adds every backbone tensor.
        """
        if self._cache is None:
            raise StateError("backward called without a pending train_forward")
        state = self._cache
        self._cache = None
        head = self.bank.heads[state["head_idx"]]
        b = state["batch"]
        grads = {}
        if self.adapters is not None:
            for key in self.adapter_keys():
                grads[key] = np.zeros_like(self.param(key))
        grads["head.w"] = np.zeros_like(head.w)
        grads["head.b"] = np.zeros_like(head.b)
        if train_backbone:
            for key in self.backbone_keys():
                grads[key] = np.zeros_like(self.param(key))
        inv_sqrt_d = 1.0 / np.sqrt(self.cfg.embed_dim)

        for (cache, e, patches), pz, y in zip(state["caches"], state["probs"], state["labels"]):
            dz = pz.copy()
            dz[y] -= 1.0
            dz /= b
            grads["head.w"] += np.outer(e, dz)
            grads["head.b"] += dz
            dx = np.zeros((self.cfg.seq_len, self.cfg.embed_dim))
            dx[0] = head.w @ dz
            for l in range(self.cfg.layers - 1, -1, -1):
                blk = self.blocks[l]
                ad = self.adapters.layers[l] if self.adapters is not None else None
                c = cache[l]
                # x_next = y + f2
                dy = dx
                df2 = dx
                dgq = df2 @ blk.w2.T
                df1 = dgq * gelu_grad(c["f1"])
                dw = df1 @ blk.w1.T
                if train_backbone:
                    grads[f"L{l}.w2"] += c["gq"].T @ df2
                    grads[f"L{l}.w1"] += c["w"].T @ df1
                dy2, dg2, db2 = _layer_norm_backward(dw, c["xhat2"], c["inv2"], blk.ln2_g)
                if train_backbone:
                    grads[f"L{l}.ln2_g"] += dg2
                    grads[f"L{l}.ln2_b"] += db2
                dy = dy + dy2
                # y = x + h wo
                dpr = dy
                dh = dpr @ blk.wo.T
                if train_backbone:
                    grads[f"L{l}.wo"] += c["h"].T @ dpr
                # h = p v
                dp = dh @ c["v"].T
                dv = c["p"].T @ dh
                # p = softmax(z)
                dzz = c["p"] * (dp - (dp * c["p"]).sum(axis=1, keepdims=True))
                dq = (dzz @ c["k"]) * inv_sqrt_d
                dk = (dzz.T @ c["q"]) * inv_sqrt_d
                du = dq @ blk.wq.T + dk @ blk.wk.T + dv @ blk.wv.T
                if train_backbone:
                    grads[f"L{l}.wq"] += c["u"].T @ dq
                    grads[f"L{l}.wk"] += c["u"].T @ dk
                    grads[f"L{l}.wv"] += c["u"].T @ dv
                if ad is not None:
                    # K adapter: k += (u b_k) a_k
                    dtk = dk @ ad.a_k.T
                    grads[f"L{l}.a_k"] += c["tk"].T @ dk
                    grads[f"L{l}.b_k"] += c["u"].T @ dtk
                    du += dtk @ ad.b_k.T
                    # V adapter: v += (u b_v) a_v
                    dtv = dv @ ad.a_v.T
                    grads[f"L{l}.a_v"] += c["tv"].T @ dv
                    grads[f"L{l}.b_v"] += c["u"].T @ dtv
                    du += dtv @ ad.b_v.T
                    # residual adapter: v += (u b_r) a_r
                    dtr = dv @ ad.a_r.T
                    grads[f"L{l}.a_r"] += c["tr"].T @ dv
                    grads[f"L{l}.b_r"] += c["u"].T @ dtr
                    du += dtr @ ad.b_r.T
                dxa, dg1, db1 = _layer_norm_backward(du, c["xhat1"], c["inv1"], blk.ln1_g)
                if train_backbone:
                    grads[f"L{l}.ln1_g"] += dg1
                    grads[f"L{l}.ln1_b"] += db1
                dx = dy + dxa
            if train_backbone:
                grads["cls"] += dx[0]
                grads["pos"] += dx
                grads["patch.w"] += patches.T @ dx[1:]
        return grads


def attention_block(a: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                    wv: np.ndarray, o_k: Optional[np.ndarray] = None,
                    o_v: Optional[np.ndarray] = None,
                    r_v: Optional[np.ndarray] = None):
    """Single attention evaluation h = softmax(Q K^T / sqrt(d)) V.

    Adapter composites (o_k on the key weights, o_v and r_v on the value
    weights) are optional d x d additions. Returns (h, taps).
    """
    a = np.asarray(a, dtype=np.float64)
    d = a.shape[1]
    if wq.shape != (d, d) or wk.shape != (d, d) or wv.shape != (d, d):
        raise DimensionError("attention weights must be d x d")
    q = matmul(a, wq)
    k_eff = wk if o_k is None else wk + o_k
    v_eff = wv if o_v is None else wv + o_v
    k = matmul(a, k_eff)
    v = matmul(a, v_eff)
    if r_v is not None:
        v = v + matmul(a, r_v)
    p = softmax_rows(matmul(q, k.T) / np.sqrt(d))
    h = matmul(p, v)
    if not np.all(np.isfinite(h)):
        raise NumericFailure(0)
    taps = LayerTaps(q_class=q[0].copy(), s_class=p[0] @ a, a_in=a.copy(),
                     h_out=h.copy())
    return h, taps
