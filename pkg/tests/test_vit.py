import numpy as np
import pytest

from duallora import linalg as la
from duallora.vit import (
    EncoderConfig,
    MiniViT,
    NumericFailure,
    StateError,
    attention_block,
)

from oracles import central_difference, rel_err


def small_model(layers=2, d=8, rank=2, seed=0, heads=((2, 0),)):
    cfg = EncoderConfig(layers=layers, seq_len=5, embed_dim=d, patch_side=4)
    rng = np.random.default_rng(seed)
    model = MiniViT(cfg, rng)
    model.attach_adapters(rank, rng)
    for classes, base in heads:
        model.add_head(classes, base)
    return model, rng


class TestAttentionBlock:
    def test_single_token_identity_weights(self):
        d = 4
        x = np.random.default_rng(0).standard_normal((1, d))
        h, taps = attention_block(x, np.eye(d), np.eye(d), np.eye(d))
        assert np.allclose(h, x)
        assert np.allclose(taps.s_class, x[0])

    def test_zero_value_weights(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 4))
        h, _ = attention_block(a, rng.standard_normal((4, 4)),
                               rng.standard_normal((4, 4)), np.zeros((4, 4)))
        assert np.max(np.abs(h)) == 0.0

    def test_matches_straight_line_formula(self):
        rng = np.random.default_rng(2)
        n, d = 3, 4
        a = rng.standard_normal((n, d))
        wq, wk, wv = (rng.standard_normal((d, d)) for _ in range(3))
        o_k, o_v, r_v = (0.1 * rng.standard_normal((d, d)) for _ in range(3))
        h, taps = attention_block(a, wq, wk, wv, o_k=o_k, o_v=o_v, r_v=r_v)
        # independent straight-line evaluation
        q = a @ wq
        k = a @ (wk + o_k)
        v = a @ (wv + o_v) + a @ r_v
        z = q @ k.T / np.sqrt(d)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        assert rel_err(h, p @ v) <= 1e-12
        assert rel_err(taps.q_class, q[0]) <= 1e-15
        assert rel_err(taps.s_class, (p @ a)[0]) <= 1e-15

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 6)) * 3
        _, taps = attention_block(a, rng.standard_normal((6, 6)),
                                  rng.standard_normal((6, 6)),
                                  rng.standard_normal((6, 6)))
        # recompute probabilities from the tapped pieces
        q = a @ rng.standard_normal((6, 6))  # not the same; use direct check instead
        z = (a @ np.eye(6)) @ (a @ np.eye(6)).T / np.sqrt(6)
        p = la.softmax_rows(z)
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12

    def test_nan_raises_numeric_failure(self):
        a = np.array([[np.inf, 0.0, 0.0, 0.0]])
        with pytest.raises(NumericFailure):
            attention_block(a, np.eye(4), np.eye(4), np.eye(4))


class TestForward:
    def test_logit_length_single_head(self):
        model, rng = small_model(heads=((2, 0),))
        x = rng.standard_normal((3, model.cfg.image_side**2))
        logits, _ = model.forward(x)
        assert logits.shape == (3, 2)

    def test_logit_length_expanding_bank(self):
        model, rng = small_model(heads=((2, 0), (2, 2), (2, 4)))
        x = rng.standard_normal((1, model.cfg.image_side**2))
        logits, _ = model.forward(x)
        assert logits.shape == (1, 6)

    def test_deterministic_logits(self):
        model, rng = small_model()
        x = rng.standard_normal((2, model.cfg.image_side**2))
        l1, _ = model.forward(x)
        l2, _ = model.forward(x)
        assert np.array_equal(l1, l2)

    def test_empty_bank_errors(self):
        model, rng = small_model(heads=())
        x = rng.standard_normal((1, model.cfg.image_side**2))
        with pytest.raises(StateError):
            model.forward(x)

    def test_zero_adapters_match_bare_forward(self):
        cfg = EncoderConfig(layers=2, seq_len=5, embed_dim=8, patch_side=4)
        bare = MiniViT(cfg, np.random.default_rng(5))
        bare.add_head(2, 0)
        adapted = MiniViT(cfg, np.random.default_rng(5))
        adapted.add_head(2, 0)
        adapted.attach_adapters(2, np.random.default_rng(99))
        # trainable factors are zero at init, so every composite is zero
        x = np.random.default_rng(6).standard_normal((2, cfg.image_side**2))
        lb, _ = bare.forward(x)
        la_, _ = adapted.forward(x)
        assert np.array_equal(lb, la_)

    def test_flop_counter_matches_formula_bare(self):
        for layers, d in [(1, 8), (2, 8), (2, 16)]:
            cfg = EncoderConfig(layers=layers, seq_len=5, embed_dim=d, patch_side=4)
            model = MiniViT(cfg, np.random.default_rng(7))
            model.add_head(2, 0)
            b = 3
            x = np.random.default_rng(8).standard_normal((b, cfg.image_side**2))
            with la.FLOPS:
                model.forward(x)
                got = la.FLOPS.total
            n = cfg.seq_len
            assert got == layers * (24 * b * n * d**2 + 4 * b * n**2 * d)

    def test_flop_counter_with_adapters(self):
        layers, d, r, b = 2, 8, 2, 2
        model, rng = small_model(layers=layers, d=d, rank=r)
        x = rng.standard_normal((b, model.cfg.image_side**2))
        with la.FLOPS:
            model.forward(x)
            got = la.FLOPS.total
        n = model.cfg.seq_len
        base = layers * (24 * b * n * d**2 + 4 * b * n**2 * d)
        assert got == base + 12 * layers * b * n * d * r


class TestBackward:
    def test_backward_without_forward(self):
        model, _ = small_model()
        with pytest.raises(StateError):
            model.backward()

    def test_frozen_backbone_absent_from_grads(self):
        model, rng = small_model()
        x = rng.standard_normal((2, model.cfg.image_side**2))
        model.train_forward(x, np.array([0, 1]), head_idx=0)
        grads = model.backward()
        assert "L0.wq" not in grads
        assert "patch.w" not in grads
        assert set(grads) == set(model.adapter_keys()) | {"head.w", "head.b"}

    def test_unused_head_gets_no_gradient(self):
        model, rng = small_model(heads=((2, 0), (2, 2)))
        x = rng.standard_normal((2, model.cfg.image_side**2))
        model.train_forward(x, np.array([0, 1]), head_idx=1)
        grads = model.backward()
        # gradients are reported for the trained head only
        assert grads["head.w"].shape == model.bank.heads[1].w.shape
        # loss does not depend on head 0 at all
        w0 = model.bank.heads[0].w
        loss_a = model.train_forward(x, np.array([0, 1]), head_idx=1)
        model.backward()
        w0 += 123.0
        loss_b = model.train_forward(x, np.array([0, 1]), head_idx=1)
        model.backward()
        w0 -= 123.0
        assert loss_a == loss_b

    def _randomize_adapters(self, model, rng, scale=0.05):
        for key in model.adapter_keys():
            p = model.param(key)
            p += scale * rng.standard_normal(p.shape)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_match_finite_differences(self, seed):
        model, _ = small_model(layers=2, d=8, rank=2, seed=seed)
        rng = np.random.default_rng(100 + seed)
        self._randomize_adapters(model, rng)
        head = model.bank.heads[0]
        head.w += 0.1 * rng.standard_normal(head.w.shape)
        head.b += 0.1 * rng.standard_normal(head.b.shape)
        x = rng.standard_normal((3, model.cfg.image_side**2))
        y = np.array([0, 1, 0])
        model.train_forward(x, y, head_idx=0)
        grads = model.backward()

        def loss():
            val = model.train_forward(x, y, head_idx=0)
            model._cache = None
            return val

        for key in list(model.adapter_keys()) + ["head.w", "head.b"]:
            target = model.param(key) if not key.startswith("head.") else getattr(head, key.split(".")[1])
            fd = central_difference(loss, target, h=1e-5)
            assert rel_err(grads[key], fd) <= 1e-4, key

    def test_backbone_gradients_match_finite_differences(self):
        model, _ = small_model(layers=1, d=8, rank=2, seed=3)
        rng = np.random.default_rng(42)
        self._randomize_adapters(model, rng)
        x = rng.standard_normal((2, model.cfg.image_side**2))
        y = np.array([0, 1])
        model.train_forward(x, y, head_idx=0)
        grads = model.backward(train_backbone=True)

        def loss():
            val = model.train_forward(x, y, head_idx=0)
            model._cache = None
            return val

        for key in ["L0.wq", "L0.wo", "L0.w1", "L0.ln1_g", "L0.ln2_b", "patch.w", "cls", "pos"]:
            fd = central_difference(loss, model.param(key), h=1e-5)
            assert rel_err(grads[key], fd) <= 1e-4, key

    def test_rank_cap(self):
        cfg = EncoderConfig(layers=1, seq_len=5, embed_dim=8, patch_side=4)
        model = MiniViT(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError):
            model.attach_adapters(5, np.random.default_rng(0))
