import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eavit import model as M
from eavit import tensor as T
from eavit.model import EAViT, ModelConfig
from eavit.tensor import Tensor
from oracles import ea_loop, sa_loop


def tiny(**kw) -> ModelConfig:
    base = dict(image_size=16, patch_size=8, projection_dim=8, layers=2, heads=2,
                memory_size=3, head_hidden=[6], classes=3)
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.num_patches, cfg.patch_dim, cfg.head_dim, cfg.mlp_encoder_hidden) == (16, 4096, 4, 64)

    @pytest.mark.parametrize("kw, msg", [
        (dict(image_size=250), "divisible"),
        (dict(heads=5), "heads"),
        (dict(channels=2), "channels"),
        (dict(attention_kind="linear"), "attention_kind"),
        (dict(layers=0), "positive"),
    ])
    def test_invalid(self, kw, msg):
        with pytest.raises(ValueError, match=msg):
            ModelConfig(**kw)


class TestPatchify:
    def test_default_geometry(self):
        img = np.zeros((256, 256), np.uint8)
        assert M.patchify(img, 64).shape == (16, 4096)
        assert M.patchify(img, 16).shape == (256, 256)

    def test_row_major_order(self):
        img = np.zeros((4, 4), np.uint8)
        img[0:2, 2:4] = 255
        p = M.patchify(img, 2)
        np.testing.assert_array_equal(p.max(axis=1), [0, 1, 0, 0])

    def test_scaled_to_unit_interval(self):
        p = M.patchify(np.array([[0, 255], [51, 102]], np.uint8), 2)
        np.testing.assert_allclose(p, [[0.0, 1.0, 0.2, 0.4]], atol=1e-7)

    @pytest.mark.parametrize("channels", [1, 3])
    def test_bijection(self, channels):
        rng = np.random.default_rng(0)
        shape = (32, 48) + ((channels,) if channels == 3 else ())
        img = rng.integers(0, 256, shape).astype(np.float64)
        p = M.patchify(img, 16)
        assert p.shape == (6, 256 * channels)
        np.testing.assert_array_equal(M.unpatchify(p, 16, 32, 48, channels), img)
        # every pixel appears exactly once
        assert np.array_equal(np.sort(p.ravel()), np.sort(img.ravel()))

    def test_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            M.patchify(np.zeros((10, 10)), 4)

    def test_batched(self):
        imgs = np.zeros((3, 16, 16), np.uint8)
        assert M.patchify(imgs, 8).shape == (3, 4, 64)


class TestEmbed:
    def test_shape(self):
        cfg = tiny()
        params = M.init_params(cfg, dtype=np.float64)
        z = M.embed(Tensor(np.zeros((2, cfg.num_patches, cfg.patch_dim))), params)
        assert z.shape == (2, cfg.num_patches + 1, cfg.projection_dim)

    def test_construction(self):
        cfg = tiny()
        rng = np.random.default_rng(1)
        params = M.init_params(cfg, dtype=np.float64)
        params["class_token"].data[:] = rng.standard_normal(8)
        params["pos_embed"].data[:] = rng.standard_normal((5, 8))
        x = rng.random((1, 4, 64))
        z = M.embed(Tensor(x), params).data[0]
        np.testing.assert_allclose(z[0], params["class_token"].data + params["pos_embed"].data[0])
        np.testing.assert_allclose(z[1:], x[0] @ params["patch_proj"].data + params["pos_embed"].data[1:])

    def test_wrong_width(self):
        params = M.init_params(tiny(), dtype=np.float64)
        with pytest.raises(ValueError, match="patch_dim"):
            M.embed(Tensor(np.zeros((1, 4, 10))), params)


class TestExternalAttention:
    def test_single_token_gives_memory_mean(self):
        rng = np.random.default_rng(2)
        Mk, Mv = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        out = M.external_attention(Tensor(rng.standard_normal((1, 3))), Tensor(Mk), Tensor(Mv)).data
        np.testing.assert_allclose(out[0], Mv.mean(axis=0), atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        A = M.attention_map(Tensor(rng.standard_normal((2, 7, 4)) * 5), Tensor(rng.standard_normal((6, 4)))).data
        np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(A >= 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_t, d, S = rng.integers(1, 7), rng.integers(1, 5), rng.integers(1, 6)
        F, Mk, Mv = rng.standard_normal((n_t, d)), rng.standard_normal((S, d)), rng.standard_normal((S, d))
        got = M.external_attention(Tensor(F), Tensor(Mk), Tensor(Mv)).data
        np.testing.assert_allclose(got, ea_loop(F, Mk, Mv), atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 5), st.floats(-2, 2))
    def test_output_in_convex_hull_of_value_memory(self, seed, n_t, S, log_scale):
        rng = np.random.default_rng(seed)
        F = rng.standard_normal((n_t, 3)) * 10.0 ** log_scale
        Mk, Mv = rng.standard_normal((S, 3)), rng.standard_normal((S, 3))
        out = M.external_attention(Tensor(F), Tensor(Mk), Tensor(Mv)).data
        assert np.all(out >= Mv.min(axis=0) - 1e-9)
        assert np.all(out <= Mv.max(axis=0) + 1e-9)
        # the rows lie in the row space of M_v
        coef, *_ = np.linalg.lstsq(Mv.T, out.T, rcond=None)
        np.testing.assert_allclose(Mv.T @ coef, out.T, atol=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            M.external_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))


class TestMultiHead:
    def test_one_head_is_plain_ea_then_projection(self):
        rng = np.random.default_rng(4)
        F, Mk, Mv, Wo = (rng.standard_normal(s) for s in [(5, 4), (3, 4), (3, 4), (4, 4)])
        got = M.multi_head_ea(Tensor(F), Tensor(Mk), Tensor(Mv), Tensor(Wo), 1).data
        np.testing.assert_allclose(got, ea_loop(F, Mk, Mv) @ Wo, atol=1e-6)

    def test_two_heads_share_memories(self):
        rng = np.random.default_rng(5)
        F, Mk, Mv, Wo = (rng.standard_normal(s) for s in [(5, 6), (4, 3), (4, 3), (6, 6)])
        want = np.concatenate([ea_loop(F[:, :3], Mk, Mv), ea_loop(F[:, 3:], Mk, Mv)], axis=1) @ Wo
        got = M.multi_head_ea(Tensor(F), Tensor(Mk), Tensor(Mv), Tensor(Wo), 2).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_indivisible(self):
        with pytest.raises(ValueError, match="heads"):
            M.multi_head_ea(Tensor(np.ones((2, 5))), Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))),
                            Tensor(np.eye(5)), 2)


class TestSelfAttention:
    @pytest.mark.parametrize("heads", [1, 2])
    def test_loop_oracle(self, heads):
        rng = np.random.default_rng(6 + heads)
        F = rng.standard_normal((5, 4))
        W = [rng.standard_normal((4, 4)) for _ in range(4)]
        got = M.self_attention(Tensor(F), *map(Tensor, W), heads).data
        np.testing.assert_allclose(got, sa_loop(F, *W, heads), atol=1e-6)

    def test_single_token_is_value_projection(self):
        rng = np.random.default_rng(9)
        F = rng.standard_normal((1, 4))
        Wq, Wk, Wv, Wo = (rng.standard_normal((4, 4)) for _ in range(4))
        got = M.self_attention(Tensor(F), Tensor(Wq), Tensor(Wk), Tensor(Wv), Tensor(Wo), 2).data
        np.testing.assert_allclose(got, F @ Wv @ Wo, atol=1e-12)


class TestEncoderBlock:
    def test_shape_preserved(self):
        cfg = tiny()
        params = M.init_params(cfg, dtype=np.float64)
        z = Tensor(np.random.default_rng(10).standard_normal((2, 5, 8)))
        assert M.encoder_block(z, params, 0, cfg).shape == (2, 5, 8)

    @pytest.mark.parametrize("kind", ["external", "self"])
    def test_zero_residual_weights_give_identity(self, kind):
        cfg = tiny(attention_kind=kind)
        params = M.init_params(cfg, dtype=np.float64)
        for i in range(cfg.layers):
            for leaf in ("attn.w_o", "mlp.w2", "mlp.b2"):
                params[f"blocks.{i}.{leaf}"].data[:] = 0.0
        x = np.random.default_rng(11).random((1, 4, 64))
        z = M.encode(Tensor(x), params, cfg).data
        np.testing.assert_allclose(z, M.embed(Tensor(x), params).data, atol=1e-12)

    def test_gradients_float32(self):
        # the 32-bit backward pass is compared against differences taken in
        # 64-bit on the same values, so the oracle adds no float32 rounding
        cfg = tiny()
        rng = np.random.default_rng(12)
        params = M.init_params(cfg, seed=1, dtype=np.float32)
        for name in ("ln1.bias", "ln2.bias", "mlp.b1", "mlp.b2"):
            params["blocks.0." + name].data[:] = rng.standard_normal(params["blocks.0." + name].shape) * 0.1
        z = Tensor(rng.standard_normal((5, 8)).astype(np.float32), requires_grad=True)
        w = rng.standard_normal((5, 8))
        block = {"z": z, **{k: v for k, v in params.items() if k.startswith("blocks.0.")}}

        T.backward((M.encoder_block(z, params, 0, cfg) * Tensor(w.astype(np.float32))).sum())
        wide = {k: Tensor(v.data.astype(np.float64)) for k, v in params.items()}
        z64 = Tensor(z.data.astype(np.float64))
        loss64 = lambda: (M.encoder_block(z64, wide, 0, cfg) * Tensor(w)).sum()  # noqa: E731
        for name, t in block.items():
            target = z64 if name == "z" else wide[name]
            numeric = T._central_differences(loss64, target, 1e-6)
            analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
            if name == "blocks.0.ln1.bias":
                # exactly zero in exact arithmetic (the token softmax ignores
                # a shift shared by all tokens), so only rounding is left
                assert np.abs(numeric).max() < 1e-8
                assert np.abs(analytic).max() < 1e-6
                continue
            scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-6)
            assert np.abs(analytic - numeric).max() / scale < 1e-3, name

    def test_wrong_width(self):
        cfg = tiny()
        with pytest.raises(ValueError, match="projection_dim"):
            M.encoder_block(Tensor(np.ones((1, 3, 4))), M.init_params(cfg), 0, cfg)


class TestForward:
    def test_logits_shape(self):
        cfg = tiny()
        model = EAViT(cfg)
        assert model(np.zeros((16, 16), np.uint8)).shape == (1, 3)
        assert model(np.zeros((4, 16, 16), np.uint8)).shape == (4, 3)

    def test_default_config_gives_ten_logits(self):
        model = EAViT(ModelConfig(layers=1))
        img = np.random.default_rng(13).integers(0, 256, (256, 256), dtype=np.uint8)
        logits = model(img).data
        assert logits.shape == (1, 10) and np.all(np.isfinite(logits))

    def test_wrong_image_shape(self):
        with pytest.raises(ValueError, match="image shape"):
            EAViT(tiny())(np.zeros((8, 8), np.uint8))

    def test_deterministic(self):
        img = np.random.default_rng(14).integers(0, 256, (2, 16, 16), dtype=np.uint8)
        a = EAViT(tiny(), seed=3)(img).data
        b = EAViT(tiny(), seed=3)(img).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, EAViT(tiny(), seed=4)(img).data)

    @pytest.mark.parametrize("kind", ["external", "self"])
    def test_patch_permutation_invariance_without_positions(self, kind):
        cfg = tiny(image_size=32, attention_kind=kind)
        model = EAViT(cfg, seed=5)
        model.params["pos_embed"].data[:] = 0.0
        rng = np.random.default_rng(15)
        x = rng.random((1, 16, 64)).astype(np.float32)
        perm = rng.permutation(16)
        a = model.forward_patches(Tensor(x)).data
        b = model.forward_patches(Tensor(x[:, perm])).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_predict_proba(self):
        p = EAViT(tiny()).predict_proba(np.zeros((3, 16, 16), np.uint8))
        np.testing.assert_allclose(p.sum(axis=1), 1.0)


class TestParamCount:
    def test_default_hand_sum(self):
        # embedding 64*64*32 + 32 + 17*32                      = 131,648
        # block     4*32 + (2*64*4 + 32*32) + (32*64+64+64*32+32) = 5,856
        # head      (32*2048+2048) + (2048*1024+1024) + (1024*10+10) = 2,176,010
        assert M.param_count(ModelConfig()) == 131_648 + 16 * 5_856 + 64 + 2_176_010 == 2_401_418

    @pytest.mark.parametrize("kind", ["external", "self"])
    def test_matches_allocated(self, kind):
        for cfg in (tiny(attention_kind=kind), ModelConfig(layers=2, attention_kind=kind)):
            assert EAViT(cfg).num_parameters() == M.param_count(cfg)

    def test_layers_add_linearly(self):
        counts = [M.param_count(ModelConfig(layers=n)) for n in (1, 2, 3)]
        assert counts[2] - counts[1] == counts[1] - counts[0] == 5_856

    def test_self_attention_block_difference(self):
        ea, sa = ModelConfig(layers=1), ModelConfig(layers=1, attention_kind="self")
        assert M.param_count(sa) - M.param_count(ea) == 3 * 32 * 32 - 2 * 64 * 4
