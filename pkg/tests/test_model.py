"""Tests for the transformer classifier against independent numpy oracles."""

import math

import numpy as np
import pytest
from scipy.special import erf

from vitkit import model as M
from vitkit import tensor as T
from vitkit.model import (
    ClassProbabilities,
    Label,
    ModelParameters,
    ViTConfig,
    VisionTransformer,
    config_from_preset,
    init_parameters,
    parameter_shapes,
)
from vitkit.tensor import RandomSource, Tensor


# -- reference implementations, written independently of the package code ----


def oracle_patchify(image, p):
    """Index-by-index patch extraction: grid row-major, then (row, col, channel)."""
    c, h, w = image.shape
    rows = []
    for by in range(h // p):
        for bx in range(w // p):
            vals = []
            for dy in range(p):
                for dx in range(p):
                    for ch in range(c):
                        vals.append(image[ch, by * p + dy, bx * p + dx])
            rows.append(vals)
    return np.array(rows)


def oracle_layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def oracle_gelu(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def oracle_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def oracle_attention(x, w, heads):
    seq, dim = x.shape
    hd = dim // heads
    q = x @ w["wq"] + w["bq"]
    k = x @ w["wk"] + w["bk"]
    v = x @ w["wv"] + w["bv"]
    outs, maps = [], []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        a = oracle_softmax(scores)
        outs.append(a @ v[:, sl])
        maps.append(a)
    return np.concatenate(outs, axis=1) @ w["wo"] + w["bo"], np.stack(maps)


def oracle_block(x, w, heads):
    attended, _ = oracle_attention(oracle_layer_norm(x, w["ln1_gamma"], w["ln1_beta"]), w, heads)
    x = x + attended
    h = oracle_layer_norm(x, w["ln2_gamma"], w["ln2_beta"])
    return x + (oracle_gelu(h @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"])


def oracle_forward(image, arrays, cfg):
    patches = oracle_patchify(image, cfg.patch_size)
    tokens = patches @ arrays["patch_proj.weight"] + arrays["patch_proj.bias"]
    x = np.vstack([arrays["cls_token"], tokens]) + arrays["pos_embed"]
    for i in range(cfg.num_layers):
        w = {
            short: arrays[f"blocks.{i}.{long}"]
            for short, long in M._BLOCK_KEYS.items()
        }
        x = oracle_block(x, w, cfg.num_heads)
    x = oracle_layer_norm(x, arrays["final_ln.gamma"], arrays["final_ln.beta"])
    logits = x[0] @ arrays["head.weight"] + arrays["head.bias"]
    return oracle_softmax(logits)


def oracle_param_count(cfg):
    d, m, c = cfg.embed_dim, cfg.mlp_dim, cfg.num_classes
    per_block = 4 * (d * d + d) + 4 * d + (d * m + m) + (m * d + d)
    return (
        cfg.patch_dim * d + d      # patch projection
        + d                        # class token
        + (cfg.num_patches + 1) * d
        + cfg.num_layers * per_block
        + 2 * d                    # final norm
        + d * c + c                # head
    )


TINY = ViTConfig(image_size=8, patch_size=4, embed_dim=16, num_heads=2, num_layers=2, mlp_dim=32)


@pytest.fixture
def tiny_model():
    return VisionTransformer.initialize(TINY, RandomSource(1234))


def random_weights(rng, dim, identity_v=False, identity_o=False):
    w = {
        "wq": rng.normal(size=(dim, dim)) * 0.3,
        "wk": rng.normal(size=(dim, dim)) * 0.3,
        "wv": np.eye(dim) if identity_v else rng.normal(size=(dim, dim)) * 0.3,
        "wo": np.eye(dim) if identity_o else rng.normal(size=(dim, dim)) * 0.3,
        "bq": rng.normal(size=dim) * 0.1,
        "bk": rng.normal(size=dim) * 0.1,
        "bv": np.zeros(dim) if identity_v else rng.normal(size=dim) * 0.1,
        "bo": np.zeros(dim) if identity_o else rng.normal(size=dim) * 0.1,
    }
    return w


class TestViTConfig:
    def test_derived_sizes(self):
        cfg = ViTConfig()
        assert (cfg.num_patches, cfg.patch_dim, cfg.head_dim, cfg.seq_len) == (196, 768, 64, 197)

    def test_tiny_derived_sizes(self):
        assert (TINY.num_patches, TINY.patch_dim, TINY.head_dim) == (4, 48, 8)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"image_size": 10, "patch_size": 4},
            {"embed_dim": 10, "num_heads": 4},
            {"num_classes": 1},
            {"dropout_rate": 1.0},
            {"dropout_rate": -0.1},
            {"num_layers": 0},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            ViTConfig(**kwargs)

    def test_presets(self):
        base = config_from_preset("vit-base-patch16-224")
        assert (base.embed_dim, base.num_layers, base.num_heads, base.mlp_dim) == (768, 12, 12, 3072)
        tiny = config_from_preset("vit-tiny-patch4-8")
        assert tiny == TINY
        with pytest.raises(ValueError, match="unknown preset"):
            config_from_preset("vit-giant")

    def test_dict_round_trip(self):
        cfg = ViTConfig(image_size=32, patch_size=8, embed_dim=24, num_heads=3,
                        num_layers=1, mlp_dim=48)
        assert ViTConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown config fields"):
            ViTConfig.from_dict({"image_size": 8, "bogus": 1})


class TestPatchify:
    def test_ramp_blocks(self):
        image = np.arange(16.0).reshape(1, 4, 4)
        out = M.patchify(Tensor(image), 2).data
        np.testing.assert_array_equal(
            out,
            [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]],
        )

    def test_matches_index_oracle(self):
        rng = np.random.default_rng(0)
        image = rng.normal(size=(3, 8, 8))
        np.testing.assert_array_equal(M.patchify(Tensor(image), 4).data, oracle_patchify(image, 4))

    def test_full_scale_shape(self):
        image = np.zeros((3, 224, 224))
        assert M.patchify(Tensor(image), 16).shape == (196, 768)

    def test_single_patch_is_hwc_flatten(self):
        rng = np.random.default_rng(1)
        image = rng.normal(size=(3, 4, 4))
        out = M.patchify(Tensor(image), 4).data
        assert out.shape == (1, 48)
        np.testing.assert_array_equal(out[0], image.transpose(1, 2, 0).ravel())

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(2)
        for c, s, p in [(3, 8, 4), (1, 6, 2), (3, 16, 8)]:
            image = rng.normal(size=(c, s, s))
            patches = M.patchify(Tensor(image), p)
            back = M.unpatchify(patches, s, p, c)
            assert np.array_equal(back.data, image)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            M.patchify(Tensor(np.zeros((3, 10, 10))), 4)
        with pytest.raises(ValueError):
            M.patchify(Tensor(np.zeros((10, 10))), 2)

    def test_gradient_flows_through(self):
        rng = np.random.default_rng(3)
        image = rng.normal(size=(1, 4, 4))
        w = rng.normal(size=(4, 4))

        def loss_value(arr):
            return (M.patchify(Tensor(arr), 2) * Tensor(w)).sum().item()

        leaf = Tensor(image, requires_grad=True)
        (M.patchify(leaf, 2) * Tensor(w)).sum().backward()
        from test_tensor import assert_grads_close, fd_gradient

        assert_grads_close(leaf.grad, fd_gradient(loss_value, image))


class TestEmbed:
    def _params(self, n, pd, d, rng=None):
        get = (lambda *s: rng.normal(size=s)) if rng else (lambda *s: np.zeros(s))
        return {
            "cls_token": Tensor(get(d)),
            "pos_embed": Tensor(get(n + 1, d)),
            "patch_proj.weight": Tensor(get(pd, d)),
            "patch_proj.bias": Tensor(get(d)),
        }

    def test_zero_patches_give_positional_table(self):
        rng = np.random.default_rng(4)
        params = self._params(4, 6, 5)
        params["pos_embed"] = Tensor(rng.normal(size=(5, 5)))
        params["patch_proj.weight"] = Tensor(rng.normal(size=(6, 5)))
        out = M.embed(Tensor(np.zeros((4, 6))), params)
        np.testing.assert_array_equal(out.data, params["pos_embed"].data)

    def test_identity_projection_passes_patch_through(self):
        params = self._params(1, 4, 4)
        params["patch_proj.weight"] = Tensor(np.eye(4))
        patch = np.array([[1.0, -2.0, 3.0, 4.0]])
        out = M.embed(Tensor(patch), params)
        np.testing.assert_array_equal(out.data[1], patch[0])
        np.testing.assert_array_equal(out.data[0], np.zeros(4))

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(5)
        params = self._params(3, 8, 6, rng)
        patches = rng.normal(size=(3, 8))
        out = M.embed(Tensor(patches), params).data
        expected = (
            np.vstack([
                params["cls_token"].data,
                patches @ params["patch_proj.weight"].data + params["patch_proj.bias"].data,
            ])
            + params["pos_embed"].data
        )
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_shape_mismatches_rejected(self):
        params = self._params(4, 6, 5)
        with pytest.raises(ValueError, match="projection"):
            M.embed(Tensor(np.zeros((4, 7))), params)
        with pytest.raises(ValueError, match="positional"):
            M.embed(Tensor(np.zeros((2, 6))), params)


class TestMultiHeadAttention:
    def test_zero_query_key_is_uniform_average(self):
        rng = np.random.default_rng(6)
        dim, seq = 4, 5
        w = random_weights(rng, dim, identity_v=True, identity_o=True)
        w["wq"] = np.zeros((dim, dim))
        w["wk"] = np.zeros((dim, dim))
        w["bq"] = np.zeros(dim)
        w["bk"] = np.zeros(dim)
        x = rng.normal(size=(seq, dim))
        out, maps = M.multi_head_attention(
            Tensor(x), {k: Tensor(v) for k, v in w.items()}, 1, return_attention=True
        )
        np.testing.assert_allclose(maps, 1.0 / seq, atol=1e-12)
        np.testing.assert_allclose(out.data, np.tile(x.mean(axis=0), (seq, 1)), atol=1e-12)

    def test_single_token_attends_to_itself(self):
        rng = np.random.default_rng(7)
        w = random_weights(rng, 3, identity_v=True, identity_o=True)
        x = rng.normal(size=(1, 3))
        out, maps = M.multi_head_attention(
            Tensor(x), {k: Tensor(v) for k, v in w.items()}, 1, return_attention=True
        )
        np.testing.assert_array_equal(maps, [[[1.0]]])
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    @pytest.mark.parametrize("seq,dim,heads", [(2, 2, 1), (5, 6, 2), (4, 8, 4)])
    def test_matches_direct_formula(self, seq, dim, heads):
        rng = np.random.default_rng(seq * 100 + dim + heads)
        w = random_weights(rng, dim)
        x = rng.normal(size=(seq, dim))
        out, maps = M.multi_head_attention(
            Tensor(x), {k: Tensor(v) for k, v in w.items()}, heads, return_attention=True
        )
        expected_out, expected_maps = oracle_attention(x, w, heads)
        np.testing.assert_allclose(out.data, expected_out, atol=1e-9)
        np.testing.assert_allclose(maps, expected_maps, atol=1e-9)

    def test_attention_rows_are_stochastic(self):
        rng = np.random.default_rng(8)
        w = random_weights(rng, 6)
        x = rng.normal(size=(7, 6)) * 3.0
        _, maps = M.multi_head_attention(
            Tensor(x), {k: Tensor(v) for k, v in w.items()}, 2, return_attention=True
        )
        assert np.all(maps >= 0.0)
        np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-9)

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(9)
        w = {k: Tensor(v) for k, v in random_weights(rng, 6).items()}
        with pytest.raises(ValueError, match="heads"):
            M.multi_head_attention(Tensor(np.zeros((3, 6))), w, 4)


class TestEncoderBlock:
    def _tensorize(self, w):
        return {k: Tensor(v) for k, v in w.items()}

    def _block_weights(self, rng, dim, mlp, zero=False):
        scale = 0.0 if zero else 0.3
        w = {k: v * (0.0 if zero else 1.0) for k, v in random_weights(rng, dim).items()}
        w.update({
            "ln1_gamma": np.ones(dim), "ln1_beta": np.zeros(dim),
            "ln2_gamma": np.ones(dim), "ln2_beta": np.zeros(dim),
            "w1": rng.normal(size=(dim, mlp)) * scale, "b1": np.zeros(mlp) if zero else rng.normal(size=mlp) * 0.1,
            "w2": rng.normal(size=(mlp, dim)) * scale, "b2": np.zeros(dim) if zero else rng.normal(size=dim) * 0.1,
        })
        return w

    def test_zero_weights_are_identity(self):
        rng = np.random.default_rng(10)
        w = self._block_weights(rng, 6, 12, zero=True)
        x = rng.normal(size=(4, 6))
        out = M.encoder_block(Tensor(x), self._tensorize(w), 2)
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_matches_composed_sub_ops(self):
        rng = np.random.default_rng(11)
        w = self._block_weights(rng, 6, 12)
        tw = self._tensorize(w)
        x = Tensor(rng.normal(size=(5, 6)))
        block = M.encoder_block(x, tw, 2)

        normed = T.layer_norm(x, tw["ln1_gamma"], tw["ln1_beta"], eps=M.LAYER_NORM_EPS)
        y = x + M.multi_head_attention(normed, tw, 2)
        normed2 = T.layer_norm(y, tw["ln2_gamma"], tw["ln2_beta"], eps=M.LAYER_NORM_EPS)
        composed = y + (T.gelu(normed2 @ tw["w1"] + tw["b1"]) @ tw["w2"] + tw["b2"])
        np.testing.assert_array_equal(block.data, composed.data)

    def test_matches_oracle(self):
        rng = np.random.default_rng(12)
        w = self._block_weights(rng, 8, 16)
        x = rng.normal(size=(5, 8))
        out = M.encoder_block(Tensor(x), self._tensorize(w), 2)
        np.testing.assert_allclose(out.data, oracle_block(x, w, 2), atol=1e-9)

    def test_dropout_requires_rng_and_is_seeded(self):
        rng = np.random.default_rng(13)
        w = self._tensorize(self._block_weights(rng, 6, 12))
        x = Tensor(rng.normal(size=(4, 6)))
        with pytest.raises(ValueError, match="random source"):
            M.encoder_block(x, w, 2, dropout_rate=0.5)
        a = M.encoder_block(x, w, 2, dropout_rate=0.5, rng=RandomSource(3).substream("d"))
        b = M.encoder_block(x, w, 2, dropout_rate=0.5, rng=RandomSource(3).substream("d"))
        np.testing.assert_array_equal(a.data, b.data)
        plain = M.encoder_block(x, w, 2)
        assert not np.allclose(a.data, plain.data)


class TestForward:
    def test_output_is_probability_vector(self, tiny_model):
        rng = np.random.default_rng(14)
        for _ in range(20):
            image = rng.normal(size=(3, 8, 8))
            probs = tiny_model.forward(Tensor(image)).data
            assert probs.shape == (2,)
            assert np.all(probs > 0.0) and np.all(probs < 1.0)
            assert abs(probs.sum() - 1.0) <= 1e-9

    def test_zero_head_gives_even_split(self, tiny_model):
        tiny_model.params["head.weight"].data[:] = 0.0
        tiny_model.params["head.bias"].data[:] = 0.0
        probs = tiny_model.forward(Tensor(np.ones((3, 8, 8)))).data
        np.testing.assert_array_equal(probs, [0.5, 0.5])

    def test_matches_end_to_end_oracle(self, tiny_model):
        rng = np.random.default_rng(15)
        image = rng.normal(size=(3, 8, 8))
        arrays = {name: t.data for name, t in tiny_model.params.items()}
        expected = oracle_forward(image, arrays, TINY)
        np.testing.assert_allclose(tiny_model.forward(Tensor(image)).data, expected, atol=1e-8)

    def test_attention_maps_returned_per_layer(self, tiny_model):
        probs, maps = tiny_model.forward(Tensor(np.zeros((3, 8, 8))), return_attention=True)
        assert len(maps) == TINY.num_layers
        for layer_maps in maps:
            assert layer_maps.shape == (TINY.num_heads, TINY.seq_len, TINY.seq_len)
            np.testing.assert_allclose(layer_maps.sum(axis=-1), 1.0, atol=1e-9)

    def test_label_symmetry_of_head(self, tiny_model):
        rng = np.random.default_rng(16)
        image = rng.normal(size=(3, 8, 8))
        before = tiny_model.forward(Tensor(image)).data.copy()
        tiny_model.params["head.weight"].data = tiny_model.params["head.weight"].data[:, ::-1].copy()
        tiny_model.params["head.bias"].data = tiny_model.params["head.bias"].data[::-1].copy()
        after = tiny_model.forward(Tensor(image)).data
        np.testing.assert_allclose(after, before[::-1], atol=1e-12)

    def test_wrong_image_shape_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="image shape"):
            tiny_model.forward(Tensor(np.zeros((3, 16, 16))))

    def test_component_errors_carry_stage_name(self, tiny_model):
        params = dict(tiny_model.params.items())
        params["pos_embed"] = Tensor(np.zeros((3, 16)))
        broken = ModelParameters(params)
        with pytest.raises(ValueError, match="forward/embed"):
            M.forward(Tensor(np.zeros((3, 8, 8))), TINY, broken)

    def test_dropout_active_only_in_train_mode(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=16, num_heads=2,
                        num_layers=2, mlp_dim=32, dropout_rate=0.3)
        model = VisionTransformer.initialize(cfg, RandomSource(77))
        image = Tensor(np.ones((3, 8, 8)))
        eval_a = model.forward(image).data
        eval_b = model.forward(image).data
        np.testing.assert_array_equal(eval_a, eval_b)
        train_a = model.forward(image, rng=RandomSource(5), train=True).data
        train_b = model.forward(image, rng=RandomSource(5), train=True).data
        np.testing.assert_array_equal(train_a, train_b)
        assert not np.array_equal(train_a, eval_a)
        with pytest.raises(ValueError, match="random source"):
            model.forward(image, train=True)


class TestPredict:
    def test_known_probability_pairs(self):
        assert ClassProbabilities.from_vector([0.9115, 0.0885]).predicted_label is Label.REAL
        assert ClassProbabilities.from_vector([0.1253, 0.8747]).predicted_label is Label.FAKE
        assert ClassProbabilities.from_vector([0.5, 0.5]).predicted_label is Label.REAL

    def test_vector_validation(self):
        with pytest.raises(ValueError, match="sum"):
            ClassProbabilities.from_vector([0.9807, 0.0225])
        with pytest.raises(ValueError, match="finite"):
            ClassProbabilities.from_vector([np.nan, 1.0])
        with pytest.raises(ValueError, match="shape"):
            ClassProbabilities.from_vector([0.2, 0.3, 0.5])

    def test_predict_returns_consistent_fields(self, tiny_model):
        rng = np.random.default_rng(18)
        out = tiny_model.predict(Tensor(rng.normal(size=(3, 8, 8))))
        assert isinstance(out, ClassProbabilities)
        assert abs(out.real_prob + out.fake_prob - 1.0) <= 1e-9
        expected = Label.FAKE if out.fake_prob > out.real_prob else Label.REAL
        assert out.predicted_label is expected

    def test_predict_leaves_no_tape(self, tiny_model):
        tiny_model.predict(Tensor(np.zeros((3, 8, 8))))
        for t in tiny_model.params.values():
            assert t.grad is None

    def test_label_helpers(self):
        assert Label.REAL.display_name == "Real"
        assert Label.FAKE.display_name == "Fake"
        assert Label.from_name("real") is Label.REAL
        assert Label.from_name("Fake") is Label.FAKE
        with pytest.raises(ValueError):
            Label.from_name("maybe")


class TestInitParameters:
    def test_deterministic_given_seed(self):
        a = init_parameters(TINY, RandomSource(42))
        b = init_parameters(TINY, RandomSource(42))
        assert list(a.keys()) == list(b.keys())
        for name in a:
            assert np.array_equal(a[name].data, b[name].data), name

    def test_independent_of_parent_stream_usage(self):
        fresh = RandomSource(42)
        used = RandomSource(42)
        used.random(1000)
        a = init_parameters(TINY, fresh)
        b = init_parameters(TINY, used)
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)

    def test_shapes_and_count_formula(self):
        params = init_parameters(TINY, RandomSource(0))
        expected = parameter_shapes(TINY)
        assert list(params.keys()) == list(expected.keys())
        for name, shape in expected.items():
            assert params[name].shape == shape
        assert params.num_parameters() == oracle_param_count(TINY) == 5394

    def test_init_value_conventions(self):
        params = init_parameters(TINY, RandomSource(9))
        assert np.all(np.abs(params["patch_proj.weight"].data) <= 2.0 * M.INIT_STD + 1e-12)
        assert params["patch_proj.weight"].data.std() > 0.005
        np.testing.assert_array_equal(params["cls_token"].data, 0.0)
        np.testing.assert_array_equal(params["patch_proj.bias"].data, 0.0)
        np.testing.assert_array_equal(params["blocks.0.ln1.gamma"].data, 1.0)
        np.testing.assert_array_equal(params["blocks.0.ln1.beta"].data, 0.0)
        np.testing.assert_array_equal(params["head.bias"].data, 0.0)
        assert params["pos_embed"].data.std() > 0.005

    def test_all_parameters_require_grad(self):
        params = init_parameters(TINY, RandomSource(2))
        assert all(t.requires_grad for t in params.values())

    def test_shape_validation_catches_mismatch(self):
        params = dict(init_parameters(TINY, RandomSource(3)).items())
        params["head.bias"] = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="head.bias"):
            VisionTransformer(TINY, ModelParameters(params))
        del params["head.bias"]
        with pytest.raises(ValueError, match="missing"):
            VisionTransformer(TINY, ModelParameters(params))

    def test_non_finite_parameters_rejected(self):
        params = dict(init_parameters(TINY, RandomSource(4)).items())
        bad = params["cls_token"].data.copy()
        bad[0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            ModelParameters({**params, "cls_token": Tensor(bad)})
