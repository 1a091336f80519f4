import math

import numpy as np
import pytest
import torch

from roaddefect.attention import (AttentionConfig, SCMBlock, SCMLayer, merge_patches,
                                  multi_head_attention, partition_patches,
                                  patch_channel_attention, scm_block_forward,
                                  sinusoidal_encoding, tokenize_with_position)
from roaddefect.errors import ConfigError, ShapeError
from roaddefect.numeric import DTYPE, check_gradient, check_gradients


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def random_config(rng):
    heads = int(rng.integers(1, 5))
    d_h = int(rng.integers(1, 5))
    return dict(batch=int(rng.integers(1, 3)), n=int(rng.integers(1, 9)),
                heads=heads, d_model=heads * d_h, d_h=d_h)


def mha_inputs(cfg, seed):
    t = rand(cfg["batch"], cfg["n"], cfg["d_model"], seed=seed)
    shape = (cfg["heads"], cfg["d_model"], cfg["d_h"])
    return t, rand(*shape, seed=seed + 1), rand(*shape, seed=seed + 2), rand(*shape, seed=seed + 3)


class TestPatches:
    def test_round_trip(self):
        f = rand(2, 3, 8, 12)
        p = partition_patches(f, 4)
        assert p.shape == (2, 6, 3, 4, 4)
        assert torch.equal(merge_patches(p, 4, 8, 12), f)

    def test_row_major_order(self):
        f = torch.arange(16, dtype=DTYPE).reshape(1, 1, 4, 4)
        p = partition_patches(f, 2)
        assert p[0, 1, 0].tolist() == [[2, 3], [6, 7]]
        assert p[0, 2, 0].tolist() == [[8, 9], [12, 13]]

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            partition_patches(rand(1, 1, 5, 4), 2)

    def test_merge_shape_mismatch(self):
        with pytest.raises(ShapeError):
            merge_patches(rand(1, 3, 1, 2, 2), 2, 4, 4)


class TestChannelAttention:
    def test_hand_case(self):
        # single pixel, channels [1, 0]: Gram = diag(1, 0), attended = [1, 0]
        patch = torch.tensor([1.0, 0.0], dtype=DTYPE).reshape(1, 1, 2, 1, 1)
        out = patch_channel_attention(patch).flatten()
        e = math.exp(1.0)
        np.testing.assert_allclose(out.numpy(), [1 + e / (e + 1), 1 / (e + 1)], rtol=1e-15)

    def test_modes_agree(self):
        p = rand(2, 3, 4, 2, 2)
        a = patch_channel_attention(p, "channel")
        b = patch_channel_attention(p, "spatial")
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)

    def test_channel_weights_sum_to_one(self):
        p = rand(1, 2, 5, 3, 3)
        w = patch_channel_attention(p) - p
        np.testing.assert_allclose(w.sum(dim=2).numpy(), 1.0, atol=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            patch_channel_attention(rand(1, 1, 1, 1, 1), "diagonal")


class TestPositionalEncoding:
    def test_first_row(self):
        pe = sinusoidal_encoding(3, 4)
        assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
        np.testing.assert_allclose(pe[1, 0].item(), math.sin(1.0))
        np.testing.assert_allclose(pe[1, 3].item(), math.cos(1.0 / 100.0))

    def test_tokenize_shape(self):
        p = rand(2, 4, 3, 2, 2)
        tok = tokenize_with_position(p, rand(12, 8), torch.zeros(8, dtype=DTYPE))
        assert tok.shape == (2, 4, 8)
        raw = tokenize_with_position(p, rand(12, 8), torch.zeros(8, dtype=DTYPE), positional=False)
        np.testing.assert_allclose((tok - raw).numpy(), sinusoidal_encoding(4, 8).expand(2, 4, 8).numpy())


CONFIGS = list(range(100))


@pytest.mark.parametrize("idx", CONFIGS)
def test_attention_invariants(idx):
    rng = np.random.default_rng(idx)
    cfg = random_config(rng)
    t, wq, wk, wv = mha_inputs(cfg, 10 * idx)
    out, weights, heads = multi_head_attention(t, wq, wk, wv, return_weights=True)
    # shape preservation (token count and batch)
    assert out.shape == (cfg["batch"], cfg["n"], cfg["d_h"])
    # rows of every attention matrix are distributions
    np.testing.assert_allclose(weights.sum(-1).numpy(), 1.0, atol=1e-6)
    assert (weights >= 0).all()
    # head-averaged output lies inside the envelope of the value rows
    v = t.unsqueeze(1) @ wv
    lo = v.amin(dim=(1, 2), keepdim=True).squeeze(1)
    hi = v.amax(dim=(1, 2), keepdim=True).squeeze(1)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()
    np.testing.assert_allclose(out.numpy(), heads.mean(1).numpy(), atol=1e-15)
    # permutation equivariance without positional encoding
    perm = torch.from_numpy(rng.permutation(cfg["n"]))
    permuted = multi_head_attention(t[:, perm], wq, wk, wv)
    np.testing.assert_allclose(permuted.numpy(), out[:, perm].numpy(), atol=1e-12)


class TestMultiHead:
    def test_single_token_returns_value(self):
        t, wq, wk, wv = mha_inputs(dict(batch=1, n=1, heads=2, d_model=4, d_h=2), 0)
        out = multi_head_attention(t, wq, wk, wv)
        np.testing.assert_allclose(out.numpy(), (t.unsqueeze(1) @ wv).mean(1).numpy(), atol=1e-14)

    def test_dim_mismatch(self):
        t, wq, wk, wv = mha_inputs(dict(batch=1, n=2, heads=2, d_model=4, d_h=2), 0)
        with pytest.raises(ShapeError):
            multi_head_attention(t[..., :3], wq, wk, wv)

    def test_weights_invariant_to_logit_scale(self):
        # instance normalization removes a global scale on the logits
        t, wq, wk, wv = mha_inputs(dict(batch=1, n=5, heads=1, d_model=3, d_h=3), 4)
        _, w1, _ = multi_head_attention(t, wq, wk, wv, return_weights=True)
        _, w2, _ = multi_head_attention(t, wq * 3, wk, wv, return_weights=True)
        np.testing.assert_allclose(w1.numpy(), w2.numpy(), atol=1e-5)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            AttentionConfig(model_dim=10, heads=4)

    def test_derived(self):
        c = AttentionConfig(patch_size=4, heads=4, model_dim=32)
        assert c.head_dim == 8 and c.hidden_dim == 64
        assert c.sequence_length(16, 8) == 8

    def test_zero_layers_identity(self):
        cfg = AttentionConfig(patch_size=2, layers=0, model_dim=8, heads=2)
        block = SCMBlock(3, cfg, torch.Generator().manual_seed(0))
        f = rand(1, 3, 4, 4)
        assert torch.equal(block(f), f)


class TestSCMLayer:
    def _layer(self, **kw):
        cfg = AttentionConfig(patch_size=2, heads=2, layers=1, model_dim=8, **kw)
        return SCMLayer(3, cfg, torch.Generator().manual_seed(0)), cfg

    def test_shape(self):
        layer, cfg = self._layer()
        f = rand(2, 3, 4, 6)
        assert layer(f).shape == f.shape

    def test_modes_agree(self):
        a, _ = self._layer(channel_mode="channel")
        b, _ = self._layer(channel_mode="spatial")
        f = rand(1, 3, 4, 4)
        np.testing.assert_allclose(a(f).detach().numpy(), b(f).detach().numpy(), atol=1e-12)

    def test_block_forward_checks(self):
        layer, cfg = self._layer()
        block = SCMBlock(3, cfg, torch.Generator().manual_seed(0))
        with pytest.raises(ConfigError):
            scm_block_forward(rand(1, 3, 5, 4), cfg, block)
        with pytest.raises(ShapeError):
            scm_block_forward(rand(3, 4, 4), cfg, block)

    def test_deterministic_init(self):
        a, _ = self._layer()
        b, _ = self._layer()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestAttentionGradients:
    def test_channel_attention(self):
        c = rand(1, 2, 3, 2, 2, seed=5)
        assert check_gradient(lambda p: (patch_channel_attention(p) * c).sum(),
                              rand(1, 2, 3, 2, 2, seed=6) * 0.5) < 1e-4

    def test_multi_head_tokens(self):
        t, wq, wk, wv = mha_inputs(dict(batch=1, n=4, heads=2, d_model=4, d_h=2), 3)
        c = rand(1, 4, 2, seed=9)
        assert check_gradient(lambda x: (multi_head_attention(x, wq, wk, wv) * c).sum(), t) < 1e-4

    def test_multi_head_weights(self):
        t, wq, wk, wv = mha_inputs(dict(batch=1, n=4, heads=2, d_model=4, d_h=2), 3)
        c = rand(1, 4, 2, seed=9)
        for i in range(3):
            def f(w, i=i):
                ws = [wq, wk, wv]
                ws[i] = w
                return (multi_head_attention(t, *ws) * c).sum()
            assert check_gradient(f, [wq, wk, wv][i]) < 1e-4

    def test_full_layer(self):
        layer, _ = TestSCMLayer()._layer()
        f = rand(1, 3, 4, 4, seed=2)
        c = rand(1, 3, 4, 4, seed=3)
        params = list(layer.parameters())
        assert check_gradients(lambda: (layer(f) * c).sum(), params, coords_per_param=4) < 1e-4
        assert check_gradient(lambda x: (layer(x) * c).sum(), f, coords=range(0, 48, 5)) < 1e-4


class TestWorkedExamples:
    def test_single_patch_identity(self):
        f = rand(1, 4, 8, 8)
        p = partition_patches(f, 8)
        assert p.shape == (1, 1, 4, 8, 8) and torch.equal(p[:, 0], f)

    def test_patch_count(self):
        assert partition_patches(torch.zeros(1, 2, 224, 224, dtype=DTYPE), 16).shape[1] == 196

    def test_shuffled_patches_merge_to_shuffled_layout(self):
        f = rand(1, 4, 16, 16)
        p = partition_patches(f, 8)
        swapped = merge_patches(p[:, [3, 1, 2, 0]], 8, 16, 16)
        assert torch.equal(swapped[..., :8, :8], f[..., 8:, 8:])
        assert torch.equal(swapped[..., 8:, 8:], f[..., :8, :8])
        assert torch.equal(swapped[..., :8, 8:], f[..., :8, 8:])

    def test_zero_patch_gives_uniform_channels(self):
        out = patch_channel_attention(torch.zeros(1, 1, 4, 2, 2, dtype=DTYPE))
        np.testing.assert_array_equal(out.numpy(), 0.25)

    def test_zero_projection_gives_positional_encoding(self):
        p = rand(1, 3, 2, 2, 2)
        tok = tokenize_with_position(p, torch.zeros(8, 4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE))
        np.testing.assert_array_equal(tok[0].numpy(), sinusoidal_encoding(3, 4).numpy())

    def test_identical_patches_differ_by_encoding(self):
        one = rand(1, 1, 2, 2, 2)
        p = one.expand(1, 2, 2, 2, 2)
        tok = tokenize_with_position(p, rand(8, 4), rand(4))
        pe = sinusoidal_encoding(2, 4)
        np.testing.assert_allclose((tok[0, 1] - tok[0, 0]).numpy(), (pe[1] - pe[0]).numpy(), atol=1e-14)

    def test_single_token_first_position(self):
        p = rand(1, 1, 1, 2, 2)
        w, b = rand(4, 6), rand(6)
        tok = tokenize_with_position(p, w, b)
        expected = p.reshape(1, 4) @ w + b + sinusoidal_encoding(1, 6)
        np.testing.assert_allclose(tok[0].numpy(), expected.numpy(), atol=1e-14)

    def test_identical_heads_equal_single_head(self):
        t = rand(1, 3, 4)
        w = [rand(1, 4, 2, seed=s) for s in (1, 2, 3)]
        single = multi_head_attention(t, *w)
        double = multi_head_attention(t, *[x.expand(2, 4, 2) for x in w])
        np.testing.assert_allclose(double.numpy(), single.numpy(), atol=1e-14)

    def test_two_token_brute_force(self):
        t = torch.tensor([[[1.0, 0.0], [0.5, 2.0]]], dtype=DTYPE)
        eye = torch.eye(2, dtype=DTYPE)[None]
        out = multi_head_attention(t, eye, eye, eye)
        x = t[0].tolist()
        logits = [[(x[i][0] * x[j][0] + x[i][1] * x[j][1]) / math.sqrt(2) for j in range(2)]
                  for i in range(2)]
        flat = [v for row in logits for v in row]
        mean = sum(flat) / 4
        std = math.sqrt(sum((v - mean) ** 2 for v in flat) / 4 + 1e-5)
        expected = []
        for i in range(2):
            e = [math.exp((logits[i][j] - mean) / std) for j in range(2)]
            w = [v / sum(e) for v in e]
            expected.append([w[0] * x[0][k] + w[1] * x[1][k] for k in range(2)])
        np.testing.assert_allclose(out[0].numpy(), expected, rtol=1e-13)

    def test_layer_equals_manual_composition(self):
        cfg = AttentionConfig(patch_size=2, heads=2, layers=1, model_dim=8)
        layer = SCMLayer(4, cfg, torch.Generator().manual_seed(3))
        f = rand(1, 4, 4, 4)
        from roaddefect.numeric import layer_normalize
        p = patch_channel_attention(partition_patches(f, 2))
        tok = layer_normalize(tokenize_with_position(p, layer.tok_w, layer.tok_b),
                              layer.ln1_g, layer.ln1_b)
        ma = multi_head_attention(tok, layer.w_q, layer.w_k, layer.w_v)
        o = ma + layer.mlp(layer_normalize(ma, layer.ln2_g, layer.ln2_b))
        manual = merge_patches(p + (o @ layer.detok_w + layer.detok_b).reshape(p.shape), 2, 4, 4)
        np.testing.assert_allclose(layer(f).detach().numpy(), manual.detach().numpy(), atol=1e-14)
