import math

import numpy as np
import pytest
import torch

from fd import grad_rel_error
from mcnet.config import AblationConfig, ConfigError, ModelConfig
from mcnet.nets import (MHSA, Backbone, EmbeddingModel, Ensemble, SemanticNet, attention_map,
                        compose_features, forward_backbone, forward_semantic, mhsa,
                        multi_head_attention)


def dense_attention_oracle(x, wq, wk, wv, heads):
    """Loop-based evaluation of softmax(q k^T / sqrt(d_k)) v with zero position encoding."""
    n, _ = x.shape
    inner = wq.shape[0]
    d_k = inner // heads
    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    out = np.zeros((n, inner))
    for h in range(heads):
        sl = slice(h * d_k, (h + 1) * d_k)
        for i in range(n):
            logits = [sum(q[i, sl][a] * k[j, sl][a] for a in range(d_k)) / math.sqrt(d_k) for j in range(n)]
            m = max(logits)
            w = [math.exp(l - m) for l in logits]
            s = sum(w)
            for j in range(n):
                out[i, sl] += (w[j] / s) * v[j, sl]
    return out


class TestMHSA:
    def test_single_token_returns_value(self, float64):
        torch.manual_seed(0)
        x = torch.randn(1, 1, 4)
        w = [torch.randn(4, 4) for _ in range(4)]
        e = torch.zeros(2, 1, 2)
        _, attn, heads = multi_head_attention(x, *w, e, heads=2, return_heads=True)
        assert torch.equal(attn, torch.ones_like(attn))
        torch.testing.assert_close(heads[0, 0], x[0, 0] @ w[2].T)

    def test_two_tokens_hand_computed(self, float64):
        x = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]])
        wq = torch.tensor([[1.0, 1.0], [0.0, 1.0]])
        wk = torch.tensor([[1.0, 0.0], [1.0, -1.0]])
        wv = torch.tensor([[2.0, 0.0], [1.0, 1.0]])
        wo = torch.eye(2)
        for heads in (1, 2):
            e = torch.zeros(heads, 2, 2 // heads)
            out, _ = multi_head_attention(x, wq, wk, wv, wo, e, heads)
            expected = dense_attention_oracle(x[0].numpy(), wq.numpy(), wk.numpy(), wv.numpy(), heads)
            np.testing.assert_allclose(out[0].numpy(), expected, rtol=1e-12, atol=1e-12)

    def test_rows_stochastic(self):
        torch.manual_seed(1)
        m = MHSA(8, 4, 3, 3)
        _, attn = mhsa(torch.randn(5, 9, 8), m)
        assert attn.shape == (5, 4, 9, 9)
        assert torch.all(attn >= 0)
        assert torch.max(torch.abs(attn.sum(-1) - 1)) < 1e-6

    def test_position_encoding_shapes(self):
        for kind in ("relative", "absolute"):
            m = MHSA(8, 2, 3, 4, pos=kind)
            assert m.pos().shape == (2, 12, 4)

    def test_zero_dk(self):
        with pytest.raises(ConfigError):
            MHSA(2, 4, 2, 2)
        with pytest.raises(ConfigError):
            multi_head_attention(torch.randn(1, 2, 3), torch.randn(0, 3), torch.randn(0, 3),
                                 torch.randn(0, 3), torch.randn(3, 0), torch.zeros(1, 2, 0), 1)

    def test_gradient(self, float64):
        torch.manual_seed(2)
        m = MHSA(4, 2, 2, 2).double()
        x = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
        fn = lambda: (mhsa(x, m)[0] ** 2).sum()
        assert grad_rel_error(fn, x) < 1e-4
        assert grad_rel_error(fn, m.pos.rows) < 1e-4
        assert grad_rel_error(fn, m.q.weight) < 1e-4


class TestBackbone:
    def make(self, cfg):
        torch.manual_seed(0)
        return Backbone(3, 8, cfg.stem_width, cfg.backbone_widths, cfg.backbone_strides).eval()

    def test_shape(self, tiny_model_cfg):
        bb = self.make(tiny_model_cfg)
        out, acts = forward_backbone(bb, torch.rand(1, 3, 8, 8))
        assert out.shape == (1,) + bb.out_shape == (1, 6, 4, 4)
        assert [a.shape[1] for a in acts] == [4, 6]

    def test_batch_independence(self, tiny_model_cfg):
        bb = self.make(tiny_model_cfg)
        x = torch.rand(1, 3, 8, 8)
        out, _ = bb(torch.cat([x, x]))
        assert torch.equal(out[0], out[1])

    def test_shape_mismatch(self, tiny_model_cfg):
        with pytest.raises(ConfigError):
            self.make(tiny_model_cfg)(torch.rand(1, 3, 6, 6))

    def test_gradient(self, tiny_model_cfg, float64):
        bb = self.make(tiny_model_cfg).double()
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        fn = lambda: bb(x)[0].sum()
        w = bb.blocks[1].conv1.weight
        assert grad_rel_error(fn, w, coords=range(0, w.numel(), 7)) < 1e-4


class TestHeads:
    def test_equal_dims_and_spatial(self, tiny_model_cfg):
        torch.manual_seed(0)
        m = EmbeddingModel(3, 8, tiny_model_cfg).eval()
        out = m(torch.rand(2, 3, 8, 8))
        assert out["zC"].shape == out["zT"].shape == (2, 8)
        assert out["cnn_maps"][-1].shape[-2:] == out["attn_maps"][-1].shape[-2:]

    def test_zero_params_zero_features(self, tiny_model_cfg):
        m = EmbeddingModel(3, 8, tiny_model_cfg).eval()
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        out = m.forward_heads(torch.zeros(1, 6, 4, 4))
        assert torch.equal(out["zC"], torch.zeros(1, 8))
        assert torch.equal(out["zT"], torch.zeros(1, 8))

    def test_mismatched_spatial_sizes(self, tiny_model_cfg):
        cfg = ModelConfig(**{**tiny_model_cfg.__dict__, "backbone_strides": (1, 1)})
        EmbeddingModel(3, 8, cfg)  # 8x8 -> both heads 4x4
        with pytest.raises(ConfigError):
            EmbeddingModel(3, 7, cfg)  # odd map: attention pooling cannot match stride-2 conv

    def test_gradient(self, tiny_model_cfg, float64):
        torch.manual_seed(3)
        m = EmbeddingModel(3, 8, tiny_model_cfg).double().eval()
        feat = torch.rand(2, 6, 4, 4, dtype=torch.float64)
        for name in ("zC", "zT"):
            fn = lambda: (m.forward_heads(feat)[name] ** 2).sum()
            w = m.attn_head.blocks[0].attn.v.weight if name == "zT" else m.cnn_head.blocks[0].conv2.weight
            assert grad_rel_error(fn, w, coords=range(0, w.numel(), 3)) < 1e-4


class TestSemantic:
    def test_zero(self):
        net = SemanticNet(5, 3)
        with torch.no_grad():
            net.fc1.bias.zero_()
            net.fc2.bias.zero_()
        assert torch.equal(forward_semantic(net, torch.zeros(5)), torch.zeros(3))

    def test_identity(self):
        net = SemanticNet(4, 4, hidden=4)
        with torch.no_grad():
            for fc in (net.fc1, net.fc2):
                fc.weight.copy_(torch.eye(4))
                fc.bias.zero_()
        a = torch.tensor([0.5, 0.0, 2.0, 1.0])
        assert torch.equal(net(a), a)

    def test_dim_mismatch(self):
        with pytest.raises(ConfigError):
            SemanticNet(4, 3)(torch.zeros(5))

    def test_gradient(self, float64):
        torch.manual_seed(4)
        net = SemanticNet(6, 4).double()
        a = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
        fn = lambda: (net(a) ** 2).sum()
        assert grad_rel_error(fn, a) < 1e-4
        assert grad_rel_error(fn, net.fc1.weight) < 1e-4


class TestAttentionMap:
    def test_zero(self):
        assert torch.equal(attention_map(torch.zeros(3, 2, 2)), torch.zeros(4))

    def test_hand_value(self):
        m = torch.tensor([3.0, 4.0]).view(2, 1, 1)
        assert attention_map(m).tolist() == [25.0]

    def test_nonnegative(self):
        q = attention_map(torch.randn(4, 5, 3, 3))
        assert q.shape == (4, 9) and torch.all(q >= 0)


class TestCompose:
    def test_copies(self):
        u = torch.randn(5)
        assert torch.equal(compose_features(u, u, u, u), torch.cat([u, u, u, u]))

    def test_basis(self):
        e = torch.eye(4)
        z = compose_features(e[0], e[1], e[2], e[3])
        assert z.shape == (16,)
        assert torch.nonzero(z).flatten().tolist() == [0, 5, 10, 15]

    def test_mismatch(self):
        with pytest.raises(ConfigError):
            compose_features(torch.zeros(3), torch.zeros(4))


class TestEnsemble:
    def test_bundle_and_parity(self, tiny_model_cfg):
        ens = Ensemble(tiny_model_cfg, 3, 8, 5, 7).eval()
        b = ens.features(torch.rand(3, 3, 8, 8))
        dims = {t.shape[1] for _, t in b.streams}
        assert dims == {8} and len(b.streams) == 4
        assert torch.equal(b.z, torch.cat([b.z1C, b.z1T, b.z2C, b.z2T], dim=1))

    def test_ablated_streams(self, tiny_model_cfg):
        ens = Ensemble(tiny_model_cfg, 3, 8, 5, 7, AblationConfig(use_model2=False, use_attention_head=False))
        assert ens.features(torch.rand(2, 3, 8, 8)).z.shape == (2, 8)

    def test_deterministic_init(self, tiny_model_cfg):
        a = Ensemble(tiny_model_cfg, 3, 8, 5, 7)
        b = Ensemble(tiny_model_cfg, 3, 8, 5, 7)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), n

    def test_trainable_resolution(self, tiny_model_cfg):
        ens = Ensemble(tiny_model_cfg, 3, 8, 5, 7)
        last = ens.resolve_trainable(("last",))
        assert last == sorted(["model1.cnn_head.blocks.0", "model1.attn_head.blocks.1",
                               "model2.cnn_head.blocks.0", "model2.attn_head.blocks.1"])
        assert ens.resolve_trainable(("layer:2",)) == ["model1.backbone.blocks.0", "model2.backbone.blocks.0"]
        with pytest.raises(ConfigError):
            ens.resolve_trainable(("model3.x",))
