import zipfile

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose, assert_array_equal

from progseg.backbone import (
    ASPP,
    BackboneConfig,
    DecoderStage,
    EncoderStage,
    TransformerBottleneck,
    attention,
    build_model,
    checkpoint_digest,
    dropout,
    load_checkpoint,
    param_count,
    save_checkpoint,
    state_digest,
    zero_parameters,
)
from progseg.core import ShapeError


def _hand_param_count(cfg: BackboneConfig) -> int:
    """Count parameters layer by layer from the architecture description."""
    w = [cfg.base_width * 2**l for l in range(cfg.depth)]
    gn = (lambda c: 2 * c) if cfg.norm == "group" else (lambda c: 0)
    conv = lambda cin, cout, k: cin * cout * k * k + cout  # noqa: E731
    n = 0
    for l in range(cfg.depth):
        cin = cfg.in_channels if l == 0 else w[l - 1]
        n += conv(cin, w[l], 3) + conv(w[l], w[l], 3) + 2 * gn(w[l])
    d, r = cfg.token_dim, len(cfg.dilation_rates)
    n += r * conv(w[-1], d, 3) + conv(r * d, d, 1)
    g = cfg.bottleneck_size
    n += g * g * d + 2 * (2 * d) + 4 * (d * d + d)
    n += (d * cfg.ff_mult * d + cfg.ff_mult * d) + (cfg.ff_mult * d * d + d)
    for l in reversed(range(cfg.depth - 1)):
        cin = d if l == cfg.depth - 2 else w[l + 1]
        n += conv(cin, w[l], 3) + w[l] * w[l] + conv(w[l], w[l], 3) + 2 * gn(w[l])
    n += conv(w[0], cfg.num_classes, 1)
    n += conv(w[0], cfg.logvar_hidden, 1) + conv(cfg.logvar_hidden, 1, 1) if cfg.logvar_hidden else conv(w[0], 1, 1)
    return n


class TestConfig:
    def test_default_param_count_golden(self):
        cfg = BackboneConfig()
        model = build_model(cfg)
        assert param_count(model) == _hand_param_count(cfg)
        assert param_count(model) == 314053

    @pytest.mark.parametrize("kw", [{"norm": "none"}, {"logvar_hidden": 0}, {"depth": 2, "input_size": 16}])
    def test_param_count_variants(self, kw):
        cfg = BackboneConfig(**kw)
        assert param_count(build_model(cfg)) == _hand_param_count(cfg)

    @pytest.mark.parametrize(
        "kw",
        [
            {"depth": 1},
            {"dilation_rates": ()},
            {"dilation_rates": (0, 1)},
            {"token_dim": 30, "heads": 4},
            {"dropout_rate": 0.95},
            {"norm": "batch"},
            {"input_size": 60},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            BackboneConfig(**kw)


class TestBlocks:
    def test_encoder_identity_conv_hand_case(self):
        stage = EncoderStage(1, 1, norm="none")
        with torch.no_grad():
            stage.conv.weight.zero_()
            stage.conv.weight[0, 0, 1, 1] = 1.0
            stage.conv.bias.zero_()
            stage.res.weight.zero_()
            stage.res.bias.fill_(0.5)
        x = torch.tensor([[1.0, -2.0, 3.0, -4.0]] * 4).view(1, 1, 4, 4)
        # relu(relu(x) + 0.5)
        expected = torch.clamp(torch.clamp(x, min=0) + 0.5, min=0)
        assert_allclose(stage(x).detach().numpy(), expected.numpy())

    def test_aspp_constant_field(self):
        torch.manual_seed(1)
        block = ASPP(3, 5, (1, 2, 4))
        x = torch.full((1, 3, 8, 8), 0.7)
        y = block(x).detach()
        # replicate padding keeps a constant field constant
        assert_allclose(y.numpy(), y[:, :, :1, :1].expand_as(y).numpy(), atol=1e-6)
        branches = [torch.relu(b.weight.sum(dim=(1, 2, 3)) * 0.7 + b.bias) for b in block.branches]
        cat = torch.cat(branches)
        hand = torch.relu(block.project.weight[:, :, 0, 0] @ cat + block.project.bias)
        assert_allclose(y[0, :, 0, 0].numpy(), hand.detach().numpy(), atol=1e-5)

    def test_aspp_rate_too_wide(self):
        with pytest.raises(ShapeError):
            ASPP(2, 2, (1, 16))(torch.zeros(1, 2, 8, 8))

    def test_attention_closed_form(self):
        q = torch.zeros(1, 3, 2)
        k = torch.randn(1, 3, 2)
        v = torch.tensor([[[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]]])
        out, w = attention(q, k, v)
        assert_allclose(w.numpy(), 1 / 3, atol=1e-7)
        assert_allclose(out[0, 0].numpy(), [3.0, 5.0], atol=1e-6)
        # one-hot scores through a large key
        q = torch.tensor([[[1.0, 0.0]]])
        k = torch.tensor([[[0.0, 0.0], [100.0, 0.0]]])
        v = torch.tensor([[[1.0], [7.0]]])
        out, _ = attention(q, k, v)
        assert out.item() == pytest.approx(7.0, abs=1e-6)

    def test_attention_weights_rows_sum_to_one(self):
        _, w = attention(torch.randn(2, 4, 5, 8), torch.randn(2, 4, 5, 8), torch.randn(2, 4, 5, 8))
        assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-6)

    def test_transformer_zero_weights_is_identity(self):
        block = TransformerBottleneck(8, 2, 2, grid=4)
        for mod in (block.attn, block.ff):
            zero_parameters(mod)
        f = torch.randn(2, 8, 4, 4)
        assert_allclose(block(f).detach().numpy(), f.numpy(), atol=1e-6)
        # interpolated embedding on a different grid
        assert tuple(block.positional(2, 2).shape) == (4, 8)

    def test_decoder_hand_case(self):
        stage = DecoderStage(1, 1, 1, norm="none")
        with torch.no_grad():
            stage.up.weight.zero_()
            stage.up.weight[0, 0, 1, 1] = 1.0
            stage.up.bias.zero_()
            stage.skip.weight.fill_(2.0)
            zero_parameters(stage.res)
        deeper = torch.tensor([[1.0, -1.0], [2.0, 0.0]]).view(1, 1, 2, 2)
        skip = torch.ones(1, 1, 4, 4)
        up = deeper.repeat_interleave(2, -1).repeat_interleave(2, -2)
        expected = torch.relu(up + 2.0)
        assert_allclose(stage(deeper, skip).detach().numpy(), expected.numpy())

    def test_decoder_size_mismatch(self):
        with pytest.raises(ShapeError):
            DecoderStage(1, 1, 1)(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 5, 5))

    def test_dropout_generator_reproducible(self):
        x = torch.ones(1000)
        a = dropout(x, 0.3, True, torch.Generator().manual_seed(5))
        b = dropout(x, 0.3, True, torch.Generator().manual_seed(5))
        assert torch.equal(a, b)
        vals = torch.unique(a).numpy()
        assert len(vals) == 2 and vals[0] == 0.0
        assert vals[1] == pytest.approx(1 / 0.7, rel=1e-6)
        assert torch.equal(dropout(x, 0.3, False), x)


class TestModel:
    def test_shapes_and_heads(self, tiny_cfg):
        model = build_model(tiny_cfg)
        out = model(torch.randn(3, 4, 16, 16))
        assert tuple(out.logits.shape) == (3, 4, 16, 16)
        assert tuple(out.logvar.shape) == (3, 16, 16)
        single = model(torch.randn(4, 16, 16))
        assert tuple(single.probs.shape) == (4, 16, 16)

    def test_indivisible_size_hint(self, small32_cfg):
        model = build_model(small32_cfg)
        with pytest.raises(ShapeError, match="pad by"):
            model(torch.randn(1, 4, 30, 32))

    def test_deterministic_vs_stochastic(self, tiny_cfg):
        model = build_model(tiny_cfg).eval()
        x = torch.randn(2, 4, 16, 16)
        with torch.no_grad():
            assert torch.equal(model(x).probs, model(x).probs)
            g1, g2 = torch.Generator().manual_seed(1), torch.Generator().manual_seed(1)
            s1 = model(x, stochastic=True, generator=g1).probs
            s2 = model(x, stochastic=True, generator=g2).probs
            assert torch.equal(s1, s2)
            assert not torch.equal(s1, model(x).probs)

    def test_detach_logvar_blocks_gradient(self, tiny_cfg):
        model = build_model(tiny_cfg)
        out = model(torch.randn(1, 4, 16, 16), detach_logvar=True)
        out.logvar.sum().backward()
        assert model.encoder[0].conv.weight.grad is None or model.encoder[0].conv.weight.grad.abs().sum() == 0
        assert model.logvar_head[0].weight.grad.abs().sum() > 0

    def test_seeded_build(self, tiny_cfg):
        assert state_digest(build_model(tiny_cfg, 3)) == state_digest(build_model(tiny_cfg, 3))
        assert state_digest(build_model(tiny_cfg, 3)) != state_digest(build_model(tiny_cfg, 4))


class TestCheckpoint:
    def test_round_trip(self, tiny_cfg, tmp_path):
        model = build_model(tiny_cfg, 7)
        digest = save_checkpoint(tmp_path / "m.ckpt", model, {"note": "x"})
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert state_digest(loaded) == digest == checkpoint_digest(tmp_path / "m.ckpt")
        assert loaded.config == tiny_cfg
        assert loaded.checkpoint_meta == {"note": "x"}
        x = torch.randn(1, 4, 16, 16)
        with torch.no_grad():
            assert_array_equal(loaded(x).probs.numpy(), model.eval()(x).probs.numpy())

    def test_byte_identical(self, tiny_cfg, tmp_path):
        model = build_model(tiny_cfg, 7)
        save_checkpoint(tmp_path / "a.ckpt", model)
        save_checkpoint(tmp_path / "b.ckpt", model)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_corrupt(self, tiny_cfg, tmp_path):
        p = tmp_path / "m.ckpt"
        (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "junk.ckpt")
        save_checkpoint(p, build_model(tiny_cfg))
        with zipfile.ZipFile(p) as zf:
            items = {n: zf.read(n) for n in zf.namelist()}
        name = next(n for n in items if n.endswith("seg_head.bias.npy"))
        arr = np.load(__import__("io").BytesIO(items[name]))
        arr = arr + 1.0
        buf = __import__("io").BytesIO()
        np.save(buf, arr)
        items[name] = buf.getvalue()
        with zipfile.ZipFile(p, "w") as zf:
            for n, b in items.items():
                zf.writestr(n, b)
        with pytest.raises(ValueError, match="digest"):
            load_checkpoint(p)
