import numpy as np
import pytest
import torch

from helpers import (
    finite_difference_grads,
    gate_expected_params,
    nested_expected_params,
    relative_grad_error,
    unet_expected_params,
)
from hippovol.losses import soft_dice_loss
from hippovol.models import (
    AttentionGate,
    ModelConfig,
    build_model,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)


class TestParameterCounts:
    def test_unet_depth3_base4_hand_count(self):
        cfg = ModelConfig(variant="unet", depth=3, base_channels=4, use_batchnorm=False)
        assert count_parameters(build_model(cfg)) == unet_expected_params(bn=False)

    def test_unet_depth3_base4_with_batchnorm(self):
        cfg = ModelConfig(variant="unet", depth=3, base_channels=4, use_batchnorm=True)
        assert count_parameters(build_model(cfg)) == unet_expected_params(bn=True)

    def test_attention_depth3_base4_hand_count(self):
        cfg = ModelConfig(variant="attention_unet", depth=3, base_channels=4, use_batchnorm=False)
        expected = unet_expected_params(bn=False) + gate_expected_params(4, 8) + gate_expected_params(8, 16)
        assert count_parameters(build_model(cfg)) == expected

    def test_nested_depth3_base4_hand_count(self):
        cfg = ModelConfig(variant="nested_unet", depth=3, base_channels=4, use_batchnorm=False)
        assert count_parameters(build_model(cfg)) == nested_expected_params(bn=False)

    def test_nested_exceeds_plain_unet(self):
        for depth in (3, 4):
            plain = build_model(ModelConfig(variant="unet", depth=depth, base_channels=4))
            nested = build_model(ModelConfig(variant="nested_unet", depth=depth, base_channels=4))
            assert count_parameters(nested) > count_parameters(plain)

    def test_count_positive(self):
        for variant in ("unet", "attention_unet", "nested_unet"):
            model = build_model(ModelConfig(variant=variant, depth=3, base_channels=4))
            assert count_parameters(model) > 0


class TestStructure:
    def test_nested_deep_supervision_head_counts(self):
        for depth, heads in ((4, 3), (5, 4)):
            cfg = ModelConfig(variant="nested_unet", depth=depth, base_channels=4,
                              deep_supervision=True)
            model = build_model(cfg)
            size = 2 ** (depth - 1) * 2
            out = model(torch.rand(1, 3, size, size))
            assert isinstance(out, list) and len(out) == heads
            assert all(o.shape == out[0].shape for o in out)

    def test_attention_gate_count(self):
        for depth in (3, 4, 5):
            cfg = ModelConfig(variant="attention_unet", depth=depth, base_channels=4)
            model = build_model(cfg)
            assert len(model.gates) == depth - 1

    def test_invalid_configs(self):
        with pytest.raises(ValueError, match="deep_supervision"):
            ModelConfig(variant="unet", deep_supervision=True)
        with pytest.raises(ValueError, match="depth"):
            ModelConfig(depth=6)
        with pytest.raises(ValueError, match="base_channels"):
            ModelConfig(base_channels=2)
        with pytest.raises(ValueError, match="variant"):
            ModelConfig(variant="vnet")


class TestForward:
    @pytest.mark.parametrize("variant", ["unet", "attention_unet", "nested_unet"])
    @pytest.mark.parametrize("size", [96, 128, 256])
    def test_spatial_dims_preserved(self, variant, size):
        cfg = ModelConfig(variant=variant, depth=3, base_channels=4)
        model = build_model(cfg)
        model.eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, size, size))
        assert out.shape == (1, 1, size, size)

    def test_batch_shape_96_depth4(self):
        model = build_model(ModelConfig(variant="unet", depth=4, base_channels=4))
        model.eval()
        with torch.no_grad():
            out = model(torch.rand(2, 3, 96, 96))
        assert out.shape == (2, 1, 96, 96)

    def test_zero_final_layer_gives_half(self):
        model = build_model(ModelConfig(variant="unet", depth=3, base_channels=4))
        torch.nn.init.zeros_(model.head.weight)
        torch.nn.init.zeros_(model.head.bias)
        model.eval()
        with torch.no_grad():
            out = model(torch.zeros(1, 3, 16, 16))
        assert torch.all(out == 0.5)

    def test_outputs_strictly_in_unit_interval(self):
        for variant in ("unet", "attention_unet", "nested_unet"):
            model = build_model(ModelConfig(variant=variant, depth=3, base_channels=4))
            model.eval()
            with torch.no_grad():
                out = model(torch.rand(2, 3, 32, 32))
            assert torch.all(out > 0) and torch.all(out < 1)

    def test_indivisible_dims_rejected(self):
        model = build_model(ModelConfig(variant="unet", depth=4, base_channels=4))
        with pytest.raises(ValueError, match="divisible by 2\\^\\(depth-1\\) = 8"):
            model(torch.rand(1, 3, 100, 100))

    def test_forward_is_pure(self):
        model = build_model(ModelConfig(variant="unet", depth=3, base_channels=4))
        model.eval()
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            assert torch.equal(model(x), model(x))


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        cfg = ModelConfig(variant="nested_unet", depth=3, base_channels=4)
        a, b = build_model(cfg, seed=11), build_model(cfg, seed=11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        cfg = ModelConfig(variant="unet", depth=3, base_channels=4)
        a, b = build_model(cfg, seed=1), build_model(cfg, seed=2)
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))


class TestAttentionGate:
    def test_alpha_in_unit_interval(self):
        gate = AttentionGate(4, 8, 2)
        alpha = gate.attention(torch.rand(1, 4, 8, 8), torch.rand(1, 8, 4, 4))
        assert torch.all(alpha > 0) and torch.all(alpha < 1)

    def test_zero_psi_gives_half_gate(self):
        gate = AttentionGate(4, 8, 2)
        torch.nn.init.zeros_(gate.psi.weight)
        torch.nn.init.zeros_(gate.psi.bias)
        x = torch.rand(1, 4, 8, 8)
        g = torch.rand(1, 8, 4, 4)
        assert torch.all(gate.attention(x, g) == 0.5)
        assert torch.allclose(gate(x, g), x / 2)

    def test_channel_mismatch_rejected(self):
        gate = AttentionGate(4, 8, 2)
        with pytest.raises(ValueError, match="channels"):
            gate(torch.rand(1, 5, 8, 8), torch.rand(1, 8, 4, 4))

    def test_finer_gating_signal_rejected(self):
        gate = AttentionGate(4, 8, 2)
        with pytest.raises(ValueError, match="coarser"):
            gate(torch.rand(1, 4, 8, 8), torch.rand(1, 8, 16, 16))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(5)
        gate = AttentionGate(4, 8, 2).double()
        x = torch.rand(1, 4, 8, 8, dtype=torch.float64)
        g = torch.rand(1, 8, 4, 4, dtype=torch.float64)
        target = (torch.rand(1, 4, 8, 8) > 0.5).double()

        def loss_fn():
            with torch.no_grad():
                return float(soft_dice_loss(torch.sigmoid(gate(x, g)), target))

        params = list(gate.parameters())
        loss = soft_dice_loss(torch.sigmoid(gate(x, g)), target)
        analytic = torch.autograd.grad(loss, params)
        numeric = finite_difference_grads(params, loss_fn, h=1e-6)
        assert relative_grad_error(analytic, numeric) <= 1e-3


class TestModelGradients:
    def test_subsampled_finite_differences_through_tiny_unet(self):
        torch.manual_seed(7)
        cfg = ModelConfig(variant="unet", depth=3, base_channels=4, use_batchnorm=False)
        model = build_model(cfg, seed=7).double()
        model.eval()
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        target = (torch.rand(1, 1, 8, 8) > 0.5).double()

        loss = soft_dice_loss(model(x), target)
        params = list(model.parameters())
        analytic = torch.autograd.grad(loss, params)

        rng = np.random.default_rng(3)
        errs = []
        for p, a in zip(params, analytic):
            flat = p.data.view(-1)
            aflat = a.reshape(-1)
            for i in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
                orig = flat[i].item()
                flat[i] = orig + 1e-6
                with torch.no_grad():
                    up = float(soft_dice_loss(model(x), target))
                flat[i] = orig - 1e-6
                with torch.no_grad():
                    down = float(soft_dice_loss(model(x), target))
                flat[i] = orig
                fd = (up - down) / 2e-6
                if abs(aflat[i].item()) > 1e-6:
                    errs.append(abs(aflat[i].item() - fd) / abs(aflat[i].item()))
        assert errs and max(errs) <= 1e-3


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        cfg = ModelConfig(variant="attention_unet", depth=3, base_channels=4)
        model = build_model(cfg, seed=9)
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.config == cfg
        for pa, pb in zip(model.parameters(), back.parameters()):
            assert torch.equal(pa, pb)

    def test_version_field_required(self, tmp_path):
        torch.save({"config": {}, "state_dict": {}}, tmp_path / "bad.ckpt")
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "bad.ckpt")
