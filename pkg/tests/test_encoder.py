import numpy as np
import pytest
import torch

from vesselshot.encoder import (
    CheckpointError,
    Encoder,
    EncoderConfig,
    EncoderError,
    build_encoder,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)

TINY = EncoderConfig(levels=1, base_channels=4, feature_dim=2, instance_norm=False, seed=0)


def central_difference_grads(encoder, x, cotangent, h=1e-4):
    """Independent oracle: d<f(params, x), cotangent>/dparams by central differences."""
    grads = {}
    with torch.no_grad():
        for name, p in encoder.named_parameters():
            g = torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = (encoder(x) * cotangent).sum().item()
                flat[i] = orig - h
                minus = (encoder(x) * cotangent).sum().item()
                flat[i] = orig
                g.view(-1)[i] = (plus - minus) / (2 * h)
            grads[name] = g
    return grads


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = build_encoder(TINY), build_encoder(TINY)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = build_encoder(TINY)
        b = build_encoder(EncoderConfig(**{**TINY.__dict__, "seed": 1}))
        assert any(
            not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_levels1_has_no_down_up_stages(self):
        enc = build_encoder(TINY)
        names = [n for n, _ in enc.named_parameters()]
        assert not any("down" in n or "up" in n or "fuse" in n for n in names)

    @pytest.mark.parametrize(
        "cfg",
        [
            TINY,
            EncoderConfig(levels=2, base_channels=3, feature_dim=5, instance_norm=False),
            EncoderConfig(levels=3, base_channels=4, feature_dim=8, instance_norm=True),
        ],
    )
    def test_parameter_count_closed_form(self, cfg):
        assert build_encoder(cfg).num_parameters() == parameter_count(cfg)

    def test_invalid_config(self):
        with pytest.raises(EncoderError):
            EncoderConfig(levels=0)


class TestForward:
    def test_shape_contract(self):
        enc = build_encoder(EncoderConfig(levels=3, base_channels=4, feature_dim=16))
        out = enc(torch.randn(16, 16, 8))
        assert out.shape == (1, 16, 16, 16, 8)

    def test_resolution_restored_all_levels(self):
        for levels in (1, 2, 3):
            cfg = EncoderConfig(levels=levels, base_channels=2, feature_dim=3)
            out = build_encoder(cfg)(torch.randn(8, 8, 4))
            assert out.shape[2:] == (8, 8, 4)

    def test_zero_input_zero_output_without_norm(self):
        enc = build_encoder(TINY)
        out = enc(torch.zeros(4, 4, 2))
        assert torch.count_nonzero(out) == 0

    def test_divisibility_enforced(self):
        enc = build_encoder(EncoderConfig(levels=3, base_channels=2, feature_dim=2))
        with pytest.raises(EncoderError):
            enc(torch.randn(6, 6, 6))

    def test_deterministic(self):
        enc = build_encoder(TINY)
        x = torch.randn(4, 4, 2)
        assert torch.equal(enc(x), enc(x))


class TestBackward:
    def test_gradient_matches_central_differences(self):
        torch.manual_seed(0)
        enc = build_encoder(TINY).double()
        assert enc.num_parameters() <= 5000
        x = torch.randn(4, 4, 2, dtype=torch.float64)
        cot = torch.randn(1, 2, 4, 4, 2, dtype=torch.float64)
        (enc(x) * cot).sum().backward()
        fd = central_difference_grads(enc, x, cot)
        for name, p in enc.named_parameters():
            a, b = p.grad, fd[name]
            assert torch.all(
                (a - b).abs() <= 1e-3 * (a.abs() + b.abs()) + 1e-8
            ), f"gradient mismatch in {name}"

    def test_zero_cotangent_zero_gradient(self):
        enc = build_encoder(TINY)
        x = torch.randn(4, 4, 2)
        (enc(x) * 0.0).sum().backward()
        for p in enc.parameters():
            assert torch.count_nonzero(p.grad) == 0

    def test_gradient_linear_in_cotangent(self):
        x = torch.randn(4, 4, 2, dtype=torch.float64)
        cot = torch.randn(1, 2, 4, 4, 2, dtype=torch.float64)

        def grads(scale):
            enc = build_encoder(TINY).double()
            (enc(x) * (scale * cot)).sum().backward()
            return [p.grad.clone() for p in enc.parameters()]

        g1, g3 = grads(1.0), grads(3.0)
        for a, b in zip(g1, g3):
            assert torch.allclose(3.0 * a, b, atol=1e-9)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        enc = build_encoder(TINY)
        save_checkpoint(tmp_path / "c.pt", enc, extra={"iteration": 5})
        back, extra = load_checkpoint(tmp_path / "c.pt", expected=TINY)
        assert extra["iteration"] == 5
        for pa, pb in zip(enc.parameters(), back.parameters()):
            assert torch.equal(pa, pb)

    def test_config_mismatch_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "c.pt", build_encoder(TINY))
        other = EncoderConfig(levels=2, base_channels=4, feature_dim=2)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.pt", expected=other)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.pt")

    def test_garbage_file_rejected(self, tmp_path):
        (tmp_path / "bad.pt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.pt")
