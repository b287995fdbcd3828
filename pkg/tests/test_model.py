import math

import pytest
import torch

from semcom_backdoor.model import (
    ChannelSpec,
    DegenerateLatentError,
    EmptyInputError,
    LabeledDataset,
    PSNR_CAP_DB,
    SemanticAutoencoder,
    ShapeMismatchError,
    TrainConfig,
    channel_transmit,
    iterate_batches,
    load_checkpoint,
    noise_generator,
    power_normalize,
    psnr,
    save_checkpoint,
    train,
)
from conftest import fast_train_config


class TestChannelSpec:
    def test_noise_variance_formula(self):
        # variance = 10^(-snr/10): hand values
        assert ChannelSpec("awgn", 0.0).noise_variance == pytest.approx(1.0)
        assert ChannelSpec("awgn", 10.0).noise_variance == pytest.approx(0.1)
        assert ChannelSpec("awgn", 13.0).noise_variance == pytest.approx(10 ** -1.3)
        assert ChannelSpec("awgn", -3.0).noise_variance == pytest.approx(10 ** 0.3)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            ChannelSpec("rayleigh", 10.0)

    def test_rejects_non_finite_snr(self):
        with pytest.raises(ValueError):
            ChannelSpec("awgn", float("inf"))

    def test_empirical_noise_variance(self):
        # Monte-Carlo oracle: sample variance of the injected noise matches
        # the configured variance within 3 sigma of the estimator
        ch = ChannelSpec("awgn", 7.0)
        z = torch.ones(200, 500)
        out = channel_transmit(z, ch, torch.Generator().manual_seed(0))
        noise = out - power_normalize(z)
        est = noise.var().item()
        n = noise.numel()
        tol = 3.0 * ch.noise_variance * math.sqrt(2.0 / (n - 1))
        assert abs(est - ch.noise_variance) < tol


class TestPowerNormalize:
    def test_unit_average_power(self):
        z = torch.randn(5, 64, generator=torch.Generator().manual_seed(1))
        out = power_normalize(z)
        power = (out ** 2).mean(dim=1)
        assert torch.allclose(power, torch.ones(5), atol=1e-5)

    def test_single_vector(self):
        out = power_normalize(torch.tensor([3.0, 4.0]))
        assert (out ** 2).mean().item() == pytest.approx(1.0)

    def test_zero_latent_rejected(self):
        with pytest.raises(DegenerateLatentError):
            power_normalize(torch.zeros(4))

    def test_empty_latent_rejected(self):
        with pytest.raises(EmptyInputError):
            channel_transmit(torch.empty(0), ChannelSpec("awgn", 10.0))


class TestPsnr:
    def test_hand_computed_values(self):
        # exactly representable differences: MSE 0.0625 and 0.015625
        a = torch.zeros(10, 10, dtype=torch.float64)
        b = torch.full((10, 10), 0.25, dtype=torch.float64)
        assert psnr(b, a) == pytest.approx(10 * math.log10(16.0), abs=1e-9)
        c = torch.full((10, 10), 0.125, dtype=torch.float64)
        assert psnr(c, a) == pytest.approx(10 * math.log10(64.0), abs=1e-9)
        # MSE 0.01 -> 20 dB, up to float64 rounding of 0.1
        d = torch.full((10, 10), 0.1, dtype=torch.float64)
        assert psnr(d, a) == pytest.approx(20.0, abs=1e-6)
        assert psnr(d, a) == pytest.approx(10 * math.log10(1.0 / 0.1 ** 2), abs=1e-9)

    def test_rmax_scaling(self):
        a = torch.zeros(4)
        b = torch.full((4,), 0.5)
        # MSE 0.25 with r_max 2 -> 10*log10(4/0.25)
        assert psnr(b, a, r_max=2.0) == pytest.approx(10 * math.log10(16.0), abs=1e-9)

    def test_zero_mse_capped(self):
        a = torch.rand(3, 3)
        assert psnr(a, a.clone()) == PSNR_CAP_DB

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            psnr(torch.zeros(3), torch.zeros(4))

    def test_bad_rmax(self):
        with pytest.raises(ValueError):
            psnr(torch.zeros(3), torch.zeros(3), r_max=0.0)


class TestModelShapes:
    def test_latent_dim_follows_compression_ratio(self):
        m = SemanticAutoencoder((28, 28, 1), 0.25)
        # 28x28 source, 2x2 bottleneck map: 49 channels * 4 = 196 = 784/4
        assert m.latent_dim == 196

    def test_roundtrip_shapes(self):
        m = SemanticAutoencoder((28, 28, 1), 0.25)
        x = torch.rand(3, 28, 28, 1)
        z = m.encode(x)
        assert z.shape == (3, m.latent_dim)
        assert m.decode(z).shape == (3, 28, 28, 1)

    def test_single_symbol_squeeze(self):
        m = SemanticAutoencoder((28, 28, 1), 0.25)
        x = torch.rand(28, 28, 1)
        z = m.encode(x)
        assert z.shape == (m.latent_dim,)
        assert m.decode(z).shape == (28, 28, 1)

    def test_output_in_unit_interval(self):
        m = SemanticAutoencoder((28, 28, 1), 0.25)
        out = m(torch.rand(2, 28, 28, 1))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rejects_tiny_inputs(self):
        with pytest.raises(ValueError):
            SemanticAutoencoder((8, 8, 1), 0.25)

    def test_rejects_wrong_input_shape(self):
        m = SemanticAutoencoder((28, 28, 1), 0.25)
        with pytest.raises(ShapeMismatchError):
            m.encode(torch.rand(2, 32, 32, 1))

    def test_rejects_wrong_latent_length(self):
        m = SemanticAutoencoder((28, 28, 1), 0.25)
        with pytest.raises(ShapeMismatchError):
            m.decode(torch.rand(2, m.latent_dim + 1))

    def test_stage_accounting(self):
        m = SemanticAutoencoder((28, 28, 1), 0.25)
        assert len(m.stages) == 10
        assert len(m.encoder_conv_layers) == 4


class TestLabeledDataset:
    def test_requires_4d_symbols(self):
        with pytest.raises(ShapeMismatchError):
            LabeledDataset(torch.rand(5, 28, 28))

    def test_label_length_checked(self):
        with pytest.raises(ValueError):
            LabeledDataset(torch.rand(5, 28, 28, 1), torch.zeros(4))

    def test_clone_is_deep(self):
        d = LabeledDataset(torch.rand(2, 28, 28, 1), torch.zeros(2, dtype=torch.long))
        c = d.clone()
        c.symbols[0] += 1.0
        assert not torch.equal(c.symbols[0], d.symbols[0])


class TestTraining:
    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValueError):
            TrainConfig(compression_ratio=0.0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)

    def test_empty_dataset_rejected(self):
        d = LabeledDataset(torch.rand(0, 28, 28, 1))
        with pytest.raises(EmptyInputError):
            train(d, d, fast_train_config())

    def test_loss_decreases(self, small_data):
        d_t, d_r = small_data
        _, losses = train(d_t, d_r, fast_train_config(epochs=4))
        first = sum(losses[:3]) / 3
        last = sum(losses[-3:]) / 3
        assert last < first

    def test_deterministic_replay(self, small_data):
        d_t, d_r = small_data
        m1, l1 = train(d_t, d_r, fast_train_config(seed=5, epochs=2))
        m2, l2 = train(d_t, d_r, fast_train_config(seed=5, epochs=2))
        assert l1 == l2
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_batch_iteration_covers_all_indices(self):
        seen = []
        for _, idx in iterate_batches(10, 3, 1, seed=0):
            seen += idx.tolist()
        assert sorted(seen) == list(range(10))

    def test_noise_generator_is_step_dependent(self):
        g1 = noise_generator(7, 0)
        g2 = noise_generator(7, 1)
        a = torch.empty(4).normal_(0, 1, generator=g1)
        b = torch.empty(4).normal_(0, 1, generator=g2)
        assert not torch.equal(a, b)


class TestCheckpoint:
    def test_roundtrip(self, small_model, tmp_path):
        save_checkpoint(small_model, tmp_path / "ckpt", seed=0, epochs=3)
        loaded = load_checkpoint(tmp_path / "ckpt")
        x = torch.rand(2, 28, 28, 1, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            assert torch.equal(small_model.encode(x), loaded.encode(x))
