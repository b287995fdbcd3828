"""Semantic-communication autoencoder: encoder, AWGN channel, decoder, training, PSNR."""

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

PSNR_CAP_DB = 200.0


class ShapeMismatchError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class DegenerateLatentError(ValueError):
    """Raised when a latent cannot be power-normalized (all zeros)."""


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "awgn"
    snr_db: float = 10.0

    def __post_init__(self):
        if self.kind != "awgn":
            raise ValueError(f"unsupported channel kind: {self.kind!r}")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")

    @property
    def noise_variance(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.0008
    batch_size: int = 64
    compression_ratio: float = 0.25
    seed: int = 0
    channel: ChannelSpec = field(default_factory=ChannelSpec)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 < self.compression_ratio <= 1.0):
            raise ValueError("compression_ratio must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LabeledDataset:
    """Paired symbols (N, H, W, C) in [0, 1] with optional integer labels."""

    symbols: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.symbols.dim() != 4:
            raise ShapeMismatchError("symbols must have shape (N, H, W, C)")
        if self.labels is not None:
            if not torch.is_tensor(self.labels):
                self.labels = torch.as_tensor(self.labels, dtype=torch.long)
            if len(self.labels) != len(self.symbols):
                raise ValueError("labels and symbols must have the same length")

    def __len__(self):
        return self.symbols.shape[0]

    @property
    def symbol_shape(self):
        return tuple(self.symbols.shape[1:])

    def clone(self) -> "LabeledDataset":
        labels = None if self.labels is None else self.labels.clone()
        return LabeledDataset(self.symbols.clone(), labels)


def _as_batch(x: torch.Tensor, expected_shape) -> tuple[torch.Tensor, bool]:
    """Accept (H, W, C) or (N, H, W, C); return channel-first batch and squeeze flag."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
        squeeze = True
    elif x.dim() == 4:
        squeeze = False
    else:
        raise ShapeMismatchError(f"expected 3 or 4 dims, got {x.dim()}")
    if tuple(x.shape[1:]) != tuple(expected_shape):
        raise ShapeMismatchError(
            f"symbol shape {tuple(x.shape[1:])} does not match model input {tuple(expected_shape)}"
        )
    return x.permute(0, 3, 1, 2), squeeze


def _down_sizes(h: int, w: int):
    """Spatial sizes after each of the four stride-2 encoder convs."""
    sizes = [(h, w)]
    for _ in range(4):
        h = (h + 1) // 2
        w = (w + 1) // 2
        sizes.append((h, w))
    return sizes


class SemanticAutoencoder(nn.Module):
    """Fully convolutional encoder/decoder pair for image-valued symbols.

    The encoder is four stride-2 conv layers followed by a 1-stride conv that
    maps to the channel-symbol feature map; the latent is that map flattened.
    Aggressive downsampling gives every latent cell a near-global receptive
    field, so any input-to-latent interaction has to travel through the conv
    channels rather than through a dense shortcut.  The decoder mirrors the
    encoder with transposed convolutions and a final sigmoid keeps the
    reconstruction in [0, 1].  Layer stages are exposed as an ordered list so
    split training and kernel pruning can address them by index.
    """

    ENCODER_CHANNELS = (32, 32, 64, 64)

    def __init__(self, input_shape=(28, 28, 1), compression_ratio=0.25):
        super().__init__()
        h, w, c = input_shape
        if h < 16 or w < 16:
            raise ValueError("input height/width must be at least 16")
        self.input_shape = (h, w, c)
        self.compression_ratio = float(compression_ratio)
        sizes = _down_sizes(h, w)
        hb, wb = sizes[-1]
        self.latent_channels = max(1, round(compression_ratio * h * w * c / (hb * wb)))
        self.latent_map_shape = (self.latent_channels, hb, wb)
        self.latent_dim = self.latent_channels * hb * wb
        ch = self.ENCODER_CHANNELS

        def down(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU())

        self.enc_conv1 = down(c, ch[0])
        self.enc_conv2 = down(ch[0], ch[1])
        self.enc_conv3 = down(ch[1], ch[2])
        self.enc_conv4 = down(ch[2], ch[3])
        self.enc_symbols = nn.Sequential(
            nn.Conv2d(ch[3], self.latent_channels, 3, padding=1), nn.Flatten()
        )

        def up(cin, cout, target_odd, last=False):
            # kernel 4 doubles an even size, kernel 3 produces 2n-1 for odd targets
            k = 3 if target_odd else 4
            act = nn.Sigmoid() if last else nn.ReLU()
            return nn.Sequential(nn.ConvTranspose2d(cin, cout, k, stride=2, padding=1), act)

        odd = [s[0] % 2 == 1 for s in sizes[:-1]][::-1]  # target sizes, smallest first
        self.dec_proj = nn.Sequential(
            nn.Unflatten(1, self.latent_map_shape),
            nn.Conv2d(self.latent_channels, ch[3], 3, padding=1),
            nn.ReLU(),
        )
        self.dec_conv1 = up(ch[3], ch[2], odd[0])
        self.dec_conv2 = up(ch[2], ch[1], odd[1])
        self.dec_conv3 = up(ch[1], ch[0], odd[2])
        self.dec_conv4 = up(ch[0], c, odd[3], last=True)

    @property
    def encoder_stages(self):
        return [self.enc_conv1, self.enc_conv2, self.enc_conv3, self.enc_conv4,
                self.enc_symbols]

    @property
    def decoder_stages(self):
        return [self.dec_proj, self.dec_conv1, self.dec_conv2, self.dec_conv3, self.dec_conv4]

    @property
    def stages(self):
        """All layer stages in forward order, 0-based; the channel sits after stage 4."""
        return self.encoder_stages + self.decoder_stages

    @property
    def encoder_conv_layers(self):
        """The four downsampling encoder convs, 1-based layer indices 1..4 for pruning."""
        return [self.enc_conv1[0], self.enc_conv2[0], self.enc_conv3[0], self.enc_conv4[0]]

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        x, squeeze = _as_batch(x, self.input_shape)
        for stage in self.encoder_stages:
            x = stage(x)
        return x.squeeze(0) if squeeze else x

    def forward_features(self, x: torch.Tensor):
        """Per-conv-layer activation maps plus the final latent, in one pass."""
        x, squeeze = _as_batch(x, self.input_shape)
        feats = []
        for stage in self.encoder_stages[:4]:
            x = stage(x)
            feats.append(x.squeeze(0) if squeeze else x)
        latent = self.enc_symbols(x)
        return feats, latent.squeeze(0) if squeeze else latent

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        squeeze = latent.dim() == 1
        if squeeze:
            latent = latent.unsqueeze(0)
        if latent.shape[-1] != self.latent_dim:
            raise ShapeMismatchError(
                f"latent length {latent.shape[-1]} != latent_dim {self.latent_dim}"
            )
        x = latent
        for stage in self.decoder_stages:
            x = stage(x)
        x = x.permute(0, 2, 3, 1)
        if x.shape[1:] != torch.Size(self.input_shape):
            raise ShapeMismatchError("decoder output shape mismatch")
        return x.squeeze(0) if squeeze else x

    def forward(self, x, channel: Optional[ChannelSpec] = None, generator=None):
        z = self.encode(x)
        if channel is not None:
            z = channel_transmit(z, channel, generator)
        return self.decode(z)


def power_normalize(latent: torch.Tensor) -> torch.Tensor:
    """Scale each latent vector to unit average power."""
    squeeze = latent.dim() == 1
    z = latent.unsqueeze(0) if squeeze else latent
    sumsq = (z * z).sum(dim=-1, keepdim=True)
    if torch.any(sumsq == 0):
        raise DegenerateLatentError("all-zero latent cannot be power-normalized")
    z = z * torch.sqrt(z.shape[-1] / sumsq)
    return z.squeeze(0) if squeeze else z


def channel_transmit(latent: torch.Tensor, channel: ChannelSpec, generator=None) -> torch.Tensor:
    """Power-normalize, then add white Gaussian noise at the configured SNR."""
    if latent.numel() == 0:
        raise EmptyInputError("empty latent")
    z = power_normalize(latent)
    std = math.sqrt(channel.noise_variance)
    noise = torch.empty_like(z).normal_(0.0, 1.0, generator=generator) * std
    return z + noise


def psnr(reconstruction: torch.Tensor, target: torch.Tensor, r_max: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; zero-MSE inputs return the +200 dB cap."""
    if reconstruction.shape != target.shape:
        raise ShapeMismatchError("reconstruction/target shape mismatch")
    if r_max <= 0:
        raise ValueError("r_max must be > 0")
    mse = torch.mean((reconstruction.double() - target.double()) ** 2).item()
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(r_max * r_max / mse))


def noise_generator(seed: int, step: int) -> torch.Generator:
    """Per-step channel-noise stream so training noise replays exactly."""
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + step) % (2**63))
    return g


def build_model(symbol_shape, cfg: TrainConfig) -> SemanticAutoencoder:
    torch.manual_seed(cfg.seed)
    return SemanticAutoencoder(symbol_shape, cfg.compression_ratio)


def iterate_batches(n: int, batch_size: int, epochs: int, seed: int):
    """Yield (step, index tensor) with a reproducible per-epoch shuffle."""
    shuffle = torch.Generator()
    shuffle.manual_seed(seed + 1)
    step = 0
    for _ in range(epochs):
        perm = torch.randperm(n, generator=shuffle)
        for start in range(0, n, batch_size):
            yield step, perm[start : start + batch_size]
            step += 1


def train(d_transmit: LabeledDataset, d_receive: LabeledDataset, cfg: TrainConfig):
    """Train the autoencoder to reconstruct receiver-side symbols.

    Returns (model, loss_trace) where loss_trace holds one MSE value per
    optimizer step.  Fully reproducible from cfg.seed: model init, batch
    order and channel-noise draws are all seeded.
    """
    if len(d_transmit) == 0:
        raise EmptyInputError("empty training dataset")
    if len(d_transmit) != len(d_receive):
        raise ValueError("transmit/receive datasets must be the same length")
    model = build_model(d_transmit.symbol_shape, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.MSELoss()
    losses = []
    xs, ys = d_transmit.symbols, d_receive.symbols
    for step, idx in iterate_batches(len(xs), cfg.batch_size, cfg.epochs, cfg.seed):
        z = model.encode(xs[idx])
        z = channel_transmit(z, cfg.channel, noise_generator(cfg.seed, step))
        recon = model.decode(z)
        loss = loss_fn(recon, ys[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    return model, losses


def save_checkpoint(model: SemanticAutoencoder, directory, *, seed=None, epochs=None,
                    dataset_id=None):
    """Write a checkpoint directory: manifest.json (stable contract) + weights.pt."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "architecture": "conv4-autoencoder",
        "input_shape": list(model.input_shape),
        "compression_ratio": model.compression_ratio,
        "latent_dim": model.latent_dim,
        "seed": seed,
        "epochs": epochs,
        "dataset_id": dataset_id,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    torch.save(model.state_dict(), os.path.join(directory, "weights.pt"))


def load_checkpoint(directory) -> SemanticAutoencoder:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    model = SemanticAutoencoder(
        tuple(manifest["input_shape"]), manifest["compression_ratio"]
    )
    state = torch.load(os.path.join(directory, "weights.pt"), weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model
