"""U-shape split training: both datasets stay at the transmitter.

The transmitter computes layers 1..k (including the simulated wireless
channel after the encoder) and the tail past k+m; the receiver computes only
the middle slice k+1..k+m and never sees symbols, labels or targets.  The
two parties exchange explicit messages so the protocol itself is auditable,
and the arithmetic matches centralized training step for step.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .model import (
    EmptyInputError,
    LabeledDataset,
    TrainConfig,
    build_model,
    channel_transmit,
    iterate_batches,
    noise_generator,
)

CHANNEL_AFTER_LAYER = 5  # 1-based: the encoder's symbol layer feeds the channel


class SplitConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    k: int = 5
    m: int = 2
    base: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ExchangeMessage:
    step: int
    direction: str  # "to-receiver" | "to-transmitter"
    kind: str       # "activation" | "gradient" | "channel-symbol"
    element_count: int


class ExchangeLog:
    def __init__(self):
        self.messages = []

    def record(self, step, direction, kind, element_count):
        self.messages.append(ExchangeMessage(step, direction, kind, int(element_count)))

    def __len__(self):
        return len(self.messages)

    def __iter__(self):
        return iter(self.messages)

    def export_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "direction", "kind", "element_count"])
            for msg in self.messages:
                w.writerow([msg.step, msg.direction, msg.kind, msg.element_count])


class _ReceiverParty:
    """Holds only the middle layer slice; sees activations and gradients."""

    def __init__(self, stages, first_layer, learning_rate):
        self.stages = nn.ModuleList(stages)
        self.first_layer = first_layer  # 1-based index of the first owned layer
        self.opt = torch.optim.Adam(self.stages.parameters(), lr=learning_rate)
        self._inp = None
        self._out = None

    def forward(self, activation: torch.Tensor, channel_fn) -> torch.Tensor:
        self._inp = activation.detach().requires_grad_(True)
        h = self._inp
        for layer, stage in enumerate(self.stages, start=self.first_layer):
            h = stage(h)
            if layer == CHANNEL_AFTER_LAYER:
                h = channel_fn(h)
        self._out = h
        return h.detach()

    def backward(self, grad_out: torch.Tensor) -> torch.Tensor:
        self._out.backward(grad_out)
        return self._inp.grad.detach()

    def step(self):
        self.opt.step()
        self.opt.zero_grad()


def _validate(cfg: SplitConfig, total: int):
    if cfg.k < 1 or cfg.m < 1 or cfg.k + cfg.m >= total:
        raise SplitConfigError(
            f"need 1 <= k and k + m < {total} so the transmitter owns both ends "
            f"of the U; got k={cfg.k}, m={cfg.m}"
        )


def ushape_train(d_transmit: LabeledDataset, d_receive_local: LabeledDataset,
                 cfg: SplitConfig):
    """Split training run; returns (model, loss_trace, exchange_log).

    Numerically identical to centralized train() under the same TrainConfig:
    same init, batch order, channel noise and per-parameter Adam updates.
    """
    if len(d_transmit) == 0:
        raise EmptyInputError("empty training dataset")
    if len(d_transmit) != len(d_receive_local):
        raise ValueError("transmit/receive datasets must be the same length")
    base = cfg.base
    model = build_model(d_transmit.symbol_shape, base)
    stages = model.stages
    _validate(cfg, len(stages))
    k, m = cfg.k, cfg.m

    down = stages[:k]
    receiver = _ReceiverParty(stages[k : k + m], k + 1, base.learning_rate)
    up = stages[k + m :]
    tx_params = [p for s in down + up for p in s.parameters()]
    tx_opt = torch.optim.Adam(tx_params, lr=base.learning_rate)
    loss_fn = nn.MSELoss()
    log = ExchangeLog()
    losses = []
    xs, ys = d_transmit.symbols, d_receive_local.symbols

    for step, idx in iterate_batches(len(xs), base.batch_size, base.epochs, base.seed):
        h = xs[idx].permute(0, 3, 1, 2)
        for layer, stage in enumerate(down, start=1):
            h = stage(h)
            if layer == CHANNEL_AFTER_LAYER:
                h = channel_transmit(h, base.channel, noise_generator(base.seed, step))
        down_kind = "channel-symbol" if k >= CHANNEL_AFTER_LAYER else "activation"
        log.record(step, "to-receiver", down_kind, h.numel())

        mid = receiver.forward(
            h,
            lambda t: channel_transmit(t, base.channel,
                                       noise_generator(base.seed, step)),
        )
        log.record(step, "to-transmitter", "activation", mid.numel())

        tail_in = mid.requires_grad_(True)
        out = tail_in
        for layer, stage in enumerate(up, start=k + m + 1):
            out = stage(out)
            if layer == CHANNEL_AFTER_LAYER:
                out = channel_transmit(out, base.channel, noise_generator(base.seed, step))
        recon = out.permute(0, 2, 3, 1)
        loss = loss_fn(recon, ys[idx])
        tx_opt.zero_grad()
        loss.backward()
        log.record(step, "to-receiver", "gradient", tail_in.grad.numel())

        grad_h = receiver.backward(tail_in.grad)
        log.record(step, "to-transmitter", "gradient", grad_h.numel())
        h.backward(grad_h)

        tx_opt.step()
        receiver.step()
        losses.append(loss.item())
    model.eval()
    return model, losses, log


def receiver_view_audit(log: ExchangeLog) -> dict:
    """Confirm no label/target payload crossed to the receiver; tally traffic."""
    leaked = [m for m in log
              if m.direction == "to-receiver" and m.kind in ("label", "target")]
    totals = {"to-receiver": 0, "to-transmitter": 0}
    kinds = {}
    for m in log:
        totals[m.direction] = totals.get(m.direction, 0) + m.element_count
        kinds[(m.direction, m.kind)] = kinds.get((m.direction, m.kind), 0) + 1
    return {
        "label_or_target_to_receiver": len(leaked),
        "clean": not leaked,
        "elements_by_direction": totals,
        "message_counts": {f"{d}:{k}": v for (d, k), v in sorted(kinds.items())},
    }


def receiver_slice_gradient_check(d_transmit: LabeledDataset,
                                  d_receive_local: LabeledDataset,
                                  cfg: SplitConfig, n_coords: int = 5,
                                  eps: float = 1e-5, seed: int = 0):
    """Finite-difference check of receiver-slice gradients on one batch.

    Runs in float64 so the central difference at the given eps resolves the
    analytic gradient to well under 1e-3 relative.  The eps is kept small
    because a ReLU kink inside the +-eps interval contributes an O(eps)
    one-sided error that has nothing to do with gradient correctness.
    Returns the list of relative errors at randomly chosen
    receiver-parameter coordinates.
    """
    base = cfg.base
    model = build_model(d_transmit.symbol_shape, base).double()
    stages = model.stages
    _validate(cfg, len(stages))
    xs = d_transmit.symbols[: base.batch_size].double().permute(0, 3, 1, 2)
    ys = d_receive_local.symbols[: base.batch_size].double()

    def loss_value():
        h = xs
        for layer, stage in enumerate(stages, start=1):
            h = stage(h)
            if layer == CHANNEL_AFTER_LAYER:
                h = channel_transmit(h, base.channel, noise_generator(base.seed, 0))
        return nn.MSELoss()(h.permute(0, 2, 3, 1), ys)

    loss = loss_value()
    receiver_params = [p for s in stages[cfg.k : cfg.k + cfg.m] for p in s.parameters()]
    grads = torch.autograd.grad(loss, receiver_params)

    rng = torch.Generator().manual_seed(seed)
    errors = []
    for _ in range(n_coords):
        pi = int(torch.randint(0, len(receiver_params), (1,), generator=rng))
        param = receiver_params[pi]
        ci = int(torch.randint(0, param.numel(), (1,), generator=rng))
        with torch.no_grad():
            orig = param.view(-1)[ci].item()
            param.view(-1)[ci] = orig + eps
            up = loss_value().item()
            param.view(-1)[ci] = orig - eps
            down = loss_value().item()
            param.view(-1)[ci] = orig
        fd = (up - down) / (2 * eps)
        analytic = grads[pi].view(-1)[ci].item()
        denom = max(abs(fd), abs(analytic), 1e-12)
        errors.append(abs(fd - analytic) / denom)
    return errors
