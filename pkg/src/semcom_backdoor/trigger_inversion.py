"""Trigger reverse engineering by pairwise feature-collapse minimization.

A planted trigger forces every stamped input onto the same semantic feature,
so the trigger can be recovered by searching for the smallest blend (m, delta)
that collapses encoder features across distinct samples.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import torch

from .model import (
    ChannelSpec,
    EmptyInputError,
    LabeledDataset,
    SemanticAutoencoder,
    channel_transmit,
    power_normalize,
    psnr,
)
from .attack import TriggerSpec, apply_trigger


class InsufficientDataError(ValueError):
    pass


class OptimizationFailureError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


@dataclass
class RevEngConfig:
    lambda_reg: float = 2.0
    steps: int = 400
    step_size: float = 0.1
    pairs_per_batch: int = 16
    seed: int = 0
    scan_window: int = 4
    scan_stride: int = 2
    collapse_tau: float = 0.25

    def __post_init__(self):
        if self.lambda_reg <= 0:
            raise ValueError("lambda_reg must be positive")
        if self.steps < 1 or self.pairs_per_batch < 1:
            raise ValueError("steps and pairs_per_batch must be >= 1")
        if self.scan_window < 1 or self.scan_stride < 1:
            raise ValueError("scan_window and scan_stride must be >= 1")
        if not (0.0 < self.collapse_tau < 1.0):
            raise ValueError("collapse_tau must lie in (0, 1)")


@dataclass
class TriggerEstimate:
    trigger: TriggerSpec
    objective_trace: list = field(default_factory=list)
    final_mask_norm: float = 0.0

    def to_json_dict(self) -> dict:
        d = self.trigger.to_json_dict()
        d["final_mask_norm"] = self.final_mask_norm
        return d

    def export_trace_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "objective"])
            for i, v in enumerate(self.objective_trace):
                w.writerow([i, v])


def _pairwise_feature_term(model: SemanticAutoencoder, pairs: torch.Tensor,
                           m: torch.Tensor, delta: torch.Tensor,
                           normalized=False) -> torch.Tensor:
    xk = m * pairs[:, 0] + (1.0 - m) * delta
    xj = m * pairs[:, 1] + (1.0 - m) * delta
    fk = model.encode(xk)
    fj = model.encode(xj)
    if normalized:
        # compare the symbols the channel actually carries: unit-power latents
        fk = power_normalize(fk)
        fj = power_normalize(fj)
    return ((fk - fj) ** 2).sum()


def p1_objective(model: SemanticAutoencoder, pairs: torch.Tensor,
                 m: torch.Tensor, delta: torch.Tensor, lam: float) -> torch.Tensor:
    """Sum of squared feature distances over sample pairs plus lam * ||m||_1.

    pairs has shape (P, 2, H, W, C): P pairs of distinct samples.  The return
    value keeps the autograd graph so gradients w.r.t. m and delta are exact.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if pairs.numel() == 0 or pairs.shape[0] == 0:
        raise EmptyInputError("empty pair set")
    if pairs.shape[1] != 2:
        raise ValueError("pairs must stack two samples along dim 1")
    return _pairwise_feature_term(model, pairs, m, delta) + lam * m.abs().sum()


def _draw_pairs(symbols: torch.Tensor, count: int, generator: torch.Generator):
    n = symbols.shape[0]
    k = torch.randint(0, n, (count,), generator=generator)
    off = torch.randint(1, n, (count,), generator=generator)
    j = (k + off) % n  # distinct by construction
    return torch.stack([symbols[k], symbols[j]], dim=1)


def _scan_windows(model, symbols, pairs, base, cfg: RevEngConfig):
    """Coarse sweep: overwrite one square window per candidate, keep the best.

    Returns (relative collapse, row, col, color) for the window whose
    overwrite shrinks pairwise feature spread the most.  A planted patch
    trigger shows up as a deep minimum at its own position; gradient descent
    alone tends to settle into diffuse many-pixel overwrites instead.
    """
    h, w, c = symbols.shape[1:]
    win = cfg.scan_window
    best = None
    with torch.no_grad():
        for color in (0.0, 1.0):
            delta = torch.full((h, w, c), color)
            for r0 in range(0, h - win + 1, cfg.scan_stride):
                for c0 in range(0, w - win + 1, cfg.scan_stride):
                    m = torch.ones(h, w, c)
                    m[r0 : r0 + win, c0 : c0 + win] = 0.0
                    pt = float(_pairwise_feature_term(
                        model, pairs, m, delta, normalized=True
                    )) / base
                    if best is None or pt < best[0]:
                        best = (pt, r0, c0, color)
    return best


def estimate_trigger(model: SemanticAutoencoder, sample_set: LabeledDataset,
                     cfg: RevEngConfig) -> TriggerEstimate:
    """Recover a candidate trigger by minimizing pairwise feature collapse.

    Two phases: a coarse window scan locates the most collapse-inducing
    square overwrite, then gradient descent refines (m, delta) from that
    seed.  The refinement penalizes the overwrite mass ||1 - m||_1: charging
    ||m|| instead would make m = 0 (overwrite everything) the global minimum,
    which collapses features on any model and recovers nothing.  Features are
    compared after power normalization because that is the symbol the channel
    carries; a backdoor only needs to collapse the normalized latent.  A
    logistic bijection keeps every iterate of (m, delta) strictly in (0, 1).
    """
    if len(sample_set) < 2:
        raise InsufficientDataError("need at least 2 samples to form pairs")
    symbols = sample_set.symbols
    shape = symbols.shape[1:]
    n_el = symbols[0].numel()
    gen = torch.Generator().manual_seed(cfg.seed)
    eval_pairs = _draw_pairs(symbols, cfg.pairs_per_batch * 4, gen)
    with torch.no_grad():
        base = float(_pairwise_feature_term(
            model, eval_pairs, torch.ones(shape), torch.zeros(shape),
            normalized=True,
        ))
    if base <= 0:
        raise OptimizationFailureError("degenerate sample set: zero feature spread")

    _, r0, c0, color = _scan_windows(model, symbols, eval_pairs, base, cfg)
    a = torch.full(shape, 3.0)
    a[r0 : r0 + cfg.scan_window, c0 : c0 + cfg.scan_window] = -3.0
    b = torch.full(shape, 2.0 if color > 0.5 else -2.0)
    a.requires_grad_(True)
    b.requires_grad_(True)
    opt = torch.optim.Adam([a, b], lr=cfg.step_size)

    lam = cfg.lambda_reg
    check_every = max(cfg.steps // 10, 1)
    last_mass = None
    best = None       # smallest collapsing trigger mass
    best_obj = None   # fallback when nothing collapses (clean model)
    trace = []
    for step in range(cfg.steps):
        pairs = _draw_pairs(symbols, cfg.pairs_per_batch, gen)
        m = torch.sigmoid(a)
        delta = torch.sigmoid(b)
        loss = (_pairwise_feature_term(model, pairs, m, delta, normalized=True)
                / base + lam * (1.0 - m).abs().sum() / n_el)
        if not torch.isfinite(loss):
            raise OptimizationFailureError(
                f"objective diverged at step {step}", trace
            )
        opt.zero_grad()
        loss.backward()
        opt.step()

        with torch.no_grad():
            m = torch.sigmoid(a)
            delta = torch.sigmoid(b)
            mass = float((1.0 - m).abs().sum())
            pt = float(_pairwise_feature_term(
                model, eval_pairs, m, delta, normalized=True
            )) / base
            obj = pt + cfg.lambda_reg * mass / n_el
        if pt < cfg.collapse_tau and (best is None or mass < best[0]):
            best = (mass, m.clone(), delta.clone())
        if best_obj is None or obj < best_obj[0]:
            best_obj = (obj, m.clone(), delta.clone())
            trace.append(obj)
        if (step + 1) % check_every == 0:
            # double the penalty whenever the trigger mass stops shrinking
            if last_mass is not None and mass > 0.98 * last_mass:
                lam *= 2.0
            last_mass = mass

    _, m, delta = best if best is not None else best_obj
    eps = 1e-6  # strict interior even after float32 sigmoid saturation
    m = m.clamp(eps, 1.0 - eps)
    delta = delta.clamp(eps, 1.0 - eps)
    trig = TriggerSpec(m, delta)
    return TriggerEstimate(trig, trace, float(m.abs().sum()))


def _mean_pairwise_psnr(recon: torch.Tensor) -> float:
    n = recon.shape[0]
    total, count = 0.0, 0
    for i in range(n - 1):
        for j in range(i + 1, n):
            total += psnr(recon[i], recon[j])
            count += 1
    return total / count


def verify_trigger(model: SemanticAutoencoder, est, samples: LabeledDataset,
                   channel: ChannelSpec, generator=None) -> float:
    """Activation score: triggered-output collapse minus the clean baseline.

    Reconstructions of distinct triggered inputs agreeing with each other
    (high mean pairwise PSNR) means the candidate trigger drives the model to
    a single target; subtracting the untriggered statistic removes whatever
    similarity the data already has.
    """
    if len(samples) < 2:
        raise InsufficientDataError("need at least 2 samples")
    trig = est.trigger if isinstance(est, TriggerEstimate) else est
    xs = samples.symbols
    with torch.no_grad():
        rc = model.decode(channel_transmit(model.encode(xs), channel, generator))
        rt = model.decode(channel_transmit(
            model.encode(apply_trigger(xs, trig)), channel, generator
        ))
    return _mean_pairwise_psnr(rt) - _mean_pairwise_psnr(rc)
