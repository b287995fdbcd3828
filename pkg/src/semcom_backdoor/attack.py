"""Trigger construction, dataset poisoning and attack evaluation."""

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import torch

from .model import (
    ChannelSpec,
    EmptyInputError,
    LabeledDataset,
    SemanticAutoencoder,
    ShapeMismatchError,
    channel_transmit,
    psnr,
)


class GeometryError(ValueError):
    pass


class InvalidPlanError(ValueError):
    pass


@dataclass
class TriggerSpec:
    """Blend mask and pattern: triggered x = mask * x + (1 - mask) * pattern."""

    mask: torch.Tensor
    pattern: torch.Tensor

    def __post_init__(self):
        if self.mask.shape != self.pattern.shape:
            raise ShapeMismatchError("mask and pattern must share a shape")
        for t in (self.mask, self.pattern):
            if t.min() < 0 or t.max() > 1:
                raise ValueError("mask/pattern elements must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "shape": list(self.mask.shape),
            "mask": self.mask.flatten().tolist(),
            "pattern": self.pattern.flatten().tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TriggerSpec":
        shape = d["shape"]
        return cls(
            torch.tensor(d["mask"], dtype=torch.float32).reshape(shape),
            torch.tensor(d["pattern"], dtype=torch.float32).reshape(shape),
        )


@dataclass
class PoisonPlan:
    poison_ratio: float
    target_symbol: torch.Tensor
    target_label: int = 0
    poisoned_indices: Optional[list] = None
    patch_geometry: Optional[dict] = None

    def __post_init__(self):
        if self.poison_ratio >= 1.0 or self.poison_ratio < 0.0:
            raise InvalidPlanError("poison_ratio must lie in [0, 1)")
        if self.poison_ratio >= 0.5:
            warnings.warn(
                "poison_ratio >= 0.5 breaks the median-dominance assumption of the "
                "pruning defense",
                stacklevel=2,
            )

    def to_json_dict(self) -> dict:
        return {
            "poison_ratio": self.poison_ratio,
            "target_label": self.target_label,
            "poisoned_indices": None if self.poisoned_indices is None
            else sorted(int(i) for i in self.poisoned_indices),
            "patch_geometry": self.patch_geometry,
            "target_symbol": self.target_symbol.flatten().tolist(),
            "target_shape": list(self.target_symbol.shape),
        }


def apply_trigger(x: torch.Tensor, trig: TriggerSpec) -> torch.Tensor:
    """Blend the trigger into one symbol or a batch of symbols."""
    if x.shape[-trig.mask.dim():] != trig.mask.shape:
        raise ShapeMismatchError("symbol and trigger shapes do not match")
    return trig.mask * x + (1.0 - trig.mask) * trig.pattern


def make_patch_trigger(shape, patch_h: int, patch_w: int, position=(0, 0),
                       color=1.0) -> TriggerSpec:
    """Square-patch trigger: overwrite a patch_h x patch_w region with a color."""
    h, w, c = shape
    r0, c0 = position
    if r0 < 0 or c0 < 0 or r0 + patch_h > h or c0 + patch_w > w:
        raise GeometryError(f"{patch_h}x{patch_w} patch at {position} exceeds {h}x{w}")
    if isinstance(color, (int, float)):
        color = [float(color)] * c
    if len(color) != c or any(v < 0 or v > 1 for v in color):
        raise ValueError("color must give one [0,1] value per channel")
    mask = torch.ones(shape, dtype=torch.float32)
    pattern = torch.zeros(shape, dtype=torch.float32)
    mask[r0 : r0 + patch_h, c0 : c0 + patch_w, :] = 0.0
    pattern[r0 : r0 + patch_h, c0 : c0 + patch_w, :] = torch.tensor(color)
    return TriggerSpec(mask, pattern)


def draw_poison_indices(n: int, poison_ratio: float, generator: torch.Generator) -> list:
    count = int(poison_ratio * n)
    return sorted(torch.randperm(n, generator=generator)[:count].tolist())


def poison_datasets(d_transmit: LabeledDataset, d_receive: LabeledDataset,
                    plan: PoisonPlan, trig: TriggerSpec,
                    generator: Optional[torch.Generator] = None):
    """Poison paired datasets in the transmit/receive pattern.

    Triggered transmit symbols, target-replaced receive symbols.  Returns
    (poisoned_transmit, poisoned_receive, plan) where the plan carries the
    realized index set; the inputs are left untouched so the originals stay
    available for diagnostics.
    """
    n = len(d_transmit)
    if n != len(d_receive):
        raise ValueError("datasets must be paired with equal length")
    indices = plan.poisoned_indices
    if indices is None:
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        indices = draw_poison_indices(n, plan.poison_ratio, generator)
    indices = sorted(set(int(i) for i in indices))
    if indices and (indices[0] < 0 or indices[-1] >= n):
        raise InvalidPlanError("poisoned index out of range")
    out_t = d_transmit.clone()
    out_r = d_receive.clone()
    if indices:
        idx = torch.tensor(indices, dtype=torch.long)
        out_t.symbols[idx] = apply_trigger(out_t.symbols[idx], trig)
        out_r.symbols[idx] = plan.target_symbol
        if out_r.labels is not None:
            out_r.labels[idx] = plan.target_label
    realized = PoisonPlan(plan.poison_ratio, plan.target_symbol, plan.target_label,
                          indices, plan.patch_geometry)
    return out_t, out_r, realized


def evaluate_attack(model: SemanticAutoencoder, clean_set: LabeledDataset,
                    trig: TriggerSpec, target: torch.Tensor,
                    channel: ChannelSpec, generator=None):
    """Mean clean-reconstruction PSNR and mean triggered-vs-target PSNR."""
    if len(clean_set) == 0:
        raise EmptyInputError("empty evaluation set")
    with torch.no_grad():
        xs = clean_set.symbols
        recon_c = model.decode(channel_transmit(model.encode(xs), channel, generator))
        triggered = apply_trigger(xs, trig)
        recon_p = model.decode(channel_transmit(model.encode(triggered), channel, generator))
    psnrc = sum(psnr(recon_c[i], xs[i]) for i in range(len(xs))) / len(xs)
    psnrp = sum(psnr(recon_p[i], target) for i in range(len(xs))) / len(xs)
    return psnrc, psnrp


def detect_duplicate_targets(d_receive: LabeledDataset, similarity_threshold: float):
    """Flag index pairs whose normalized similarity exceeds the threshold.

    Similarity = 1 - mean absolute difference; identical receiver-side targets
    show up as a clique of flagged pairs.
    """
    if not (0.0 < similarity_threshold <= 1.0):
        raise ValueError("similarity_threshold must lie in (0, 1]")
    flat = d_receive.symbols.flatten(1)
    n = flat.shape[0]
    pairs = []
    for i in range(n - 1):
        dist = (flat[i + 1 :] - flat[i]).abs().mean(dim=1)
        sim = 1.0 - dist
        for off in torch.nonzero(sim > similarity_threshold).flatten().tolist():
            pairs.append((i, i + 1 + off))
    return pairs


def save_attack_config(path, plan: PoisonPlan, trig: TriggerSpec):
    with open(path, "w") as f:
        json.dump({"plan": plan.to_json_dict(), "trigger": trig.to_json_dict()}, f)


def load_attack_config(path):
    with open(path) as f:
        d = json.load(f)
    trig = TriggerSpec.from_json_dict(d["trigger"])
    p = d["plan"]
    target = torch.tensor(p["target_symbol"], dtype=torch.float32).reshape(p["target_shape"])
    plan = PoisonPlan(p["poison_ratio"], target, p["target_label"],
                      p["poisoned_indices"], p.get("patch_geometry"))
    return plan, trig
