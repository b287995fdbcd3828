"""Post-training pruning defense.

Ranks encoder kernels by median absolute activation sums, sweeps pruning
ratios, tracks per-sample latent drift, clusters drift to classify poisoned
samples, and picks the operating ratio at the knee of the drift-vs-ratio gap.
"""

import copy
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from sklearn.cluster import KMeans

from .model import EmptyInputError, SemanticAutoencoder


class NoSignalError(RuntimeError):
    """Drift values carry no clustering signal; no backdoor evidence."""


class InfeasibleRatioError(ValueError):
    pass


def default_ratio_list():
    return [round(0.025 * i, 3) for i in range(19)]  # 0 .. 0.45


@dataclass(frozen=True)
class PruneSweepConfig:
    pr_list: Sequence[float] = field(default_factory=default_ratio_list)
    first_layer: int = 2          # smallest pruned encoder layer (1-based)
    last_layer: int = 4           # largest pruned encoder layer
    subsample_ratio: float = 0.02
    defense_sample_count: int = 2000
    window: int = 3
    seed: int = 0
    paper_window_sum: bool = False
    largest_remainder: bool = False

    def __post_init__(self):
        pr = list(self.pr_list)
        if not pr or pr[0] != 0.0 or any(b <= a for a, b in zip(pr, pr[1:])):
            raise ValueError("pr_list must be strictly increasing and start at 0")
        if pr[-1] >= 1.0:
            raise ValueError("pruning ratios must stay below 1")
        if self.first_layer < 2 or self.first_layer > self.last_layer:
            raise ValueError("need 2 <= first_layer <= last_layer (layer 1 stays unpruned)")
        if self.window % 2 == 0 or self.window < 1:
            raise ValueError("window must be odd and >= 1")
        if not (0.0 < self.subsample_ratio <= 0.5):
            raise ValueError("subsample_ratio must lie in (0, 0.5]")


@dataclass(frozen=True)
class KernelScore:
    layer: int
    kernel: int
    median_abs_sum: float


@dataclass
class PruneReport:
    c_matrix: np.ndarray
    poison_labels: np.ndarray
    s_star: int
    c_p: np.ndarray
    c_bar: np.ndarray
    d_c: np.ndarray
    pr_star: float
    J: int
    pr_list: List[float]
    kernel_ranking: List[List[KernelScore]]
    sample_indices: List[int] = field(default_factory=list)
    no_signal: bool = False

    def export_csv(self, path):
        import csv

        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["ratio", "c_p", "c_bar", "d_c", "is_pr_star"])
            for i, r in enumerate(self.pr_list):
                w.writerow([r, repr(float(self.c_p[i])), repr(float(self.c_bar[i])),
                            repr(float(self.d_c[i])), int(r == self.pr_star)])


@dataclass
class P2Diagnostics:
    gamma: float
    term_backdoor: float
    term_clean_drift: float

    @property
    def objective(self) -> float:
        return self.term_backdoor + self.gamma * self.term_clean_drift


def kernel_counts(r: float, c_out: Sequence[int], first_layer: int = 2,
                  largest_remainder: bool = False) -> List[int]:
    """Per-layer pruned-kernel counts for ratio r over layers first_layer..last.

    Default follows the floor-plus-indicator rule; the largest-remainder
    variant instead distributes the full floor(r * total) budget.
    """
    if not (0.0 <= r < 1.0):
        raise ValueError("pruning ratio must lie in [0, 1)")
    if any(c < 1 for c in c_out):
        raise ValueError("output-channel counts must be >= 1")
    if largest_remainder:
        budget = math.floor(r * sum(c_out))
        base = [math.floor(c * r) for c in c_out]
        remainders = sorted(range(len(c_out)), key=lambda i: (-(c_out[i] * r % 1.0), i))
        extra = budget - sum(base)
        for i in remainders[:extra]:
            base[i] += 1
        return base
    total = sum(c_out)
    floor_of_sum = math.floor(sum(r * c for c in c_out))
    counts = []
    for offset, c in enumerate(c_out):
        indicator = 1 if floor_of_sum + offset < r * total else 0
        counts.append(math.floor(c * r) + indicator)
    return counts


def rank_kernels(model: SemanticAutoencoder, samples: torch.Tensor,
                 first_layer: int = 2, last_layer: int = 4) -> List[List[KernelScore]]:
    """Score kernels of layers first_layer..last_layer, ascending per layer.

    Score = median over samples of the absolute sum of the kernel's feature
    map.  Ties break on (layer, kernel index) so the ranking is deterministic.
    """
    if samples.shape[0] == 0:
        raise EmptyInputError("empty sample set for kernel ranking")
    with torch.no_grad():
        feats, _ = model.forward_features(samples)
    rankings = []
    for layer in range(first_layer, last_layer + 1):
        fmap = feats[layer - 1]  # (N, f_l, h, w)
        per_sample = fmap.abs().sum(dim=(2, 3))
        medians = per_sample.median(dim=0).values
        scores = [KernelScore(layer, k, float(medians[k])) for k in range(fmap.shape[1])]
        scores.sort(key=lambda s: (s.median_abs_sum, s.layer, s.kernel))
        rankings.append(scores)
    return rankings


def prune(model: SemanticAutoencoder, r: float, ranking: List[List[KernelScore]],
          first_layer: int = 2, largest_remainder: bool = False) -> SemanticAutoencoder:
    """Return a copy of the model with the lowest-ranked kernels zeroed out."""
    convs = model.encoder_conv_layers
    c_out = [len(layer_scores) for layer_scores in ranking]
    counts = kernel_counts(r, c_out, first_layer, largest_remainder)
    pruned = copy.deepcopy(model)
    pruned_convs = pruned.encoder_conv_layers
    with torch.no_grad():
        for layer_scores, count in zip(ranking, counts):
            if count > len(layer_scores):
                raise InfeasibleRatioError(
                    f"cannot prune {count} of {len(layer_scores)} kernels"
                )
            for score in layer_scores[:count]:
                conv = pruned_convs[score.layer - 1]
                conv.weight[score.kernel].zero_()
                conv.bias[score.kernel].zero_()
    pruned.eval()
    return pruned


def latents(model: SemanticAutoencoder, samples: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model.encode(samples)


def feature_change_curve(model: SemanticAutoencoder, d_sub: torch.Tensor,
                         cfg: PruneSweepConfig, ranking=None):
    """Relative L1 latent drift per (ratio index, sample).

    Returns (c_matrix of shape (S+1, Q'), kept sample indices).  Samples with
    a zero-norm baseline latent are dropped with a warning.  Forward passes
    are noiseless so the curve reflects pruning-induced drift only.
    """
    if ranking is None:
        ranking = rank_kernels(model, d_sub, cfg.first_layer, cfg.last_layer)
    v0 = latents(model, d_sub)
    norms = v0.abs().sum(dim=1)
    keep = torch.nonzero(norms > 0).flatten()
    if len(keep) < len(norms):
        warnings.warn(f"excluded {len(norms) - len(keep)} zero-latent samples", stacklevel=2)
    v0, norms = v0[keep], norms[keep]
    rows = [np.zeros(len(keep))]
    for r in list(cfg.pr_list)[1:]:
        pruned = prune(model, r, ranking, cfg.first_layer, cfg.largest_remainder)
        vs = latents(pruned, d_sub)[keep]
        rows.append(((vs - v0).abs().sum(dim=1) / norms).numpy())
    return np.stack(rows), keep.tolist()


def classify_poisoned(c_matrix: np.ndarray, n: float, seed: int = 0):
    """Label samples as poisoned via 2-centroid K-means on the drift scalar.

    The ratio index with the largest drift variance (s*) supplies the scalar;
    the top/bottom ceil(n*Q) samples seed the two clusters.
    """
    if not (0.0 < n <= 0.5):
        raise ValueError("subsample ratio n must lie in (0, 0.5]")
    q = c_matrix.shape[1]
    if math.ceil(n * q) < 1:
        raise ValueError("n * Q must be >= 1")
    variances = c_matrix.var(axis=1)
    s_star = int(variances.argmax())
    row = c_matrix[s_star]
    if np.ptp(row) == 0.0:
        raise NoSignalError("drift values identical at s*; no backdoor evidence")
    k = math.ceil(n * q)
    order = np.argsort(row, kind="stable")
    seeds = np.concatenate([row[order[:k]], row[order[-k:]]])
    init = np.array([[seeds[:k].mean()], [seeds[k:].mean()]])
    km = KMeans(n_clusters=2, init=init, n_init=1, random_state=seed)
    km.fit(seeds.reshape(-1, 1))
    assign = km.predict(row.reshape(-1, 1))
    poisoned_cluster = int(km.cluster_centers_.flatten().argmax())
    return (assign == poisoned_cluster), s_star


def poisoned_curve(c_matrix: np.ndarray, poison_labels: np.ndarray) -> np.ndarray:
    """Mean drift curve over the samples classified as poisoned."""
    j = int(np.count_nonzero(poison_labels))
    if j == 0:
        raise NoSignalError("no samples classified as poisoned")
    return c_matrix[:, poison_labels].mean(axis=1)


def _minmax(v: np.ndarray) -> np.ndarray:
    span = v.max() - v.min()
    if span == 0:
        return np.zeros_like(v)
    return (v - v.min()) / span


def find_knee(c_p: np.ndarray, pr_list: Sequence[float], w: int = 3,
              paper_window_sum: bool = False):
    """Knee of the smoothed poisoned-drift curve against the ratio axis.

    Pads (w-1)/2 zeros on both ends, window-averages, then maximizes
    d_c = minmax(smoothed) - minmax(pr_list).  Ties resolve to the smallest
    ratio.  Returns (pr_star, d_c, c_bar).
    """
    pr = np.asarray(pr_list, dtype=float)
    c_p = np.asarray(c_p, dtype=float)
    if len(c_p) != len(pr):
        raise ValueError("c_p and pr_list must have equal length")
    if w % 2 == 0 or w < 1 or w > len(c_p):
        raise ValueError("w must be odd, >= 1 and <= len(c_p)")
    pad = (w - 1) // 2
    padded = np.concatenate([np.zeros(pad), c_p, np.zeros(pad)])
    terms = w + 1 if paper_window_sum else w
    c_bar = np.array([padded[s : s + terms].sum() / w for s in range(len(c_p))])
    d_c = _minmax(c_bar) - _minmax(pr)
    idx = int(d_c.argmax())  # argmax returns the first (smallest-ratio) maximizer
    return float(pr[idx]), d_c, c_bar


def prune_defense(model: SemanticAutoencoder, d_defense: torch.Tensor,
                  cfg: PruneSweepConfig):
    """Full defense pipeline; returns (model pruned at pr*, PruneReport).

    No-signal outcomes (clean model, nothing classified poisoned) return the
    unpruned model with pr* = 0.
    """
    ranking = rank_kernels(model, d_defense, cfg.first_layer, cfg.last_layer)
    c_matrix, kept = feature_change_curve(model, d_defense, cfg, ranking)
    pr = list(cfg.pr_list)
    try:
        labels, s_star = classify_poisoned(c_matrix, cfg.subsample_ratio, cfg.seed)
        c_p = poisoned_curve(c_matrix, labels)
    except NoSignalError:
        report = PruneReport(
            c_matrix, np.zeros(c_matrix.shape[1], dtype=bool), 0,
            np.zeros(len(pr)), np.zeros(len(pr)), np.zeros(len(pr)),
            0.0, 0, pr, ranking, kept, no_signal=True,
        )
        return model, report
    pr_star, d_c, c_bar = find_knee(c_p, pr, cfg.window, cfg.paper_window_sum)
    pruned = prune(model, pr_star, ranking, cfg.first_layer, cfg.largest_remainder)
    report = PruneReport(c_matrix, labels, s_star, c_p, c_bar, d_c, pr_star,
                         int(labels.sum()), pr, ranking, kept)
    return pruned, report


def p2_diagnostics(model, pruned_model, d_clean: torch.Tensor,
                   d_poisoned: torch.Tensor, d_poisoned_originals: torch.Tensor,
                   gamma: float, accuracy_fn) -> P2Diagnostics:
    """Simulator-only objective terms: backdoor residue vs clean-accuracy drift.

    accuracy_fn(model, inputs, references) -> scalar reconstruction accuracy.
    Requires ground-truth poison/clean splits, so it is unavailable outside
    simulation.
    """
    if d_poisoned.shape != d_poisoned_originals.shape:
        raise ValueError("poisoned set and its originals must align")
    acc_pc_w = accuracy_fn(model, d_poisoned_originals, d_poisoned_originals)
    acc_p_wp = accuracy_fn(pruned_model, d_poisoned, d_poisoned_originals)
    acc_c_w = accuracy_fn(model, d_clean, d_clean)
    acc_c_wp = accuracy_fn(pruned_model, d_clean, d_clean)
    return P2Diagnostics(
        gamma=gamma,
        term_backdoor=acc_pc_w - acc_p_wp,
        term_clean_drift=abs(acc_c_wp - acc_c_w),
    )
