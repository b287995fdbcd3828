"""Figure emission: every plot is written alongside a CSV twin of its series."""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .experiments import IncompleteDataError

FIGURE_KINDS = ("psnr_vs_snr", "psnr_vs_prune", "dc_curve", "f1_vs_poison")


def _write_series_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _save(fig, out_base):
    png = out_base + ".png"
    fig.savefig(png, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return png


def _records_by_metric(records, metric):
    return [r for r in records if r.metric == metric]


def psnr_vs_snr(records, out_base):
    psnrc = _records_by_metric(records, "PSNRC")
    psnrp = _records_by_metric(records, "PSNRP")
    if not psnrc:
        raise IncompleteDataError("no PSNRC records to plot")
    series = {}
    for r in psnrc + psnrp:
        label = f"{r.metric} poison={r.poison_ratio:g}"
        series.setdefault(label, []).append((r.snr_db, r.value))
    fig, ax = plt.subplots()
    rows = []
    for label, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        rows += [[label, p[0], p[1]] for p in pts]
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    _write_series_csv(out_base + ".csv", ["series", "snr_db", "psnr_db"], rows)
    return _save(fig, out_base), out_base + ".csv"


def psnr_vs_prune(ratio_stats, out_base):
    """ratio_stats: list of (ratio, clean_psnr, attack_psnr)."""
    if not ratio_stats:
        raise IncompleteDataError("no pruning sweep points to plot")
    ratios = [s[0] for s in ratio_stats]
    fig, ax = plt.subplots()
    ax.plot(ratios, [s[1] for s in ratio_stats], marker="o", label="clean PSNR")
    ax.plot(ratios, [s[2] for s in ratio_stats], marker="s", label="attack PSNR")
    ax.set_xlabel("pruning ratio")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    _write_series_csv(out_base + ".csv", ["ratio", "clean_psnr", "attack_psnr"],
                      [list(s) for s in ratio_stats])
    return _save(fig, out_base), out_base + ".csv"


def dc_curve(report, out_base):
    """Knee diagnostics from a PruneReport: d_c with a marker at pr*."""
    if len(report.pr_list) == 0:
        raise IncompleteDataError("empty pruning report")
    fig, ax = plt.subplots()
    ax.plot(report.pr_list, report.d_c, marker="o", label="d_c")
    ax.plot(report.pr_list, report.c_p, marker="s", label="poisoned drift c^p")
    ax.axvline(report.pr_star, color="red", linestyle="--",
               label=f"pr* = {report.pr_star:g}")
    ax.set_xlabel("pruning ratio")
    ax.legend()
    rows = [[r, float(report.c_p[i]), float(report.d_c[i]), int(r == report.pr_star)]
            for i, r in enumerate(report.pr_list)]
    _write_series_csv(out_base + ".csv", ["ratio", "c_p", "d_c", "is_pr_star"], rows)
    return _save(fig, out_base), out_base + ".csv"


def f1_vs_poison(records, out_base):
    f1s = _records_by_metric(records, "F1")
    if not f1s:
        raise IncompleteDataError("no F1 records to plot")
    by_ratio = {}
    for r in f1s:
        by_ratio.setdefault(r.poison_ratio, []).append(r.value)
    pts = sorted((ratio, sum(v) / len(v)) for ratio, v in by_ratio.items())
    fig, ax = plt.subplots()
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
    ax.set_xlabel("poison ratio")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.05)
    _write_series_csv(out_base + ".csv", ["poison_ratio", "f1"],
                      [list(p) for p in pts])
    return _save(fig, out_base), out_base + ".csv"


def emit_figures(records, kind, out_dir, report=None, ratio_stats=None):
    """Render one figure kind into out_dir; returns (png_path, csv_path)."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, kind)
    if kind == "psnr_vs_snr":
        return psnr_vs_snr(records, base)
    if kind == "psnr_vs_prune":
        return psnr_vs_prune(ratio_stats, base)
    if kind == "dc_curve":
        if report is None:
            raise IncompleteDataError("dc_curve needs a PruneReport")
        return dc_curve(report, base)
    if kind == "f1_vs_poison":
        return f1_vs_poison(records, base)
    raise ValueError(f"unknown figure kind {kind!r}; expected one of {FIGURE_KINDS}")
