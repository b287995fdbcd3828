import numpy as np
import pytest

from semcom_backdoor.experiments import IncompleteDataError, ResultRecord
from semcom_backdoor.figures import FIGURE_KINDS, emit_figures
from semcom_backdoor.pruning import PruneReport


def rec(metric, value, ratio=0.1, snr=10.0, seed=0):
    return ResultRecord("fig-test", metric, value, ratio, snr, 0.25, seed)


def make_report(pr_star=0.1):
    pr = [0.0, 0.1, 0.2]
    return PruneReport(
        c_matrix=np.zeros((3, 5)),
        poison_labels=np.array([True, False, False, False, False]),
        s_star=1,
        c_p=np.array([0.0, 0.8, 0.9]),
        c_bar=np.array([0.26, 0.56, 0.56]),
        d_c=np.array([0.0, 0.4, -0.1]),
        pr_star=pr_star,
        J=1,
        pr_list=pr,
        kernel_ranking=[],
        sample_indices=[0, 1, 2, 3, 4],
    )


class TestPsnrVsSnr:
    def test_png_and_csv_twin(self, tmp_path):
        records = [rec("PSNRC", 20.0, snr=1.0), rec("PSNRC", 24.0, snr=9.0),
                   rec("PSNRP", 8.0, snr=1.0), rec("PSNRP", 9.0, snr=9.0),
                   rec("PSNRC", 25.0, ratio=0.0, snr=1.0)]
        png, csv_twin = emit_figures(records, "psnr_vs_snr", tmp_path)
        assert png.endswith(".png") and csv_twin.endswith(".csv")
        lines = open(csv_twin).read().strip().splitlines()
        assert lines[0] == "series,snr_db,psnr_db"
        assert len(lines) == 6

    def test_empty_raises(self, tmp_path):
        with pytest.raises(IncompleteDataError):
            emit_figures([], "psnr_vs_snr", tmp_path)


class TestPsnrVsPrune:
    def test_series(self, tmp_path):
        stats = [(0.0, 24.0, 20.0), (0.1, 23.5, 12.0), (0.2, 22.0, 9.0)]
        png, csv_twin = emit_figures([], "psnr_vs_prune", tmp_path,
                                     ratio_stats=stats)
        lines = open(csv_twin).read().strip().splitlines()
        assert lines[0] == "ratio,clean_psnr,attack_psnr"
        assert len(lines) == 4

    def test_empty_raises(self, tmp_path):
        with pytest.raises(IncompleteDataError):
            emit_figures([], "psnr_vs_prune", tmp_path, ratio_stats=[])


class TestDcCurve:
    def test_marks_knee_row(self, tmp_path):
        png, csv_twin = emit_figures([], "dc_curve", tmp_path,
                                     report=make_report(pr_star=0.1))
        rows = open(csv_twin).read().strip().splitlines()[1:]
        flags = [row.split(",")[-1] for row in rows]
        assert flags == ["0", "1", "0"]

    def test_missing_report_raises(self, tmp_path):
        with pytest.raises(IncompleteDataError):
            emit_figures([], "dc_curve", tmp_path)


class TestF1VsPoison:
    def test_mean_over_seeds(self, tmp_path):
        records = [rec("F1", 0.8, ratio=0.1, seed=0),
                   rec("F1", 0.6, ratio=0.1, seed=1),
                   rec("F1", 0.9, ratio=0.4, seed=0)]
        _, csv_twin = emit_figures(records, "f1_vs_poison", tmp_path)
        rows = [r.split(",") for r in open(csv_twin).read().strip().splitlines()[1:]]
        by_ratio = {float(a): float(b) for a, b in rows}
        assert by_ratio[0.1] == pytest.approx(0.7)
        assert by_ratio[0.4] == pytest.approx(0.9)


class TestDispatch:
    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ValueError):
            emit_figures([], "volcano", tmp_path)

    def test_kind_list_is_exhaustive(self):
        assert set(FIGURE_KINDS) == {"psnr_vs_snr", "psnr_vs_prune",
                                     "dc_curve", "f1_vs_poison"}
