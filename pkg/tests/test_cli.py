import os

import pytest
import yaml

from semcom_backdoor.cli import main


def write_config(path, out_dir, **overrides):
    cfg = {
        "subset_size": 40,
        "train": {"epochs": 1, "seed": 0},
        "snr_sweep": [10.0],
        "eval_size": 12,
        "defense": {"pr_list": [0.0, 0.1, 0.2], "defense_sample_count": 40,
                    "subsample_ratio": 0.1},
        "reveng": {"steps": 5, "pairs_per_batch": 6, "scan_stride": 6},
        "output_dir": str(out_dir),
    }
    cfg.update(overrides)
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f)
    return str(path)


def run_cli(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "results"
    cfg_path = write_config(root / "cfg.yaml", out)
    return root, out, cfg_path


class TestHappyPath:
    def test_ingest(self, workspace):
        _, out, cfg = workspace
        assert run_cli(["--config", cfg, "ingest"]) == 0
        assert (out / "synthetic_subset.pt").exists()

    def test_train(self, workspace):
        _, out, cfg = workspace
        assert run_cli(["--config", cfg, "train"]) == 0
        assert (out / "clean_model" / "manifest.json").exists()

    def test_attack_then_evaluate_plot_replay(self, workspace):
        _, out, cfg = workspace
        assert run_cli(["--config", cfg, "attack"]) == 0
        records = out / "attack_records.csv"
        assert records.exists()

        assert run_cli(["--config", cfg, "evaluate",
                        "--model", str(out / "backdoored_model")]) == 0

        assert run_cli(["--config", cfg, "plot", "--records", str(records),
                        "--kind", "psnr_vs_snr"]) == 0
        assert (out / "psnr_vs_snr.png").exists()
        assert (out / "psnr_vs_snr.csv").exists()

        assert run_cli(["replay", "--manifest",
                        str(out / "manifest.json")]) == 0

    def test_replay_detects_tampering(self, workspace):
        _, out, cfg = workspace
        records = out / "attack_records.csv"
        original = records.read_text()
        records.write_text(original[:-4] + "9\n")
        try:
            assert run_cli(["replay", "--manifest",
                            str(out / "manifest.json")]) == 4
        finally:
            records.write_text(original)

    def test_split_train(self, workspace, tmp_path):
        root, _, _ = workspace
        out = tmp_path / "split"
        cfg = write_config(tmp_path / "cfg.yaml", out)
        assert run_cli(["--config", cfg, "split-train", "--k", "5", "--m", "2"]) == 0
        assert (out / "split_model" / "weights.pt").exists()
        assert (out / "exchange_log.csv").exists()


class TestDefend:
    def test_prune_and_reveng(self, workspace, tmp_path):
        out = tmp_path / "defense"
        cfg = write_config(tmp_path / "cfg.yaml", out)
        assert run_cli(["--config", cfg, "defend", "prune"]) == 0
        assert (out / "defense_records.csv").exists()
        assert (out / "prune_report.csv").exists()
        assert run_cli(["--config", cfg, "defend", "reveng"]) == 0
        assert (out / "reveng_trace.csv").exists()


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        cfg = write_config(tmp_path / "bad.yaml", tmp_path, subset_size=-4)
        assert run_cli(["--config", cfg, "ingest"]) == 2

    def test_unknown_config_key_is_2(self, tmp_path):
        cfg = write_config(tmp_path / "bad.yaml", tmp_path, bogus_field=1)
        assert run_cli(["--config", cfg, "ingest"]) == 2

    def test_missing_data_is_3(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.yaml", tmp_path, dataset="mnist",
                           data_dir=str(tmp_path / "nowhere"))
        assert run_cli(["--config", cfg, "ingest"]) == 3

    def test_missing_records_file_is_3(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.yaml", tmp_path)
        assert run_cli(["--config", cfg, "plot",
                        "--records", str(tmp_path / "absent.csv"),
                        "--kind", "psnr_vs_snr"]) == 3

    def test_seed_override_changes_output(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cfg = write_config(tmp_path / "cfg.yaml", out_a)
        assert run_cli(["--config", cfg, "--seed", "1", "ingest"]) == 0
        assert run_cli(["--config", cfg, "--seed", "2", "--out", str(out_b),
                        "ingest"]) == 0
        a = (out_a / "synthetic_subset.pt").read_bytes()
        b = (out_b / "synthetic_subset.pt").read_bytes()
        assert a != b
