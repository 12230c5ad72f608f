"""Config parsing/validation/echo round-trip and the CLI surface."""

import json
import subprocess
import sys

import pytest

from flmae.config import ConfigError, load_config, parse_config_text, write_echo
from flmae.experiment import run_ablation

TINY = """
corpus.images = 120
eval.size = 8
partition.fractions = 0.5,0.3,0.2
fed.rounds = 4
fed.batch = 16
reps = 1
probe.images = 48
probe.epochs = 3
probe.seeds = 2
"""


class TestParsing:
    def test_empty_text_gives_defaults(self):
        cfg = parse_config_text("")
        assert cfg["fed.rounds"] == 40
        assert cfg["corpus.images"] == 9000
        assert cfg["eval.thresholds"] == [0.3, 0.1, 0.05, 0.01]

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config_text("# a comment\n\nseed = 11\n")
        assert cfg["seed"] == 11

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("fed.quantum = true")

    def test_invalid_mask_ratio_names_field_and_range(self):
        with pytest.raises(ConfigError, match=r"arch.mask_ratio.*\[0, 1\)"):
            parse_config_text("arch.mask_ratio = 1.5")

    def test_all_violations_listed_at_once(self):
        text = "arch.mask_ratio = 1.5\nfed.rounds = 0\nlr.cycle = 0"
        with pytest.raises(ConfigError) as err:
            parse_config_text(text)
        message = str(err.value)
        assert "arch.mask_ratio" in message
        assert "fed.rounds" in message
        assert "lr.cycle" in message

    def test_type_errors_reported(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_config_text("fed.rounds = soon")

    def test_echo_round_trip(self, tmp_path):
        cfg = parse_config_text(TINY)
        write_echo(cfg, tmp_path)
        reparsed = load_config(tmp_path / "effective_config.txt")
        assert reparsed.values == cfg.values

    def test_missing_file_is_config_error(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/path.cfg")

    def test_unknown_ablation_row_rejected(self):
        with pytest.raises(ConfigError, match="unknown row"):
            parse_config_text("ablation.rows = fedavg,fedprox")


class TestAblationReports:
    def test_row_count_and_rerun_byte_identical(self, tmp_path):
        cfg = parse_config_text(TINY)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_ablation(cfg, out1, rows=["fedavg", "fedmedian"], reps=2)
        run_ablation(cfg, out2, rows=["fedavg", "fedmedian"], reps=2)
        csv1 = (out1 / "ablation.csv").read_text().strip().split("\n")
        assert len(csv1) == 5  # header + 2 rows x 2 reps
        mismatches = []
        for p1 in sorted(out1.rglob("*")):
            if p1.is_file():
                p2 = out2 / p1.relative_to(out1)
                if p1.read_bytes() != p2.read_bytes():
                    mismatches.append(str(p1.relative_to(out1)))
        assert mismatches == []

    def test_empty_row_list_header_only(self, tmp_path):
        cfg = parse_config_text(TINY)
        run_ablation(cfg, tmp_path, rows=[], reps=1)
        lines = (tmp_path / "ablation.csv").read_text().strip().split("\n")
        assert len(lines) == 1
        assert lines[0].startswith("row,rep,seed,status")


def run_cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "flmae.cli", *args],
                          capture_output=True, text=True, cwd=cwd)


class TestCli:
    def test_config_error_exit_code_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("arch.mask_ratio = 2.0\n")
        proc = run_cli(["cost", "--config", str(bad), "--out", str(tmp_path)], tmp_path)
        assert proc.returncode == 2
        assert "mask_ratio" in proc.stderr

    def test_cost_command_with_override(self, tmp_path):
        proc = run_cli(["cost", "--params", "116.66e6", "--bytes-per-param", "4",
                        "--out", str(tmp_path / "out")], tmp_path)
        assert proc.returncode == 0, proc.stderr
        payload = json.loads((tmp_path / "out" / "cost.json").read_text())
        comm = payload["communication"]
        assert abs(comm["bidirectional_mb_per_round_per_client"] - 933.28) < 1e-9
        ref = comm["reference"]
        assert ref["reported_mb_per_round_per_client"] == 893.0
        assert (tmp_path / "out" / "effective_config.txt").exists()

    def test_pretrain_fed_and_compare_flow(self, tmp_path):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY)
        out_a = tmp_path / "run_a"
        proc = run_cli(["pretrain-fed", "--config", str(cfg), "--out", str(out_a),
                        "--strategy", "fedavg"], tmp_path)
        assert proc.returncode == 0, proc.stderr
        assert (out_a / "final.bin").exists()
        assert (out_a / "rounds.csv").exists()

        out_b = tmp_path / "run_b"
        proc = run_cli(["pretrain-central", "--config", str(cfg), "--seed", "9",
                        "--out", str(out_b)], tmp_path)
        assert proc.returncode == 0, proc.stderr

        out_c = tmp_path / "cmp"
        proc = run_cli(["compare", "--config", str(cfg), "--out", str(out_c),
                        "--model-a", str(out_a / "final.bin"),
                        "--model-b", str(out_b / "final.bin")], tmp_path)
        assert proc.returncode == 0, proc.stderr
        report = json.loads((out_c / "comparison.json").read_text())
        assert set(report) >= {"metric", "level", "n_units", "W", "p", "alpha",
                               "winner", "per_unit"}

    def test_probe_command(self, tmp_path):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY)
        out_a = tmp_path / "enc"
        proc = run_cli(["pretrain-fed", "--config", str(cfg), "--out", str(out_a)],
                       tmp_path)
        assert proc.returncode == 0, proc.stderr
        out_p = tmp_path / "probe"
        proc = run_cli(["probe", "--config", str(cfg), "--out", str(out_p),
                        "--encoder", str(out_a / "final.bin")], tmp_path)
        assert proc.returncode == 0, proc.stderr
        lines = (out_p / "probe.csv").read_text().strip().split("\n")
        assert lines[0] == ("mode,seed,accuracy,f1_macro,epochs,"
                            "encoder_checksum_pre,encoder_checksum_post")
        assert len(lines) == 1 + 2 * 2  # two modes x probe.seeds=2

    def test_aborted_run_exit_code_3(self, tmp_path):
        # an absurd SGD step explodes every client; all retries fail
        cfg = tmp_path / "explode.cfg"
        cfg.write_text(TINY + "fed.inner = sgd\nlr.gamma1 = 1e280\nlr.gamma2 = 1e280\n"
                              "fed.retries = 0\n")
        proc = run_cli(["pretrain-fed", "--config", str(cfg),
                        "--out", str(tmp_path / "out")], tmp_path)
        assert proc.returncode == 3
        assert "aborted" in proc.stderr

    def test_ablation_failed_row_continues(self, tmp_path):
        cfg = parse_config_text(TINY + "fed.inner = sgd\nlr.gamma1 = 1e280\n"
                                       "lr.gamma2 = 1e280\nfed.retries = 0\n")
        results = run_ablation(cfg, tmp_path, rows=["fedavg", "fedmedian"], reps=1)
        assert [r.status for r in results] == ["failed", "failed"]
        lines = (tmp_path / "ablation.csv").read_text().strip().split("\n")
        assert len(lines) == 3  # header + both rows present despite failures

    def test_round_log_columns(self, tmp_path):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY)
        out = tmp_path / "fed"
        proc = run_cli(["pretrain-fed", "--config", str(cfg), "--out", str(out)],
                       tmp_path)
        assert proc.returncode == 0, proc.stderr
        header = (out / "rounds.csv").read_text().split("\n")[0]
        assert header == ("t,strategy,lr,sampled_ids,completed,mean_local_loss,"
                          "eval_masked_mse,thre_0.3,thre_0.1,thre_0.05,thre_0.01,"
                          "bytes_up,bytes_down,cumulative_bytes")
