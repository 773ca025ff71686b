import json

import pytest

from kbal import cli


def run(argv):
    return cli.main(argv)


class TestSimulate:
    def test_byte_identical_outputs(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        argv = ["simulate", "--users", "30", "--items", "30", "--seed", "7"]
        assert run(argv + ["--out-dir", str(out_a)]) == 0
        assert run(argv + ["--out-dir", str(out_b)]) == 0
        for name in ("train.txt", "test.txt", "propensities.txt"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run(["simulate", "--users", "30", "--items", "30", "--seed", "1",
             "--out-dir", str(out_a)])
        run(["simulate", "--users", "30", "--items", "30", "--seed", "2",
             "--out-dir", str(out_b)])
        assert (out_a / "train.txt").read_bytes() != (out_b / "train.txt").read_bytes()


TRAIN_OVERRIDES = ["--set", "max_epochs=2", "--set", "embedding_dim=4",
                   "--set", "batch_size_weight=256",
                   "--set", "batch_size_prediction=256",
                   "--set", "metric_k=3"]


class TestTrainEvaluate:
    def test_train_emits_checkpoint_trace_metrics(self, tmp_path,
                                                  small_dataset_files):
        train_file, test_file = small_dataset_files
        out = tmp_path / "run"
        code = run(["train", "--train-file", str(train_file),
                    "--test-file", str(test_file),
                    "--binarize-threshold", "2",
                    "--strategy", "akb", "--estimator", "kbdr",
                    "--seed", "3", "--out-dir", str(out)] + TRAIN_OVERRIDES)
        assert code == 0
        assert (out / "checkpoint.npz").exists()
        assert (out / "trace.csv").exists()
        report = json.loads((out / "metrics.json").read_text())
        assert set(report) == {"auc", "ndcg@3", "f1@3", "k", "n_eval_users",
                               "seed"}

    def test_train_deterministic_outputs(self, tmp_path, small_dataset_files):
        train_file, test_file = small_dataset_files
        outputs = []
        for name in ("x", "y"):
            out = tmp_path / name
            assert run(["train", "--train-file", str(train_file),
                        "--test-file", str(test_file),
                        "--binarize-threshold", "2",
                        "--strategy", "rkb", "--estimator", "kbips",
                        "--seed", "4", "--out-dir", str(out)]
                       + TRAIN_OVERRIDES) == 0
            outputs.append({n: (out / n).read_bytes()
                            for n in ("checkpoint.npz", "trace.csv",
                                      "metrics.json")})
        assert outputs[0] == outputs[1]

    def test_train_with_config_file(self, tmp_path, small_dataset_files):
        train_file, test_file = small_dataset_files
        cfg = tmp_path / "c.cfg"
        cfg.write_text("max_epochs = 2\nembedding_dim = 4\n"
                       "batch_size_weight = 256\nbatch_size_prediction = 256\n"
                       "strategy = wkb\nestimator = kbdr\nseed = 6\n")
        out = tmp_path / "run"
        assert run(["train", "--train-file", str(train_file),
                    "--test-file", str(test_file), "--binarize-threshold", "2",
                    "--config", str(cfg), "--out-dir", str(out)]) == 0
        assert (out / "checkpoint.npz").exists()

    def test_evaluate_checkpoint(self, tmp_path, small_dataset_files):
        train_file, test_file = small_dataset_files
        out = tmp_path / "run"
        run(["train", "--train-file", str(train_file),
             "--test-file", str(test_file), "--binarize-threshold", "2",
             "--strategy", "none", "--estimator", "naive",
             "--seed", "3", "--out-dir", str(out)] + TRAIN_OVERRIDES)
        out_eval = tmp_path / "eval"
        code = run(["evaluate", "--checkpoint", str(out / "checkpoint.npz"),
                    "--train-file", str(train_file),
                    "--test-file", str(test_file),
                    "--binarize-threshold", "2", "--k", "4",
                    "--out-dir", str(out_eval)])
        assert code == 0
        report = json.loads((out_eval / "metrics.json").read_text())
        assert report["k"] == 4

    def test_diagnostics_flag_writes_csvs(self, tmp_path, small_dataset_files):
        train_file, test_file = small_dataset_files
        out = tmp_path / "run"
        assert run(["train", "--train-file", str(train_file),
                    "--test-file", str(test_file), "--binarize-threshold", "2",
                    "--strategy", "akb", "--estimator", "kbdr",
                    "--seed", "3", "--diagnostics", "--out-dir", str(out)]
                   + TRAIN_OVERRIDES) == 0
        diag = (out / "balance_diagnostics.csv").read_text().splitlines()
        assert diag[0] == "epoch,strategy,J,gamma,C,max_abs_tau,entropy,penalty"
        assert len(diag) == 3
        assert (out / "gram_dump.csv").exists()


class TestSweep:
    def test_sweep_writes_csv(self, tmp_path, small_dataset_files):
        train_file, test_file = small_dataset_files
        out = tmp_path / "run"
        code = run(["sweep", "--train-file", str(train_file),
                    "--test-file", str(test_file), "--binarize-threshold", "2",
                    "--strategy", "rkb", "--estimator", "kbips",
                    "--axis", "J", "--values", "1,3",
                    "--seed", "2", "--out-dir", str(out),
                    "--set", "max_epochs=1", "--set", "embedding_dim=4",
                    "--set", "batch_size_weight=256",
                    "--set", "batch_size_prediction=256"])
        assert code == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "J,auc,ndcg,f1,seed"
        assert len(lines) == 3


class TestBiasBench:
    def test_table_contents(self, tmp_path):
        out = tmp_path / "bench"
        code = run(["bias-bench", "--users", "40", "--items", "40",
                    "--resamples", "50", "--seed", "1", "--out-dir", str(out)])
        assert code == 0
        table = json.loads((out / "bias_bench.json").read_text())
        rows = table["rows"]
        assert set(rows) == {"naive", "ips_true_p", "snips_true_p",
                             "dr_true_p_wrong_e", "kbdr_true_w_wrong_e",
                             "kbdr_wrong_w_true_e",
                             "kbips_entropy_balanced_span"}
        assert abs(rows["kbips_entropy_balanced_span"]) <= 1e-6
        assert abs(rows["ips_true_p"]) < 0.05
        assert abs(rows["naive"]) > abs(rows["ips_true_p"])

    def test_deterministic(self, tmp_path):
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run(["bias-bench", "--users", "30", "--items", "30",
                 "--resamples", "20", "--seed", "9", "--out-dir", str(out)])
            blobs.append((out / "bias_bench.json").read_bytes())
        assert blobs[0] == blobs[1]


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert run(["train", "--bogus-flag", "x"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_subcommand_is_usage_error(self):
        assert run([]) == 1

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        code = run(["train", "--train-file", str(tmp_path / "nope.txt"),
                    "--out-dir", str(tmp_path)])
        assert code == 2
        assert "error" in capsys.readouterr().err.lower()

    def test_bad_set_key_is_usage_error(self, tmp_path, small_dataset_files):
        train_file, _ = small_dataset_files
        assert run(["train", "--train-file", str(train_file),
                    "--set", "bogus=1", "--out-dir", str(tmp_path)]) == 1
