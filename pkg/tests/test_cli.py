import numpy as np
import pytest

from kgforge.cli import main
from kgforge.models import load_checkpoint

from conftest import random_string_triples, write_split_files


@pytest.fixture
def data_dir(tmp_path):
    rng = np.random.default_rng(0)
    return write_split_files(
        tmp_path / "toykg",
        random_string_triples(rng, 40, 10, 2),
        random_string_triples(rng, 8, 10, 2),
        random_string_triples(rng, 8, 10, 2),
    )


TRAIN_FAST = ["--d", "4", "--batch", "16", "--n-neg", "3", "--max-epochs", "4", "--eval-every", "2"]


class TestStats:
    def test_prints_aligned_and_writes_kv(self, data_dir, tmp_path, capsys):
        out = tmp_path / "statsout"
        assert main(["stats", "--data", str(data_dir), "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "entities" in printed and "relations" in printed
        assert (out / "stats.txt").is_file()
        kv = dict(
            line.split("=", 1)
            for line in (out / "stats.kv").read_text().splitlines()
            if line
        )
        assert int(kv["entities"]) == 10

    def test_missing_dataset_exits_2(self, tmp_path, capsys):
        assert main(["stats", "--data", str(tmp_path / "nope")]) == 2
        assert "not found" in capsys.readouterr().err


class TestTrain:
    def test_train_writes_everything(self, data_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(
            ["train", "--data", str(data_dir), "--out", str(out), "--model", "distmult", "--joint"]
            + TRAIN_FAST
        )
        assert code == 0
        printed = capsys.readouterr().out
        # effective config echoed verbatim as key=value lines
        assert "model=distmult" in printed
        assert "joint=true" in printed
        assert (out / "checkpoint.kgfg").is_file()
        assert (out / "config.txt").is_file()
        assert (out / "training_curves.png").is_file()
        log_lines = (out / "training_log.tsv").read_text().strip().splitlines()
        assert log_lines[0].startswith("epoch\t")
        assert len(log_lines) == 5
        table, vocab = load_checkpoint(out / "checkpoint.kgfg")
        assert table.joint and vocab.n_entities == 10

    def test_max_epochs_zero_emits_initial_checkpoint(self, data_dir, tmp_path):
        out = tmp_path / "run0"
        code = main(
            ["train", "--data", str(data_dir), "--out", str(out), "--max-epochs", "0", "--d", "4"]
        )
        assert code == 0
        assert (out / "checkpoint.kgfg").is_file()
        assert not (out / "training_curves.png").exists()

    def test_missing_dataset_dir_exits_2(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path)]) == 2

    def test_full_softmax_with_n_neg_is_usage_error(self, data_dir, tmp_path, capsys):
        code = main(
            ["train", "--data", str(data_dir), "--out", str(tmp_path / "x"),
             "--loss", "full", "--n-neg", "5"]
        )
        assert code == 2
        assert "n-neg" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self, data_dir):
        assert main(["train", "--data", str(data_dir), "--no-such-flag"]) == 2

    def test_config_file_flag_precedence(self, data_dir, tmp_path, capsys):
        cfg = tmp_path / "base.cfg"
        cfg.write_text("dim=4\nmax_epochs=1\nbatch_size=16\nn_neg=2\nmodel=simple\neval_every=50\n")
        out = tmp_path / "cfgrun"
        code = main(
            ["train", "--data", str(data_dir), "--out", str(out), "--config", str(cfg), "--model", "complex"]
        )
        assert code == 0
        printed = capsys.readouterr().out
        assert "model=complex" in printed  # flag wins over file
        assert "dim=4" in printed

    def test_bad_config_value_exits_2(self, data_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("dim=lots\n")
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--config", str(cfg)]) == 2

    def test_env_var_dataset_root(self, data_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("KGFORGE_DATA_DIR", str(data_dir.parent))
        out = tmp_path / "envrun"
        code = main(
            ["train", "--data", data_dir.name, "--out", str(out), "--max-epochs", "0", "--d", "4"]
        )
        assert code == 0

    def test_full_softmax_training_runs(self, data_dir, tmp_path):
        out = tmp_path / "full"
        code = main(
            ["train", "--data", str(data_dir), "--out", str(out), "--loss", "full",
             "--d", "4", "--batch", "16", "--max-epochs", "2", "--eval-every", "2"]
        )
        assert code == 0


class TestEvalCommand:
    def _train(self, data_dir, out, extra=()):
        assert main(["train", "--data", str(data_dir), "--out", str(out), *TRAIN_FAST, *extra]) == 0
        return out / "checkpoint.kgfg"

    def test_eval_writes_reports_and_figure(self, data_dir, tmp_path, capsys):
        ckpt = self._train(data_dir, tmp_path / "run")
        out = tmp_path / "evalout"
        code = main(["eval", str(ckpt), "--data", str(data_dir), "--out", str(out)])
        assert code == 0
        assert "hits10" in capsys.readouterr().out
        assert (out / "report.txt").is_file()
        assert (out / "per_relation_hits1.png").is_file()
        metrics = dict(
            line.split("\t")
            for line in (out / "metrics.tsv").read_text().strip().splitlines()[1:]
        )
        assert set(metrics) >= {"hits1", "hits3", "hits10", "mrr"}
        rel_lines = (out / "per_relation.tsv").read_text().strip().splitlines()
        assert rel_lines[0].split("\t") == ["relation_id", "relation", "count", "hits1_head", "hits1_tail"]

    def test_tail_only_and_tie_flags(self, data_dir, tmp_path):
        ckpt = self._train(data_dir, tmp_path / "run")
        assert main(["eval", str(ckpt), "--data", str(data_dir), "--mode", "tail-only", "--tie", "opt"]) == 0

    def test_vocab_mismatch_exits_1(self, data_dir, tmp_path, capsys):
        ckpt = self._train(data_dir, tmp_path / "run")
        rng = np.random.default_rng(9)
        other = write_split_files(
            tmp_path / "otherkg",
            random_string_triples(rng, 30, 9, 2),
            random_string_triples(rng, 5, 9, 2),
            random_string_triples(rng, 5, 9, 2),
        )
        code = main(["eval", str(ckpt), "--data", str(other)])
        assert code == 1
        assert "vocabulary" in capsys.readouterr().err

    def test_corrupt_checkpoint_exits_1(self, data_dir, tmp_path):
        bad = tmp_path / "bad.kgfg"
        bad.write_bytes(b"garbage")
        assert main(["eval", str(bad), "--data", str(data_dir)]) == 1


class TestCompare:
    def test_self_compare_is_all_zero(self, data_dir, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--data", str(data_dir), "--out", str(run), *TRAIN_FAST]) == 0
        ckpt = run / "checkpoint.kgfg"
        out = tmp_path / "cmp"
        code = main(["compare", str(ckpt), str(ckpt), "--data", str(data_dir), "--out", str(out)])
        assert code == 0
        assert "net ranked-first gain (B - A): 0" in capsys.readouterr().out
        gains = (out / "gains.tsv").read_text().strip().splitlines()
        # one row per relation present in the test split
        import kgforge.data as data

        ds = data.load_dataset(data_dir)
        assert len(gains) - 1 == len(np.unique(ds.test.triples[:, 1]))
        assert all(line.split("\t")[5] == "0" for line in gains[1:])
        assert (out / "gains.png").is_file()
        assert (out / "newly_first.tsv").is_file()

    def test_differing_checkpoints(self, data_dir, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert main(["train", "--data", str(data_dir), "--out", str(a), *TRAIN_FAST, "--seed", "1"]) == 0
        assert main(["train", "--data", str(data_dir), "--out", str(b), *TRAIN_FAST, "--seed", "2", "--joint"]) == 0
        out = tmp_path / "cmp"
        code = main(
            ["compare", str(a / "checkpoint.kgfg"), str(b / "checkpoint.kgfg"),
             "--data", str(data_dir), "--out", str(out)]
        )
        assert code == 0
        lines = (out / "gains.tsv").read_text().strip().splitlines()[1:]
        gains = [int(line.split("\t")[5]) for line in lines]
        assert gains == sorted(gains, reverse=True)


class TestSweep:
    def test_batch_sweep_grid(self, data_dir, tmp_path, capsys):
        out = tmp_path / "sweepout"
        code = main(
            ["sweep", "--data", str(data_dir), "--sweep", "batch", "--out", str(out),
             "--d", "4", "--max-epochs", "1", "--eval-every", "50", "--seed", "3"]
        )
        assert code == 0
        rows = (out / "sweep.tsv").read_text().strip().splitlines()
        assert rows[0].split("\t") == ["batch", "variant", "hits10"]
        assert len(rows) - 1 == 6 * 4
        variants = {line.split("\t")[1] for line in rows[1:]}
        assert variants == {"baseline", "biased", "joint", "jobi"}
        assert (out / "sweep.png").is_file()

    def test_nneg_sweep_parallel(self, data_dir, tmp_path):
        out = tmp_path / "sweepout2"
        code = main(
            ["sweep", "--data", str(data_dir), "--sweep", "nneg", "--out", str(out),
             "--d", "4", "--max-epochs", "1", "--eval-every", "50", "--parallel", "2"]
        )
        assert code == 0
        rows = (out / "sweep.tsv").read_text().strip().splitlines()
        assert len(rows) - 1 == 6 * 4
