import json

import pytest

from deskformer.checkpoint import Checkpoint
from deskformer.cli import COMMANDS, ConfigError, default_config, load_config, main, merge_config

TINY_CORPUS = {"n_sentences": 200, "sentences_per_doc": 5, "seed": 0}
TINY_MODEL = {"num_layers": 1, "num_heads": 2, "model_dim": 8, "head_dim": 4, "max_len": 16}


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def run(tmp_path, command, cfg=None, seed=0, out="out"):
    args = [command, "--seed", str(seed), "--out", str(tmp_path / out)]
    if cfg is not None:
        args += ["--config", write(tmp_path, f"{out}.cfg.json", cfg)]
    return main(args)


def metrics(tmp_path, out="out"):
    return json.loads((tmp_path / out / "metrics.json").read_text())


@pytest.fixture(scope="module")
def lm_checkpoint(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("lm")
    cfg = {"corpus_gen": TINY_CORPUS, "model": TINY_MODEL, "train": {"epochs": 1}, "min_gain": -1.0}
    assert run(tmp, "train-lm", cfg) == 0
    return str(tmp / "out" / "checkpoint.json")


class TestConfig:
    def test_every_command_ships_a_default(self):
        for c in COMMANDS:
            assert isinstance(default_config(c), dict)

    def test_nested_merge(self):
        merged = merge_config({"a": 1, "b": {"c": 2, "d": 3}}, {"b": {"d": 4}})
        assert merged == {"a": 1, "b": {"c": 2, "d": 4}}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            merge_config({"b": {"c": 2}}, {"b": {"x": 1}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config("train-lm", str(tmp_path / "none.json"))


class TestExitCodes:
    def test_bad_json_is_validation_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["train-circle", "--config", str(path), "--out", str(tmp_path / "o")]) == 1

    def test_unknown_key(self, tmp_path):
        assert run(tmp_path, "train-circle", {"learning_rate": 0.1}) == 1

    def test_negative_seed(self, tmp_path):
        assert run(tmp_path, "gen-corpus", seed=-1) == 1

    def test_missing_checkpoint(self, tmp_path):
        assert run(tmp_path, "train-continuation", {"corpus_gen": TINY_CORPUS}) == 1
        assert run(tmp_path, "feedback-eval", {"checkpoint": str(tmp_path / "nope.json")}) == 1

    def test_threshold_miss_is_two(self, tmp_path):
        assert run(tmp_path, "train-circle", {"epochs": 1, "min_test_acc": 1.01}) == 2
        assert metrics(tmp_path)["passed"] is False

    def test_bad_values(self, tmp_path):
        assert run(tmp_path, "train-lm", {"corpus_gen": TINY_CORPUS, "train": {"batch_size": 0}}) == 1


class TestCommands:
    def test_gen_corpus_deterministic(self, tmp_path):
        cfg = {"n_sentences": 50}
        assert run(tmp_path, "gen-corpus", cfg, seed=3, out="a") == 0
        assert run(tmp_path, "gen-corpus", cfg, seed=3, out="b") == 0
        assert (tmp_path / "a" / "corpus.jsonl").read_bytes() == (tmp_path / "b" / "corpus.jsonl").read_bytes()
        assert metrics(tmp_path, "a")["n_sentences"] == 50

    def test_corpus_file_input(self, tmp_path, lm_checkpoint):
        assert run(tmp_path, "gen-corpus", {"n_sentences": 200}, out="c") == 0
        corpus = str(tmp_path / "c" / "corpus.jsonl")
        cfg = {"corpus": corpus, "checkpoint": lm_checkpoint, "train": {"epochs": 1}, "modes": ["frozen"]}
        assert run(tmp_path, "train-continuation", cfg) in (0, 2)
        assert set(metrics(tmp_path)) == {"frozen", "n_test", "threshold", "passed"}

    def test_circle_metrics_identical_across_runs(self, tmp_path):
        cfg = {"epochs": 3}
        run(tmp_path, "train-circle", cfg, seed=2, out="a")
        run(tmp_path, "train-circle", cfg, seed=2, out="b")
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        assert metrics(tmp_path, "a")["weight_count"] == 12

    def test_lm_resume_through_files(self, tmp_path):
        base = {"corpus_gen": TINY_CORPUS, "model": TINY_MODEL, "train": {"epochs": 2}, "min_gain": -1.0}
        assert run(tmp_path, "train-lm", base, seed=1, out="full") == 0
        assert run(tmp_path, "train-lm", {**base, "stop_at_step": 7}, seed=1, out="part") == 0
        assert metrics(tmp_path, "part")["finished"] is False
        resumed = {**base, "resume": str(tmp_path / "part" / "checkpoint.json")}
        assert run(tmp_path, "train-lm", resumed, seed=1, out="resumed") == 0
        for name in ("metrics.json", "checkpoint.json"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()

    def test_dump_reps_then_probe(self, tmp_path, lm_checkpoint):
        cfg = {"corpus_gen": TINY_CORPUS, "checkpoint": lm_checkpoint, "train_sentences": 60, "holdout_frac": 0.2}
        assert run(tmp_path, "dump-reps", cfg, out="reps") == 0
        assert metrics(tmp_path, "reps")["layers"] == 2
        probe = {"corpus_gen": TINY_CORPUS, "reps": str(tmp_path / "reps" / "reps.jsonl"), "rank": 4,
                 "epochs": 3, "train_sentences": 60, "holdout_frac": 0.2, "min_uuas": 0.0}
        assert run(tmp_path, "probe", probe, out="probe") == 0
        m = metrics(tmp_path, "probe")
        assert [r["layer"] for r in m["layers"]] == [0, 1]
        assert 0.0 <= m["best_uuas"] <= 1.0

    def test_probe_rejects_incomplete_reps(self, tmp_path, lm_checkpoint):
        cfg = {"corpus_gen": TINY_CORPUS, "checkpoint": lm_checkpoint, "train_sentences": 10, "holdout_frac": 0.2}
        run(tmp_path, "dump-reps", cfg, out="reps")
        probe = {"corpus_gen": TINY_CORPUS, "reps": str(tmp_path / "reps" / "reps.jsonl"), "train_sentences": 60,
                 "holdout_frac": 0.2}
        assert run(tmp_path, "probe", probe, out="probe") == 1

    def test_untrained_reps_differ(self, tmp_path, lm_checkpoint):
        cfg = {"corpus_gen": TINY_CORPUS, "checkpoint": lm_checkpoint, "train_sentences": 10}
        run(tmp_path, "dump-reps", cfg, out="t")
        run(tmp_path, "dump-reps", {**cfg, "untrained": True}, out="u")
        assert metrics(tmp_path, "t")["params_hash"] != metrics(tmp_path, "u")["params_hash"]

    def test_feedback_eval(self, tmp_path, lm_checkpoint):
        cfg = {"corpus_gen": TINY_CORPUS, "checkpoint": lm_checkpoint,
               "feedback": {"head_dim": 4, "lower_layer": 0}, "train": {"epochs": 1}, "train_sentences": 50}
        assert run(tmp_path, "feedback-eval", cfg) == 0
        m = metrics(tmp_path)
        assert m["zero_value_identity"] is True
        assert {"acc_T0", "acc_T2"} <= set(m)

    def test_merge_keeps_bases_frozen(self, tmp_path):
        cfg = {"corpus_gen": TINY_CORPUS, "base_model": TINY_MODEL, "base_train": {"epochs": 1},
               "merge": {"head_dim": 4}, "train": {"epochs": 1}, "train_sentences": 100, "test_sentences": 100}
        assert run(tmp_path, "merge", cfg) in (0, 2)
        m = metrics(tmp_path)
        assert m["hash_unchanged"] is True
        ck = Checkpoint.load(tmp_path / "out" / "checkpoint.json")
        assert ck.config["base_a"] == m["base_hash_a"]

    def test_merge_split_too_large(self, tmp_path):
        cfg = {"corpus_gen": TINY_CORPUS, "base_model": TINY_MODEL, "base_train": {"epochs": 1},
               "train_sentences": 150, "test_sentences": 100}
        assert run(tmp_path, "merge", cfg) == 1

    def test_gradcheck_subset(self, tmp_path):
        assert run(tmp_path, "gradcheck", {"seeds": 2, "families": ["phi", "merge"]}) == 0
        assert len(metrics(tmp_path)["results"]) == 4
        assert run(tmp_path, "gradcheck", {"families": ["nope"]}, out="bad") == 1
