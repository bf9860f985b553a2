"""Command-line entry point: ``deskformer <command> --config c.json --seed 0 --out dir``.

Every command merges the given JSON config over its shipped default,
writes ``metrics.json`` (canonical, so reruns with the same seed are
byte-identical) plus any checkpoints into ``--out``, and exits with

    0  success
    1  validation error (bad config, missing or corrupt input)
    2  an acceptance threshold was not met
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, init_encoder
from .checkpoint import Checkpoint, CheckpointError, canonical_json, params_hash
from .corpus import Grammar, default_grammar, load_corpus, pcfg_generate, save_corpus, tree_distance_matrix
from .fusion import (BaseNet, cipher, cipher_corpus, correspondence_pairs, init_feedback, init_merge,
                     iterate_feedback, merge_checkpoint, merge_nets, train_feedback)
from .probe import evaluate_probe, probe_train, read_probe_input, write_probe_input
from .rng import spawn_seed
from .suite import gradient_suite
from .train import (CircleConfig, TrainConfig, encode_sentences, encoder_from_checkpoint, split_by_document,
                    train_circle_demo, train_continuation, train_masked_lm)

log = logging.getLogger("deskformer")

COMMANDS = ["gen-corpus", "train-circle", "train-lm", "train-continuation", "dump-reps", "probe",
            "feedback-eval", "merge", "gradcheck"]

EXIT_OK, EXIT_INVALID, EXIT_THRESHOLD = 0, 1, 2


class ConfigError(ValueError):
    pass


def default_config(command: str) -> dict:
    text = resources.files("deskformer").joinpath(f"data/configs/{command}.json").read_text()
    return json.loads(text)


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Recursive update; keys absent from the defaults are rejected."""
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = merge_config(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(command: str, path: str | None) -> dict:
    cfg = default_config(command)
    if path is None:
        return cfg
    try:
        override = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(override, dict):
        raise ConfigError("config must be a JSON object")
    return merge_config(cfg, override)


def write_metrics(out: Path, metrics: dict, name: str = "metrics.json") -> Path:
    path = out / name
    path.write_text(canonical_json(metrics) + "\n")
    return path


# -- shared inputs ---------------------------------------------------------
def _grammar(cfg: dict) -> Grammar:
    return Grammar.load(cfg["grammar"]) if cfg.get("grammar") else default_grammar()


def _corpus(cfg: dict):
    if cfg.get("corpus"):
        path = Path(cfg["corpus"])
        if not path.exists():
            raise ConfigError(f"corpus file {path} not found")
        return load_corpus(path)
    gen = cfg["corpus_gen"]
    g = _grammar(cfg)
    if gen.get("topic_boost") is not None:
        g = g.with_topic_boost(gen["topic_boost"])
    return pcfg_generate(g, gen["n_sentences"], gen["seed"], sentences_per_doc=gen["sentences_per_doc"])


def _checkpoint(path) -> Checkpoint:
    if not path:
        raise ConfigError("a checkpoint path is required")
    return Checkpoint.load(path)


def _train_config(section: dict, seed: int, **extra) -> TrainConfig:
    return TrainConfig.from_dict({**section, **extra, "seed": seed})


def _model_config(section: dict, vocab_size: int) -> AttentionConfig:
    return AttentionConfig(vocab_size=vocab_size, **section)


def probe_split(corpus, holdout_frac: float, train_sentences: int, min_words: int = 2):
    """Probe training sentences (from the training documents) and held-out test sentences."""
    train, held = split_by_document(corpus, holdout_frac)
    train = [s for s in train if len(s) >= min_words][:train_sentences]
    held = [s for s in held if len(s) >= min_words]
    return train, held


def dump_reps(path: Path, params, mc: AttentionConfig, sentences) -> None:
    layers = encode_sentences(params, mc, sentences)
    write_probe_input(path, ((s.id, li, layers[li][k]) for li in range(len(layers))
                             for k, s in enumerate(sentences)))


# -- commands --------------------------------------------------------------
def cmd_gen_corpus(cfg: dict, seed: int, out: Path) -> int:
    g = _grammar(cfg)
    sents = pcfg_generate(g, cfg["n_sentences"], seed, sentences_per_doc=cfg["sentences_per_doc"])
    save_corpus(sents, out / "corpus.jsonl")
    (out / "grammar.json").write_text(json.dumps(g.to_dict(), indent=1) + "\n")
    lengths = [len(s) for s in sents]
    write_metrics(out, {"n_sentences": len(sents), "n_documents": len({s.doc for s in sents}),
                        "vocab_size": g.vocab_size, "mean_length": float(np.mean(lengths)),
                        "max_length": max(lengths), "seed": seed})
    return EXIT_OK


def cmd_train_circle(cfg: dict, seed: int, out: Path) -> int:
    res = train_circle_demo(CircleConfig.from_dict({**cfg, "seed": seed}))
    ok = res.final_test_acc >= cfg["min_test_acc"]
    write_metrics(out, {"train_acc": res.train_acc, "test_acc": res.test_acc, "final_test_acc": res.final_test_acc,
                        "weight_count": res.weight_count, "seed": seed, "passed": ok})
    Checkpoint("circle", res.params, {k: v for k, v in cfg.items()}, {"seed": seed}).save(out / "checkpoint.json")
    log.info("circle demo seed %d: final test accuracy %.4f", seed, res.final_test_acc)
    return EXIT_OK if ok else EXIT_THRESHOLD


def cmd_train_lm(cfg: dict, seed: int, out: Path) -> int:
    corpus = _corpus(cfg)
    mc = _model_config(cfg["model"], _grammar(cfg).vocab_size)
    tc = _train_config(cfg["train"], seed)
    resume = _checkpoint(cfg["resume"]) if cfg["resume"] else None
    res = train_masked_lm(tc, corpus, mc, resume=resume, stop_at_step=cfg["stop_at_step"])
    res.checkpoint.save(out / "checkpoint.json")
    m = dict(res.metrics)
    finished = "final_acc" in m
    m["finished"] = finished
    if finished:
        m["gain"] = m["final_acc"] - m["baseline_acc"]
        m["passed"] = m["gain"] >= cfg["min_gain"]
    write_metrics(out, m)
    if finished:
        log.info("masked acc %.4f vs unigram %.4f", m["final_acc"], m["baseline_acc"])
        return EXIT_OK if m["passed"] else EXIT_THRESHOLD
    return EXIT_OK


def cmd_train_continuation(cfg: dict, seed: int, out: Path) -> int:
    corpus = _corpus(cfg)
    ckpt = _checkpoint(cfg["checkpoint"])
    tc = _train_config(cfg["train"], seed)
    m = train_continuation(tc, corpus, ckpt, modes=tuple(cfg["modes"]))
    best = max(m[mode] for mode in cfg["modes"])
    m["passed"] = best > m["threshold"]
    write_metrics(out, m)
    return EXIT_OK if m["passed"] else EXIT_THRESHOLD


def cmd_dump_reps(cfg: dict, seed: int, out: Path) -> int:
    corpus = _corpus(cfg)
    if cfg["untrained"]:
        # same shapes as the checkpointed model, freshly initialized from --seed
        mc = AttentionConfig(**_checkpoint(cfg["checkpoint"]).config["model"])
        params = init_encoder(mc, spawn_seed(seed, "init"))
    else:
        params, mc = encoder_from_checkpoint(_checkpoint(cfg["checkpoint"]))
    train, held = probe_split(corpus, cfg["holdout_frac"], cfg["train_sentences"], cfg["min_words"])
    dump_reps(out / "reps.jsonl", params, mc, train + held)
    write_metrics(out, {"n_train": len(train), "n_test": len(held), "layers": mc.num_layers + 1,
                        "params_hash": params_hash(params.state()), "untrained": cfg["untrained"]})
    return EXIT_OK


def cmd_probe(cfg: dict, seed: int, out: Path) -> int:
    if not cfg["reps"]:
        raise ConfigError("probe needs a reps file (see dump-reps)")
    corpus = _corpus(cfg)
    by_id = {s.id: s for s in corpus}
    reps = read_probe_input(cfg["reps"])
    train, held = probe_split(corpus, cfg["holdout_frac"], cfg["train_sentences"])
    layers = []
    for layer in sorted(reps):
        table = reps[layer]
        missing = [s.id for s in train + held if s.id not in table]
        if missing:
            raise ConfigError(f"reps file lacks sentence {missing[0]} for layer {layer}")
        probe = probe_train([table[s.id] for s in train], [tree_distance_matrix(s.parents) for s in train],
                            cfg["rank"], lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                            seed=seed, layer=layer)
        rep = evaluate_probe(probe, [table[s.id] for s in held], [by_id[s.id].parents for s in held],
                             ids=[s.id for s in held])
        layers.append({"layer": layer, "uuas": rep.uuas, "loss": rep.loss, "spearman": rep.spearman})
        log.info("layer %d: UUAS %.4f", layer, rep.uuas)
    best = max(layers, key=lambda r: r["uuas"])
    m = {"layers": layers, "best_layer": best["layer"], "best_uuas": best["uuas"], "rank": cfg["rank"]}
    ok = cfg["min_uuas"] is None or best["uuas"] >= cfg["min_uuas"]
    m["passed"] = ok
    write_metrics(out, m)
    return EXIT_OK if ok else EXIT_THRESHOLD


def cmd_feedback_eval(cfg: dict, seed: int, out: Path) -> int:
    corpus = _corpus(cfg)
    params, mc = encoder_from_checkpoint(_checkpoint(cfg["checkpoint"]))
    f = cfg["feedback"]
    fb = init_feedback(mc.model_dim, mc.model_dim, f["num_heads"], f["head_dim"], seed, iterations=f["iterations"],
                       damping=f["damping"], lower_layer=f["lower_layer"], higher_layer=f["higher_layer"],
                       init_scale=f["init_scale"])
    # zero value weights must leave the encoder untouched
    zero = init_feedback(mc.model_dim, mc.model_dim, f["num_heads"], f["head_dim"], seed,
                         iterations=f["iterations"], lower_layer=f["lower_layer"], higher_layer=f["higher_layer"],
                         zero_values=True)
    sample = np.array([corpus[0].tokens])
    with T.no_grad():
        identity = bool(np.array_equal(iterate_feedback(sample, params, mc, zero).logits.data,
                                       iterate_feedback(sample, params, mc, zero, iterations=0).logits.data))
    train, held = split_by_document(corpus, cfg["holdout_frac"])
    tc = _train_config(cfg["train"], seed)
    m = train_feedback(params, mc, fb, train[:cfg["train_sentences"]], tc, held)
    m["zero_value_identity"] = identity
    write_metrics(out, m)
    Checkpoint("feedback", {k: v.data for k, v in fb.named().items()}, {"feedback": f, "train": tc.to_dict()},
               {"seed": seed}).save(out / "checkpoint.json")
    return EXIT_OK if identity else EXIT_THRESHOLD


def _base_net(path, corpus, cfg: dict, seed: int, vocab_size: int, out: Path, name: str) -> BaseNet:
    if path:
        params, mc = encoder_from_checkpoint(_checkpoint(path))
        return BaseNet(params, mc)
    mc = _model_config(cfg["base_model"], vocab_size)
    res = train_masked_lm(_train_config(cfg["base_train"], seed), corpus, mc)
    res.checkpoint.save(out / f"base_{name}.json")
    return BaseNet(res.params, mc)


def cmd_merge(cfg: dict, seed: int, out: Path) -> int:
    g = _grammar(cfg)
    corpus = _corpus({**cfg, "corpus": None})
    ciphered = cipher_corpus(corpus, cipher(g.vocab_size, cfg["cipher_seed"]))
    net_a = _base_net(cfg["checkpoint_a"], corpus, cfg, spawn_seed(seed, "base-a"), g.vocab_size, out, "a")
    net_b = _base_net(cfg["checkpoint_b"], ciphered, cfg, spawn_seed(seed, "base-b"), g.vocab_size, out, "b")
    n_tr, n_te = cfg["train_sentences"], cfg["test_sentences"]
    if n_tr + n_te > len(corpus):
        raise ConfigError("train_sentences + test_sentences exceeds the corpus")
    train = correspondence_pairs(corpus[:n_tr], ciphered[:n_tr], spawn_seed(seed, "pairs-train"))
    test = correspondence_pairs(corpus[-n_te:], ciphered[-n_te:], spawn_seed(seed, "pairs-test"))
    mcfg = cfg["merge"]
    mp = init_merge(net_a.config.model_dim, net_b.config.model_dim, mcfg["num_heads"], mcfg["head_dim"], seed,
                    values_from=mcfg["values_from"])
    tc = _train_config(cfg["train"], seed)
    hash_a, hash_b = net_a.state_hash(), net_b.state_hash()
    res = merge_nets(net_a, net_b, mp, train, test, tc)
    merge_checkpoint(res, hash_a, hash_b, tc).save(out / "checkpoint.json")
    m = dict(res.metrics)
    m["hash_unchanged"] = (m["base_hash_a"], m["base_hash_b"]) == (hash_a, hash_b)
    m["passed"] = m["hash_unchanged"] and m["final_acc"] > m["threshold"]
    write_metrics(out, m)
    return EXIT_OK if m["passed"] else EXIT_THRESHOLD


def cmd_gradcheck(cfg: dict, seed: int, out: Path) -> int:
    seeds = range(seed, seed + cfg["seeds"])
    results = gradient_suite(seeds, cfg["families"])
    m = {"results": [r.to_dict() for r in results], "passed": all(r.passed for r in results)}
    write_metrics(out, m)
    for r in results:
        if not r.passed:
            log.warning("gradient check failed: %s seed %d (max rel %.3g)", r.family, r.seed, r.max_rel_error)
    return EXIT_OK if m["passed"] else EXIT_THRESHOLD


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train-circle": cmd_train_circle,
    "train-lm": cmd_train_lm,
    "train-continuation": cmd_train_continuation,
    "dump-reps": cmd_dump_reps,
    "probe": cmd_probe,
    "feedback-eval": cmd_feedback_eval,
    "merge": cmd_merge,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file merged over the shipped default")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed < 0:
        print("error: seed must be non-negative", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.command, args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, args.seed, out)
    except (ValueError, CheckpointError, KeyError, TypeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
