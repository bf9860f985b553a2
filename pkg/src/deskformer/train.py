"""Gradient-descent training: the circle demo, masked-word pretraining and
sentence-continuation fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, EncoderParams, encoder_forward, init_encoder)
from .checkpoint import Checkpoint
from .corpus import ContinuationPair, Sentence, continuation_pairs, mask_corpus, unigram_counts
from .relunet import NetSpec, init_params, net_forward
from .rng import ALGORITHM, spawn_seed, stream
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    task: str = "masked-lm"
    eval_every: int = 1
    mask_rate: float = 0.15
    holdout_frac: float = 0.1
    clip_norm: float | None = 1.0
    lr_schedule: str = "constant"
    eval_repeats: int = 4

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.lr_schedule == "linear":
            return self.lr * (1.0 - step / total_steps)
        return self.lr

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def sgd_step(params, grads, lr: float, momentum: float = 0.0, velocity=None):
    """In place: ``v <- momentum * v + g``, ``p <- p - lr * v``. Returns the velocities."""
    params = list(params)
    grads = list(grads)
    if velocity is None:
        velocity = [np.zeros(p.shape) for p in params]
    if not len(params) == len(grads) == len(velocity):
        raise DimensionError("params, grads and velocity differ in count")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        p.data -= lr * v
    return velocity


def clip_grads(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


# -- circle demo -----------------------------------------------------------
@dataclass
class CircleConfig:
    n_train: int = 1000
    n_test: int = 2000
    epochs: int = 300
    batch_size: int = 50
    lr: float = 0.05
    momentum: float = 0.9
    hidden: int = 4
    radius: float = 1.0
    box: float = 2.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "CircleConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class CircleResult:
    train_acc: list[float]
    test_acc: list[float]
    weight_count: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def final_test_acc(self) -> float:
        return self.test_acc[-1]


def circle_data(n: int, rng: np.random.Generator, box: float, radius: float):
    X = rng.uniform(-box, box, size=(n, 2))
    y = (np.sum(X * X, axis=1) < radius * radius).astype(np.float64)
    return X, y


def train_circle_demo(config: CircleConfig) -> CircleResult:
    """Fit a 2 -> hidden (ReLU) -> 1 classifier to inside/outside a circle.

    The output bias starts at the clipped log-odds of the training labels.
    Accuracy is recorded before training and after every epoch.
    """
    spec = NetSpec([2, config.hidden, 1])
    params = init_params(spec, config.seed)
    weight_count = sum(layer.weight.size for layer in params.layers)
    if config.hidden == 4 and weight_count != 12:
        raise AssertionError(f"circle net must hold 12 weights, has {weight_count}")
    Xtr, ytr = circle_data(config.n_train, stream(config.seed, "circle-train"), config.box, config.radius)
    Xte, yte = circle_data(config.n_test, stream(config.seed, "circle-test"), config.box, config.radius)
    prior = np.clip(ytr.mean(), 1e-4, 1 - 1e-4)
    params.layers[-1].bias.data[:] = np.log(prior / (1 - prior))
    trainable = list(params.named().values())

    def accuracy(X, y):
        with T.no_grad():
            z = net_forward(spec, params, X).output.data[:, 0]
        return float(np.mean((z > 0) == (y > 0.5)))

    train_acc = [accuracy(Xtr, ytr)]
    test_acc = [accuracy(Xte, yte)]
    velocity = None
    for epoch in range(config.epochs):
        order = stream(config.seed, "circle-batch", epoch).permutation(config.n_train)
        for start in range(0, config.n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            z = net_forward(spec, params, Xtr[idx]).output.reshape(-1)
            # logistic loss: softplus(z) - y z
            loss = T.mean(T.softplus(z) - z * ytr[idx])
            grads = T.grad(loss, trainable)
            velocity = sgd_step(trainable, grads, config.lr, config.momentum, velocity)
        train_acc.append(accuracy(Xtr, ytr))
        test_acc.append(accuracy(Xte, yte))
    return CircleResult(train_acc, test_acc, weight_count, {k: v.data.copy() for k, v in params.named().items()})


# -- masked-word pretraining -----------------------------------------------
def split_by_document(sentences: list[Sentence], holdout_frac: float):
    """The last ``holdout_frac`` of documents (by id order) are held out."""
    docs = sorted({s.doc for s in sentences})
    n_hold = max(1, int(round(len(docs) * holdout_frac))) if holdout_frac > 0 else 0
    held = set(docs[len(docs) - n_hold:]) if n_hold else set()
    train = [s for s in sentences if s.doc not in held]
    test = [s for s in sentences if s.doc in held]
    return train, test


def pad_batch(seqs: list[list[int]], pad_id: int) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def masked_batch(examples, config: AttentionConfig):
    tokens = pad_batch([e.inputs for e in examples], config.pad_id)
    rows = np.concatenate([[i] * len(e.positions) for i, e in enumerate(examples)]).astype(np.int64)
    cols = np.concatenate([e.positions for e in examples]).astype(np.int64)
    targets = np.concatenate([e.targets for e in examples]).astype(np.int64)
    return tokens, rows, cols, targets


def masked_lm_loss(params: EncoderParams, config: AttentionConfig, examples, mode: str = "train",
                   seed: int = 0, forward=None):
    """Cross-entropy at masked positions; returns ``(loss, logits_at_masks, targets)``.

    ``forward(tokens) -> logits`` replaces the plain encoder when given.
    """
    tokens, rows, cols, targets = masked_batch(examples, config)
    if forward is None:
        logits = encoder_forward(tokens, params, config, mode=mode, seed=seed).logits
    else:
        logits = forward(tokens)
    picked = logits[rows, cols]
    return T.cross_entropy(picked, targets), picked, targets


def masked_accuracy(params: EncoderParams, config: AttentionConfig, examples, batch_size: int = 256,
                    forward=None) -> float:
    correct = total = 0
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            _, picked, targets = masked_lm_loss(params, config, chunk, mode="eval", forward=forward)
            correct += int(np.sum(np.argmax(picked.data, axis=-1) == targets))
            total += len(targets)
    return correct / total


def unigram_baseline(train: list[Sentence], examples, vocab_size: int) -> float:
    """Accuracy of always predicting the most frequent training token."""
    top = int(np.argmax(unigram_counts(train, vocab_size)))
    targets = np.concatenate([e.targets for e in examples])
    return float(np.mean(targets == top))


@dataclass
class LMResult:
    params: EncoderParams
    config: AttentionConfig
    checkpoint: Checkpoint
    metrics: dict


def _encoder_state(params: EncoderParams, velocity: list[np.ndarray] | None, names: list[str]) -> dict:
    state = dict(params.state())
    if velocity is not None:
        for n, v in zip(names, velocity):
            state[f"opt.velocity.{n}"] = v
    return state


def encoder_from_checkpoint(ckpt: Checkpoint) -> tuple[EncoderParams, AttentionConfig]:
    cfg = AttentionConfig(**ckpt.config["model"])
    params = init_encoder(cfg, 0)
    params.load_state(ckpt.params)
    return params, cfg


def train_masked_lm(train_config: TrainConfig, corpus: list[Sentence], model_config: AttentionConfig,
                    resume: Checkpoint | None = None, stop_at_step: int | None = None) -> LMResult:
    """Masked-word training with plain SGD (+ momentum).

    Batches and masks for global step ``s`` come from streams keyed by
    ``(seed, epoch, s)``, so a run resumed from a checkpoint replays exactly
    the steps an uninterrupted run would have taken.
    """
    tc, mc = train_config, model_config
    if not corpus:
        raise ValueError("empty corpus")
    if max(max(s.tokens) for s in corpus) >= mc.vocab_size:
        raise ValueError("corpus token id outside the model vocabulary")
    train, held = split_by_document(corpus, tc.holdout_frac)
    if not held:
        held = train
    eval_examples = [
        ex for r in range(tc.eval_repeats)
        for ex in mask_corpus(held, tc.mask_rate, tc.seed, mc.mask_id, ("eval", r))
    ]
    baseline = unigram_baseline(train, eval_examples, mc.vocab_size)
    steps_per_epoch = -(-len(train) // tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs

    params = init_encoder(mc, spawn_seed(tc.seed, "init"))
    names = sorted(params.trainable())
    trainable = [params.trainable()[n] for n in names]
    velocity = [np.zeros(p.shape) for p in trainable]
    step = 0
    metrics = {"step_loss": [], "epoch_loss": [], "epoch_acc": [], "baseline_acc": baseline}
    if resume is not None:
        params.load_state(resume.params)
        velocity = [resume.params[f"opt.velocity.{n}"].copy() for n in names]
        step = int(resume.rng["step"])
        metrics = {k: (list(v) if isinstance(v, list) else v) for k, v in resume.config["metrics"].items()}
    end = total_steps if stop_at_step is None else min(stop_at_step, total_steps)

    order = None
    while step < end:
        epoch, k = divmod(step, steps_per_epoch)
        if order is None or k == 0:
            order = stream(tc.seed, "batch", epoch).permutation(len(train))
        batch = [train[i] for i in order[k * tc.batch_size:(k + 1) * tc.batch_size]]
        examples = mask_corpus(batch, tc.mask_rate, tc.seed, mc.mask_id, (epoch, step))
        loss, _, _ = masked_lm_loss(params, mc, examples, "train", spawn_seed(tc.seed, "dropout", step))
        grads = clip_grads(T.grad(loss, trainable), tc.clip_norm)
        sgd_step(trainable, grads, tc.lr_at(step, total_steps), tc.momentum, velocity)
        metrics["step_loss"].append(float(loss.data))
        step += 1
        if step % steps_per_epoch == 0:
            ep_losses = metrics["step_loss"][-steps_per_epoch:]
            metrics["epoch_loss"].append(float(np.mean(ep_losses)))
            if (step // steps_per_epoch) % tc.eval_every == 0 or step == total_steps:
                acc = masked_accuracy(params, mc, eval_examples)
                metrics["epoch_acc"].append(acc)
                log.info("epoch %d loss %.4f masked acc %.4f (unigram %.4f)",
                         step // steps_per_epoch, metrics["epoch_loss"][-1], acc, baseline)
    if step == total_steps:
        metrics["final_acc"] = metrics["epoch_acc"][-1]
    ckpt = Checkpoint(
        "encoder",
        _encoder_state(params, velocity, names),
        {"model": mc.to_dict(), "train": tc.to_dict(), "metrics": metrics},
        {"algorithm": ALGORITHM, "seed": tc.seed, "step": step},
    )
    return LMResult(params, mc, ckpt, metrics)


def encode_sentences(params: EncoderParams, config: AttentionConfig, sentences, batch_size: int = 256,
                     forward=None) -> list[list[np.ndarray]]:
    """Per-layer representations, ``out[layer][sentence]`` of shape ``[len, dim]``."""
    layers: list[list[np.ndarray]] | None = None
    with T.no_grad():
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start:start + batch_size]
            seqs = [s.tokens if isinstance(s, Sentence) else list(s) for s in chunk]
            tokens = pad_batch(seqs, config.pad_id)
            reps = forward(tokens) if forward is not None else encoder_forward(tokens, params, config).reps
            if layers is None:
                layers = [[] for _ in reps]
            for li, r in enumerate(reps):
                for b, s in enumerate(seqs):
                    layers[li].append(r.data[b, :len(s)].copy())
    return layers


# -- sentence continuation -------------------------------------------------
def pooled(params: EncoderParams, config: AttentionConfig, seqs: list[list[int]], mode="eval") -> Tensor:
    """Mean of final-layer representations over real tokens: ``[B, d]``."""
    tokens = pad_batch(seqs, config.pad_id)
    valid = (tokens != config.pad_id).astype(np.float64)
    final = encoder_forward(tokens, params, config, mode=mode).reps[-1]
    weights = valid / valid.sum(axis=1, keepdims=True)
    return T.sum_(final * weights[:, :, None], axis=1)


def init_pair_head(d: int, hidden: int, seed: int) -> dict[str, Tensor]:
    rng = stream(seed, "pair-head")
    lim1 = np.sqrt(6.0 / (3 * d + hidden))
    lim2 = np.sqrt(6.0 / (hidden + 2))
    return {
        "head.w1": Tensor(rng.uniform(-lim1, lim1, size=(3 * d, hidden)), requires_grad=True),
        "head.b1": Tensor(np.zeros(hidden), requires_grad=True),
        "head.w2": Tensor(rng.uniform(-lim2, lim2, size=(hidden, 2)), requires_grad=True),
        "head.b2": Tensor(np.zeros(2), requires_grad=True),
    }


def pair_logits(head: dict[str, Tensor], a: Tensor, b: Tensor) -> Tensor:
    feats = T.concat([a, b, a * b], axis=-1)
    h = T.relu(feats @ head["head.w1"] + head["head.b1"])
    return h @ head["head.w2"] + head["head.b2"]


def binomial_threshold(n: int, sigmas: float = 3.0) -> float:
    """Accuracy that beats a fair coin by ``sigmas`` standard deviations on ``n`` trials."""
    return 0.5 + sigmas * np.sqrt(0.25 / n)


def _fit_continuation(params, mc, pairs: list[ContinuationPair], test: list[ContinuationPair],
                      tc: TrainConfig, freeze_encoder: bool, labels=None) -> float:
    head = init_pair_head(mc.model_dim, 32, spawn_seed(tc.seed, "head"))
    trainable = list(head.values())
    if not freeze_encoder:
        trainable += list(params.trainable().values())
    labels = np.array([p.label for p in pairs]) if labels is None else labels
    velocity = None
    if freeze_encoder:
        # encoder fixed: pool once
        with T.no_grad():
            A = pooled(params, mc, [p.a for p in pairs]).data
            B = pooled(params, mc, [p.b for p in pairs]).data
    for epoch in range(tc.epochs):
        order = stream(tc.seed, "pair-batch", epoch).permutation(len(pairs))
        for start in range(0, len(pairs), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            if freeze_encoder:
                a, b = Tensor(A[idx]), Tensor(B[idx])
            else:
                a = pooled(params, mc, [pairs[i].a for i in idx], mode="train")
                b = pooled(params, mc, [pairs[i].b for i in idx], mode="train")
            loss = T.cross_entropy(pair_logits(head, a, b), labels[idx])
            grads = clip_grads(T.grad(loss, trainable), tc.clip_norm)
            velocity = sgd_step(trainable, grads, tc.lr, tc.momentum, velocity)
    with T.no_grad():
        a = pooled(params, mc, [p.a for p in test])
        b = pooled(params, mc, [p.b for p in test])
        pred = np.argmax(pair_logits(head, a, b).data, axis=-1)
    return float(np.mean(pred == np.array([p.label for p in test])))


def train_continuation(train_config: TrainConfig, corpus: list[Sentence], checkpoint: Checkpoint | None,
                       shuffle_labels: bool = False, modes=("frozen", "unfrozen")) -> dict:
    """Fine-tune a 2-way continuation head on top of a pretrained encoder.

    Returns test accuracy for each requested mode (encoder frozen or not),
    the number of test pairs and the 3-sigma significance threshold.
    """
    if checkpoint is None:
        raise ValueError("continuation fine-tuning needs a pretrained checkpoint")
    train_sents, test_sents = split_by_document(corpus, train_config.holdout_frac)
    train_pairs = continuation_pairs(train_sents, train_config.seed)
    test_pairs = continuation_pairs(test_sents, spawn_seed(train_config.seed, "test-pairs"))
    labels = np.array([p.label for p in train_pairs])
    if shuffle_labels:
        labels = stream(train_config.seed, "shuffle").permutation(labels)
    out = {"n_test": len(test_pairs), "threshold": binomial_threshold(len(test_pairs))}
    for mode in modes:
        params, mc = encoder_from_checkpoint(checkpoint)
        out[mode] = _fit_continuation(params, mc, train_pairs, test_pairs, train_config,
                                      mode == "frozen", labels)
    return out
