"""Feedback attention from higher to lower layers, and cross-net merging.

Feedback: queries and values read a lower layer, keys read a higher layer::

    lower' = lower + damping * Cat_h softmax(C (lower Wq_h)(higher Wk_h)^T) (lower Wv_h) Wo

The circular dependency (higher layers are computed from lower ones) is cut
by unrolling: refine the lower layer, recompute everything above it, repeat
``T`` times.

Merging: two frozen, pretrained encoders. Queries come from net A's
representations and keys from net B's; values come from B by default
(``values_from="a"`` switches, which requires equal lengths). A position-wise
ReLU feedforward and a pooled linear head are trained on a correspondence
task while both base nets stay bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, EncoderOutput, EncoderParams, attend, decode,
                        embed, encoder_layer)
from .checkpoint import Checkpoint, params_hash
from .corpus import Sentence
from .rng import spawn_seed, stream
from .tensor import DimensionError, Tensor
from .train import TrainConfig, binomial_threshold, clip_grads, encode_sentences, sgd_step


class FrozenViolation(RuntimeError):
    """A base network changed during merge training."""


def _uniform(rng, shape, fan_in, fan_out, scale=1.0, zero=False):
    if zero:
        return Tensor(np.zeros(shape), requires_grad=True)
    limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


# -- feedback --------------------------------------------------------------
@dataclass
class FeedbackParams:
    wq: Tensor  # [H, d_low, k]
    wk: Tensor  # [H, d_high, k]
    wv: Tensor  # [H, d_low, k]
    wo: Tensor  # [H*k, d_low]
    scale: float
    iterations: int = 2
    damping: float = 1.0
    lower_layer: int = 1
    higher_layer: int = -1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")
        H, d_low, k = self.wq.shape
        if self.wv.shape != (H, d_low, k) or self.wk.shape[0] != H or self.wk.shape[2] != k:
            raise DimensionError("feedback maps disagree on heads or head width")
        if self.wo.shape != (H * k, d_low):
            raise DimensionError(f"output map {self.wo.shape} should be {(H * k, d_low)}")

    def named(self) -> dict[str, Tensor]:
        return {"feedback.wq": self.wq, "feedback.wk": self.wk, "feedback.wv": self.wv,
                "feedback.wo": self.wo}


def init_feedback(d_low: int, d_high: int, num_heads: int, head_dim: int, seed: int,
                  iterations: int = 2, damping: float = 1.0, lower_layer: int = 1,
                  higher_layer: int = -1, init_scale: float = 1.0, zero_values: bool = False) -> FeedbackParams:
    rng = stream(seed, "feedback-init")
    H, k = num_heads, head_dim
    return FeedbackParams(
        wq=_uniform(rng, (H, d_low, k), d_low, k, init_scale),
        wk=_uniform(rng, (H, d_high, k), d_high, k, init_scale),
        wv=_uniform(rng, (H, d_low, k), d_low, k, init_scale, zero=zero_values),
        wo=_uniform(rng, (H * k, d_low), H * k, d_low, init_scale, zero=zero_values),
        scale=1.0 / np.sqrt(k),
        iterations=iterations,
        damping=damping,
        lower_layer=lower_layer,
        higher_layer=higher_layer,
    )


def feedback_pass(lower: Tensor, higher: Tensor, params: FeedbackParams, key_mask=None) -> Tensor:
    lower, higher = T.as_tensor(lower), T.as_tensor(higher)
    if lower.shape[:-1] != higher.shape[:-1]:
        raise DimensionError(f"lower {lower.shape} and higher {higher.shape} must cover the same positions")
    update = attend(lower, higher, lower, params.wq, params.wk, params.wv, params.wo,
                    params.scale, key_mask)
    return lower + update * params.damping


def iterate_feedback(tokens, enc: EncoderParams, config: AttentionConfig, fb: FeedbackParams,
                     iterations: int | None = None, key_mask=None) -> EncoderOutput:
    """Unrolled feedback: ``iterations`` rounds of refine-lower, recompute-higher.

    With zero rounds this is the plain eval-mode encoder.
    """
    rounds = fb.iterations if iterations is None else iterations
    if rounds < 0:
        raise ValueError("iterations must be non-negative")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if key_mask is None:
        key_mask = tokens != config.pad_id
    L = config.num_layers
    low = fb.lower_layer
    high = fb.higher_layer % (L + 1)
    if not 0 <= low < high <= L:
        raise ValueError(f"need 0 <= lower layer < higher layer <= {L}")
    reps = [embed(tokens, enc, config)]
    for layer in range(L):
        reps.append(encoder_layer(reps[-1], layer, enc, config, key_mask))
    for _ in range(rounds):
        reps[low] = feedback_pass(reps[low], reps[high], fb, key_mask)
        for layer in range(low, L):
            reps[layer + 1] = encoder_layer(reps[layer], layer, enc, config, key_mask)
    return EncoderOutput(decode(reps[-1], enc), reps)


def train_feedback(enc: EncoderParams, config: AttentionConfig, fb: FeedbackParams, sentences,
                   tc: TrainConfig, eval_sentences) -> dict:
    """Fit feedback weights on masked-word prediction with the encoder frozen.

    Reports held-out masked-token accuracy with no feedback and with
    ``fb.iterations`` rounds.
    """
    from .corpus import mask_corpus
    from .train import masked_accuracy, masked_lm_loss

    def fwd(rounds):
        return lambda tokens: iterate_feedback(tokens, enc, config, fb, rounds).logits

    trainable = list(fb.named().values())
    eval_examples = mask_corpus(eval_sentences, tc.mask_rate, tc.seed, config.mask_id, ("eval", 0))
    velocity = None
    steps_per_epoch = -(-len(sentences) // tc.batch_size)
    total = steps_per_epoch * tc.epochs
    step = 0
    for epoch in range(tc.epochs):
        order = stream(tc.seed, "feedback-batch", epoch).permutation(len(sentences))
        for start in range(0, len(sentences), tc.batch_size):
            batch = [sentences[i] for i in order[start:start + tc.batch_size]]
            examples = mask_corpus(batch, tc.mask_rate, tc.seed, config.mask_id, ("feedback", epoch, step))
            loss, _, _ = masked_lm_loss(enc, config, examples, forward=fwd(fb.iterations))
            grads = clip_grads(T.grad(loss, trainable), tc.clip_norm)
            velocity = sgd_step(trainable, grads, tc.lr_at(step, total), tc.momentum, velocity)
            step += 1
    return {
        "acc_T0": masked_accuracy(enc, config, eval_examples, forward=fwd(0)),
        f"acc_T{fb.iterations}": masked_accuracy(enc, config, eval_examples, forward=fwd(fb.iterations)),
        "iterations": fb.iterations,
    }


# -- merging ---------------------------------------------------------------
@dataclass
class MergeParams:
    tensors: dict[str, Tensor]
    scale: float
    values_from: str = "b"
    frozen_a: bool = True
    frozen_b: bool = True

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def init_merge(d_a: int, d_b: int, num_heads: int, head_dim: int, seed: int, ff_width: int | None = None,
               values_from: str = "b", zero: bool = False) -> MergeParams:
    """Cross-attention + feedforward + pooled 2-way head; ``zero`` zeroes every weight."""
    if values_from not in ("a", "b"):
        raise ValueError("values_from must be 'a' or 'b'")
    rng = stream(seed, "merge-init")
    H, k = num_heads, head_dim
    F = ff_width or 4 * d_a
    d_v = d_b if values_from == "b" else d_a
    t = {
        "merge.wq": _uniform(rng, (H, d_a, k), d_a, k, zero=zero),
        "merge.wk": _uniform(rng, (H, d_b, k), d_b, k, zero=zero),
        "merge.wv": _uniform(rng, (H, d_v, k), d_v, k, zero=zero),
        "merge.wo": _uniform(rng, (H * k, d_a), H * k, d_a, zero=zero),
        "merge.ff1.weight": _uniform(rng, (F, d_a), d_a, F, zero=zero),
        "merge.ff1.bias": Tensor(np.zeros(F), requires_grad=True),
        "merge.ff2.weight": _uniform(rng, (d_a, F), F, d_a, zero=zero),
        "merge.ff2.bias": Tensor(np.zeros(d_a), requires_grad=True),
        "head.weight": Tensor(np.zeros((d_a, 2)), requires_grad=True),
        "head.bias": Tensor(np.zeros(2), requires_grad=True),
    }
    return MergeParams(t, 1.0 / np.sqrt(k), values_from)


def merge_forward(ha: Tensor, mask_a: np.ndarray, hb: Tensor, mask_b: np.ndarray, mp: MergeParams) -> Tensor:
    """Logits ``[B, 2]`` from frozen representations of both nets."""
    ha, hb = T.as_tensor(ha), T.as_tensor(hb)
    values = hb if mp.values_from == "b" else ha
    if values.shape[1] != hb.shape[1]:
        raise DimensionError("values from net A need sequences as long as net B's")
    z = ha + attend(ha, hb, values, mp["merge.wq"], mp["merge.wk"], mp["merge.wv"], mp["merge.wo"],
                    mp.scale, mask_b)
    h = T.relu(z @ mp["merge.ff1.weight"].T + mp["merge.ff1.bias"])
    z = z + h @ mp["merge.ff2.weight"].T + mp["merge.ff2.bias"]
    w = mask_a / mask_a.sum(axis=1, keepdims=True)
    pooled = T.sum_(z * w[:, :, None], axis=1)
    return pooled @ mp["head.weight"] + mp["head.bias"]


def cipher(vocab_size: int, seed: int) -> np.ndarray:
    """A fixed vocabulary permutation; token ``t`` becomes ``perm[t]``."""
    return stream(seed, "cipher").permutation(vocab_size)


def cipher_corpus(sentences: list[Sentence], perm: np.ndarray) -> list[Sentence]:
    return [Sentence(s.id, [int(perm[t]) for t in s.tokens], list(s.parents), s.doc) for s in sentences]


@dataclass
class PairedData:
    a: list[list[int]]
    b: list[list[int]]
    labels: np.ndarray


def correspondence_pairs(plain: list[Sentence], ciphered: list[Sentence], seed: int) -> PairedData:
    """Each plain sentence with its own cipher (label 1) and another's (label 0)."""
    n = len(plain)
    if n < 2 or len(ciphered) != n:
        raise ValueError("need at least two aligned sentence pairs")
    rng = stream(seed, "correspondence")
    a, b, y = [], [], []
    for i in range(n):
        j = int(rng.integers(n - 1))
        j = j if j < i else j + 1
        a += [plain[i].tokens, plain[i].tokens]
        b += [ciphered[i].tokens, ciphered[j].tokens]
        y += [1, 0]
    order = rng.permutation(len(y))
    return PairedData([a[k] for k in order], [b[k] for k in order], np.array(y)[order])


@dataclass
class BaseNet:
    params: EncoderParams
    config: AttentionConfig

    def state_hash(self) -> str:
        return params_hash(self.params.state())


def _final_reps(net: BaseNet, seqs) -> tuple[np.ndarray, np.ndarray]:
    layers = encode_sentences(net.params, net.config, seqs)
    final = layers[-1]
    n = max(len(r) for r in final)
    R = np.zeros((len(final), n, final[0].shape[1]))
    M = np.zeros((len(final), n))
    for i, r in enumerate(final):
        R[i, :len(r)] = r
        M[i, :len(r)] = 1.0
    return R, M


@dataclass
class MergeResult:
    params: MergeParams
    metrics: dict = field(default_factory=dict)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def merge_nets(net_a: BaseNet, net_b: BaseNet, mp: MergeParams, train: PairedData, test: PairedData,
               tc: TrainConfig) -> MergeResult:
    """Train merge layers and head over two frozen nets; verify they stayed frozen."""
    if not (mp.frozen_a and mp.frozen_b):
        raise FrozenViolation("both base nets must be flagged frozen during merge training")
    before = (net_a.state_hash(), net_b.state_hash())
    RA, MA = _final_reps(net_a, train.a)
    RB, MB = _final_reps(net_b, train.b)
    tRA, tMA = _final_reps(net_a, test.a)
    tRB, tMB = _final_reps(net_b, test.b)

    def logits(ra, ma, rb, mb):
        return merge_forward(Tensor(ra), ma, Tensor(rb), mb.astype(bool), mp)

    with T.no_grad():
        initial = _accuracy(logits(tRA, tMA, tRB, tMB).data, test.labels)
    trainable = list(mp.tensors.values())
    velocity = None
    steps_per_epoch = -(-len(train.labels) // tc.batch_size)
    total = steps_per_epoch * tc.epochs
    step = 0
    losses = []
    for epoch in range(tc.epochs):
        order = stream(tc.seed, "merge-batch", epoch).permutation(len(train.labels))
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            loss = T.cross_entropy(logits(RA[idx], MA[idx], RB[idx], MB[idx]), train.labels[idx])
            grads = clip_grads(T.grad(loss, trainable), tc.clip_norm)
            velocity = sgd_step(trainable, grads, tc.lr_at(step, total), tc.momentum, velocity)
            losses.append(float(loss.data))
            step += 1
    with T.no_grad():
        final = _accuracy(logits(tRA, tMA, tRB, tMB).data, test.labels)
    after = (net_a.state_hash(), net_b.state_hash())
    if before != after:
        raise FrozenViolation("base network parameters changed during merge training")
    n = len(test.labels)
    return MergeResult(mp, {
        "initial_acc": initial,
        "final_acc": final,
        "n_test": n,
        "threshold": binomial_threshold(n),
        "base_hash_a": before[0],
        "base_hash_b": before[1],
        "loss": losses,
    })


def single_net_baseline(net: BaseNet, side: str, train: PairedData, test: PairedData, tc: TrainConfig,
                        hidden: int = 32) -> float:
    """Correspondence accuracy of a pooled-feature classifier that sees only one net."""
    seqs, tseqs = (train.a, test.a) if side == "a" else (train.b, test.b)
    R, M = _final_reps(net, seqs)
    tR, tM = _final_reps(net, tseqs)

    def pool(R, M):
        return (R * M[:, :, None]).sum(axis=1) / M.sum(axis=1, keepdims=True)

    X, tX = pool(R, M), pool(tR, tM)
    rng = stream(tc.seed, "baseline-init", side)
    d = X.shape[1]
    lim = np.sqrt(6.0 / (d + hidden))
    w1 = Tensor(rng.uniform(-lim, lim, size=(d, hidden)), requires_grad=True)
    b1 = Tensor(np.zeros(hidden), requires_grad=True)
    w2 = Tensor(np.zeros((hidden, 2)), requires_grad=True)
    b2 = Tensor(np.zeros(2), requires_grad=True)
    trainable = [w1, b1, w2, b2]

    def logits(x):
        return T.relu(Tensor(x) @ w1 + b1) @ w2 + b2

    velocity = None
    for epoch in range(tc.epochs):
        order = stream(tc.seed, "baseline-batch", side, epoch).permutation(len(X))
        for start in range(0, len(X), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            loss = T.cross_entropy(logits(X[idx]), train.labels[idx])
            grads = clip_grads(T.grad(loss, trainable), tc.clip_norm)
            velocity = sgd_step(trainable, grads, tc.lr, tc.momentum, velocity)
    with T.no_grad():
        return _accuracy(logits(tX).data, test.labels)


def merge_checkpoint(result: MergeResult, net_a_hash: str, net_b_hash: str, tc: TrainConfig) -> Checkpoint:
    mp = result.params
    return Checkpoint(
        "merge",
        {k: v.data for k, v in mp.tensors.items()},
        {"base_a": net_a_hash, "base_b": net_b_hash, "values_from": mp.values_from,
         "scale": mp.scale, "train": tc.to_dict(),
         "metrics": {k: v for k, v in result.metrics.items() if k != "loss"}},
        {"seed": tc.seed, "stream": spawn_seed(tc.seed, "merge")},
    )
