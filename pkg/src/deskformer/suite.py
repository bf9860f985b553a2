"""Gradient checks over every parameterized operation family.

Each family builds a small random instance from a seed and compares its
backprop gradients against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, encoder_forward, init_encoder, multi_head_attention
from .fusion import init_feedback, init_merge, iterate_feedback, merge_forward
from .gradcheck import GradCheckReport, finite_diff_check
from .relunet import BlockNormParams, LayerParams, NetSpec, block_norm_forward, init_params, net_forward, phi_forward
from .tensor import Tensor


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _sq(x: Tensor, target: np.ndarray) -> Tensor:
    d = x - target
    return (d * d).sum()


def check_phi(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    layer = LayerParams(_param(rng, 4, 3), _param(rng, 4))
    x = _param(rng, 5, 3)
    target = rng.normal(size=(5, 4))
    return finite_diff_check(lambda: _sq(phi_forward(x, layer), target),
                             {"weight": layer.weight, "bias": layer.bias, "x": x}, seed=seed)


def check_skip_residual_net(seed: int) -> GradCheckReport:
    spec = NetSpec([3, 5, 5, 5, 2], skip_links=[(0, 2)], residual_blocks=[(1, 3)])
    params = init_params(spec, seed)
    x = Tensor(np.random.default_rng(seed).normal(size=(6, 3)))
    return finite_diff_check(lambda: _sq(net_forward(spec, params, x).output, 0.0), params.named(), seed=seed)


def check_block_norm(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    bn = BlockNormParams.create(4)
    bn.gain.data[:] = rng.normal(size=4)
    bn.bias.data[:] = rng.normal(size=4)
    x = _param(rng, 6, 4)
    target = rng.normal(size=(6, 4))
    return finite_diff_check(lambda: _sq(block_norm_forward(x, bn, update_stats=False), target),
                             {"gain": bn.gain, "bias": bn.bias, "x": x}, seed=seed)


def check_attention_heads(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    X, Y = _param(rng, 4, 6), _param(rng, 5, 6)
    wq, wk, wv = _param(rng, 2, 6, 3), _param(rng, 2, 6, 3), _param(rng, 2, 6, 3)
    wo = _param(rng, 6, 6)
    target = rng.normal(size=(4, 6))
    return finite_diff_check(lambda: _sq(multi_head_attention(X, Y, wq, wk, wv, wo, 0.5), target),
                             {"X": X, "Y": Y, "wq": wq, "wk": wk, "wv": wv, "wo": wo}, seed=seed)


def check_encoder(seed: int) -> GradCheckReport:
    cfg = AttentionConfig(vocab_size=6, max_len=5, num_layers=2, num_heads=2, model_dim=4, head_dim=2)
    enc = init_encoder(cfg, seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 6, size=(2, 5))
    labels = rng.integers(0, 6, size=(10,))

    def f():
        logits = encoder_forward(tokens, enc, cfg).logits
        return T.cross_entropy(logits.reshape(10, -1), labels)

    return finite_diff_check(f, enc.trainable(), seed=seed, max_coords=12)


def check_feedback(seed: int) -> GradCheckReport:
    cfg = AttentionConfig(vocab_size=6, max_len=4, num_layers=2, num_heads=2, model_dim=4, head_dim=2)
    enc = init_encoder(cfg, seed)
    fb = init_feedback(4, 4, 2, 2, seed, iterations=2)
    tokens = np.random.default_rng(seed).integers(0, 6, size=(2, 4))
    target = np.random.default_rng(seed + 100).normal(size=(2, 4, 6))
    params = {**fb.named(), "layer0.wq": enc["layer0.wq"], "embed.tokens": enc["embed.tokens"]}
    return finite_diff_check(lambda: _sq(iterate_feedback(tokens, enc, cfg, fb).logits, target), params, seed=seed)


def check_merge(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    mp = init_merge(4, 3, 2, 2, seed, ff_width=6)
    mp["head.weight"].data[...] = rng.normal(size=(4, 2))
    ha, hb = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 5, 3))
    ma, mb = np.ones((3, 4)), np.ones((3, 5), bool)
    labels = np.array([0, 1, 1])
    return finite_diff_check(
        lambda: T.cross_entropy(merge_forward(Tensor(ha), ma, Tensor(hb), mb, mp), labels), mp.tensors, seed=seed)


FAMILIES = {
    "phi": check_phi,
    "skip-residual-net": check_skip_residual_net,
    "block-norm": check_block_norm,
    "attention-heads": check_attention_heads,
    "encoder": check_encoder,
    "feedback-T2": check_feedback,
    "merge": check_merge,
}


@dataclass
class SuiteResult:
    family: str
    seed: int
    passed: bool
    max_rel_error: float
    checked: int
    skipped: int

    def to_dict(self) -> dict:
        return {"family": self.family, "seed": self.seed, "passed": self.passed,
                "max_rel_error": self.max_rel_error, "checked": self.checked, "skipped": self.skipped}


def gradient_suite(seeds=range(10), families=None) -> list[SuiteResult]:
    names = list(FAMILIES) if families is None else list(families)
    unknown = set(names) - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown gradient families {sorted(unknown)}")
    out = []
    for name in names:
        for seed in seeds:
            r = FAMILIES[name](int(seed))
            out.append(SuiteResult(name, int(seed), r.passed, r.max_rel_error, r.checked, r.skipped))
    return out
