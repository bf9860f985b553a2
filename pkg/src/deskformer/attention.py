"""Multi-head attention and a small encoder stack built from it.

A single head maps a query source ``X`` and a context ``Y`` to::

    softmax_alpha(C * (X Wq)(Y_alpha Wk)^T) Y_alpha Wv

Heads are concatenated, mixed by an output matrix ``Wo`` and added back onto
``X``. Weights for all heads of a layer are stored stacked as ``[H, d, k]``.

Token ids ``0..V-1`` are words; ``V`` is the mask token and ``V + 1`` is
padding. Padding positions are excluded as attention keys.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .relunet import BlockNormParams, block_norm_forward, dropout_forward
from .rng import stream
from .tensor import DimensionError, Tensor

NEG_INF = -1e30


@dataclass
class AttentionConfig:
    vocab_size: int = 64
    max_len: int = 16
    num_layers: int = 6
    num_heads: int = 8
    model_dim: int = 512
    head_dim: int = 64
    scale: float | None = None
    ff_width: int | None = None
    dropout: float = 0.0
    positional: bool = True
    block_norm: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "max_len", "num_layers", "num_heads", "model_dim", "head_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.scale is None:
            self.scale = 1.0 / np.sqrt(self.head_dim)
        if self.ff_width is None:
            self.ff_width = 4 * self.model_dim
        if self.scale < 0:
            raise ValueError("scale constant must be non-negative")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def pad_id(self) -> int:
        return self.vocab_size + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    logits: Tensor  # [B, n, V]
    reps: list[Tensor]  # embedding layer, then one per encoder layer; each [B, n, d]


@dataclass
class EncoderParams:
    tensors: dict[str, Tensor]
    norms: dict[str, BlockNormParams] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.tensors)
        for key, bn in self.norms.items():
            out[f"{key}.gain"] = bn.gain
            out[f"{key}.bias"] = bn.bias
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.trainable().items()}
        for key, bn in self.norms.items():
            out[f"{key}.running_mean"] = bn.running_mean
            out[f"{key}.running_var"] = bn.running_var
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.trainable().items():
            v.data[...] = state[k]
        for key, bn in self.norms.items():
            bn.running_mean[...] = state[f"{key}.running_mean"]
            bn.running_var[...] = state[f"{key}.running_var"]


def attention_param_count(config: AttentionConfig) -> int:
    """Query/key/value coefficients across all layers and heads (``Wo`` excluded)."""
    return config.num_layers * config.num_heads * 3 * config.head_dim * config.model_dim


def _check_width(name: str, x: Tensor, w: Tensor) -> None:
    if x.shape[-1] != w.shape[-2]:
        raise DimensionError(f"{name}: input {x.shape} does not match map {w.shape}")


def _key_bias(key_mask, ndim: int) -> np.ndarray | None:
    if key_mask is None:
        return None
    km = np.asarray(key_mask, dtype=bool)
    bias = np.where(km, 0.0, NEG_INF)
    # [B, m] -> broadcast against scores [..., n, m]
    bias = bias[..., None, :]
    while bias.ndim < ndim:
        bias = bias[:, None]
    return bias


def attention_weights(X: Tensor, Y: Tensor, Wq: Tensor, Wk: Tensor, C: float,
                      key_mask=None) -> Tensor:
    """Row-softmax of ``C (X Wq)(Y Wk)^T`` over context positions."""
    X, Y = T.as_tensor(X), T.as_tensor(Y)
    _check_width("query", X, Wq)
    _check_width("key", Y, Wk)
    scores = T.matmul(X @ Wq, T.transpose(Y @ Wk)) * C
    bias = _key_bias(key_mask, scores.ndim)
    if bias is not None:
        scores = scores + bias
    return T.softmax_rows(scores)


def attention_head(X: Tensor, Y: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, C: float,
                   key_mask=None) -> Tensor:
    """One attention head; ``X`` is ``[..., n, d]``, ``Y`` is ``[..., m, d]``."""
    _check_width("value", T.as_tensor(Y), Wv)
    weights = attention_weights(X, Y, Wq, Wk, C, key_mask)
    return weights @ (T.as_tensor(Y) @ Wv)


def attend(q_src: Tensor, k_src: Tensor, v_src: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
           wo: Tensor, C: float, key_mask=None, return_weights: bool = False):
    """Stacked-head attention, concatenated and mixed by ``wo``; no residual.

    Sources are ``[B, n, d]`` (or ``[n, d]``); maps are ``[H, d, k]`` and
    ``wo`` is ``[H*k, d_out]``. Keys and values must share positions.
    """
    q_src, k_src, v_src = T.as_tensor(q_src), T.as_tensor(k_src), T.as_tensor(v_src)
    single = q_src.ndim == 2
    if single:
        q_src, k_src, v_src = (t.reshape((1,) + t.shape) for t in (q_src, k_src, v_src))
    if k_src.shape[1] != v_src.shape[1]:
        raise DimensionError(f"keys {k_src.shape} and values {v_src.shape} differ in length")
    _check_width("query", q_src, wq)
    _check_width("key", k_src, wk)
    _check_width("value", v_src, wv)
    H, _, k = wq.shape
    if wo.shape[0] != H * k:
        raise DimensionError(f"output map {wo.shape} does not match {H} heads of width {k}")
    B, n = q_src.shape[0], q_src.shape[1]
    q = T.reshape(q_src, (B, 1, n, q_src.shape[2])) @ wq  # [B, H, n, k]
    kk = T.reshape(k_src, (B, 1) + k_src.shape[1:]) @ wk
    v = T.reshape(v_src, (B, 1) + v_src.shape[1:]) @ wv
    scores = T.matmul(q, T.transpose(kk)) * C
    bias = _key_bias(key_mask, scores.ndim)
    if bias is not None:
        scores = scores + bias
    weights = T.softmax_rows(scores)
    heads = weights @ v  # [B, H, n, k]
    cat = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (B, n, H * k))
    out = cat @ wo
    if single:
        out = out.reshape(out.shape[1:])
        weights = weights.reshape(weights.shape[1:])
    return (out, weights) if return_weights else out


def multi_head_attention(X: Tensor, Y: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                         wo: Tensor, C: float, key_mask=None) -> Tensor:
    """``Cat_h(head_h) Wo + X``."""
    X = T.as_tensor(X)
    return attend(X, Y, Y, wq, wk, wv, wo, C, key_mask) + X


# -- encoder ---------------------------------------------------------------
def init_encoder(config: AttentionConfig, seed: int) -> EncoderParams:
    rng = stream(seed, "encoder-init")
    d, k, H, F, V = (config.model_dim, config.head_dim, config.num_heads,
                     config.ff_width, config.vocab_size)

    def uniform(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)

    p: dict[str, Tensor] = {
        "embed.tokens": Tensor(rng.normal(0.0, 1.0, size=(V + 2, d)), requires_grad=True),
        "embed.positions": Tensor(rng.normal(0.0, 1.0, size=(config.max_len, d)), requires_grad=True),
    }
    norms: dict[str, BlockNormParams] = {}
    for layer in range(config.num_layers):
        for name in ("wq", "wk", "wv"):
            p[f"layer{layer}.{name}"] = uniform((H, d, k), d, k)
        p[f"layer{layer}.wo"] = uniform((H * k, d), H * k, d)
        p[f"layer{layer}.ff1.weight"] = uniform((F, d), d, F)
        p[f"layer{layer}.ff1.bias"] = Tensor(np.zeros(F), requires_grad=True)
        p[f"layer{layer}.ff2.weight"] = uniform((d, F), F, d)
        p[f"layer{layer}.ff2.bias"] = Tensor(np.zeros(d), requires_grad=True)
        if config.block_norm:
            norms[f"layer{layer}.norm_attn"] = BlockNormParams.create(d)
            norms[f"layer{layer}.norm_ff"] = BlockNormParams.create(d)
    p["decoder.weight"] = uniform((V, d), d, V)
    p["decoder.bias"] = Tensor(np.zeros(V), requires_grad=True)
    return EncoderParams(p, norms)


def embed(tokens: np.ndarray, params: EncoderParams, config: AttentionConfig) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.size and (tokens.min() < 0 or tokens.max() > config.pad_id):
        raise ValueError(f"token id outside vocabulary of size {config.vocab_size}")
    n = tokens.shape[1]
    if n > config.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {config.max_len}")
    x = T.take_rows(params["embed.tokens"], tokens)
    if config.positional:
        x = x + params["embed.positions"][:n]
    return x


def _normed(x: Tensor, params: EncoderParams, key: str, mode: str, config: AttentionConfig) -> Tensor:
    if not config.block_norm:
        return x
    B, n, d = x.shape
    flat = block_norm_forward(x.reshape(B * n, d), params.norms[key], mode)
    return flat.reshape(B, n, d)


def encoder_layer(x: Tensor, layer: int, params: EncoderParams, config: AttentionConfig,
                  key_mask=None, mode: str = "eval", seed: int = 0) -> Tensor:
    """Self-attention then position-wise ReLU feedforward, both residual."""
    pre = f"layer{layer}."
    a = attend(x, x, x, params[pre + "wq"], params[pre + "wk"], params[pre + "wv"],
               params[pre + "wo"], config.scale, key_mask)
    if mode == "train" and config.dropout > 0:
        a = dropout_forward(a, config.dropout, stream(seed, "enc-dropout", layer, 0), mode)
    x = _normed(x + a, params, pre + "norm_attn", mode, config)
    h = T.relu(x @ params[pre + "ff1.weight"].T + params[pre + "ff1.bias"])
    f = h @ params[pre + "ff2.weight"].T + params[pre + "ff2.bias"]
    if mode == "train" and config.dropout > 0:
        f = dropout_forward(f, config.dropout, stream(seed, "enc-dropout", layer, 1), mode)
    return _normed(x + f, params, pre + "norm_ff", mode, config)


def decode(x: Tensor, params: EncoderParams) -> Tensor:
    return x @ params["decoder.weight"].T + params["decoder.bias"]


def encoder_forward(tokens, params: EncoderParams, config: AttentionConfig, mode: str = "eval",
                    seed: int = 0, key_mask=None) -> EncoderOutput:
    """Embed, run every layer, and decode vocabulary logits at all positions.

    ``tokens`` is ``[n]`` or ``[B, n]``. When ``key_mask`` is omitted, padding
    tokens are masked out as keys.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if key_mask is None:
        key_mask = tokens != config.pad_id
    x = embed(tokens, params, config)
    reps = [x]
    for layer in range(config.num_layers):
        x = encoder_layer(x, layer, params, config, key_mask, mode, seed)
        reps.append(x)
    return EncoderOutput(decode(x, params), reps)
