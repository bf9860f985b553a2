"""ReLU networks as compositions of phi(x) = max(0, M x + b).

Layer 0 is the input activity; layers 1..L are computed. Hidden layers are
rectified, the top layer is affine unless ``NetSpec.output_relu`` is set.
Optional extras per layer:

* skip links ``(a, n)``: activity of layer ``a`` feeds the pre-activation of
  layer ``n`` (identity when widths agree, otherwise a learned matrix);
* residual blocks ``(a, n)``: activity of layer ``a`` is added to the
  activity of layer ``n`` after rectification;
* block normalization of the pre-activation;
* inverted dropout on hidden activities in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import DimensionError, Tensor


class DegeneratePointError(ValueError):
    """Input lies exactly on a cell boundary (some pre-activation is zero)."""


@dataclass
class LayerParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]


@dataclass
class BlockNormParams:
    gain: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, width: int, momentum: float = 0.9, eps: float = 1e-5) -> "BlockNormParams":
        if eps <= 0:
            raise ValueError("eps must be positive")
        return cls(
            gain=Tensor(np.ones(width), requires_grad=True),
            bias=Tensor(np.zeros(width), requires_grad=True),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            eps=eps,
        )


@dataclass
class NetSpec:
    widths: list[int]
    skip_links: list[tuple[int, int]] = field(default_factory=list)
    residual_blocks: list[tuple[int, int]] = field(default_factory=list)
    dropout_rate: float = 0.0
    block_norm: list[bool] | None = None
    output_relu: bool = False

    def __post_init__(self):
        self.skip_links = [tuple(s) for s in self.skip_links]
        self.residual_blocks = [tuple(r) for r in self.residual_blocks]
        L = self.num_layers
        if L < 1 or any(w < 1 for w in self.widths):
            raise ValueError(f"bad widths {self.widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.block_norm is None:
            self.block_norm = [False] * L
        if len(self.block_norm) != L:
            raise ValueError("block_norm needs one flag per computed layer")
        for a, b in self.skip_links:
            if not (0 <= a < b - 1 and b <= L):
                raise ValueError(f"skip link {(a, b)} must satisfy 0 <= from < to-1 <= L-1")
        for a, b in self.residual_blocks:
            if not (0 <= a <= b - 2 and b <= L):
                raise ValueError(f"residual block {(a, b)} must satisfy from <= to-2")
            if self.widths[a] != self.widths[b]:
                raise ValueError(f"residual block {(a, b)} joins unequal widths")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class NetParams:
    layers: list[LayerParams]
    skips: dict[tuple[int, int], Tensor | None] = field(default_factory=dict)
    norms: dict[int, BlockNormParams] = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for n, layer in enumerate(self.layers, start=1):
            out[f"layer{n}.weight"] = layer.weight
            out[f"layer{n}.bias"] = layer.bias
        for (a, b), s in sorted(self.skips.items()):
            if s is not None:
                out[f"skip{a}_{b}.weight"] = s
        for n, bn in sorted(self.norms.items()):
            out[f"norm{n}.gain"] = bn.gain
            out[f"norm{n}.bias"] = bn.bias
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Trainable tensors plus block-norm running statistics."""
        out = {k: v.data for k, v in self.named().items()}
        for n, bn in sorted(self.norms.items()):
            out[f"norm{n}.running_mean"] = bn.running_mean
            out[f"norm{n}.running_var"] = bn.running_var
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.named().items():
            v.data[...] = state[k]
        for n, bn in self.norms.items():
            bn.running_mean[...] = state[f"norm{n}.running_mean"]
            bn.running_var[...] = state[f"norm{n}.running_var"]


@dataclass
class NetOutput:
    output: Tensor
    activities: list[Tensor]
    preactivations: list[Tensor]


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_params(spec: NetSpec, seed: int) -> NetParams:
    rng = stream(seed, "relunet-init")
    layers = []
    for n in range(1, spec.num_layers + 1):
        w = glorot_uniform(rng, spec.widths[n], spec.widths[n - 1])
        layers.append(
            LayerParams(Tensor(w, requires_grad=True), Tensor(np.zeros(spec.widths[n]), requires_grad=True))
        )
    skips: dict[tuple[int, int], Tensor | None] = {}
    for a, b in spec.skip_links:
        if spec.widths[a] == spec.widths[b]:
            skips[(a, b)] = None
        else:
            skips[(a, b)] = Tensor(glorot_uniform(rng, spec.widths[b], spec.widths[a]), requires_grad=True)
    norms = {
        n: BlockNormParams.create(spec.widths[n])
        for n, flag in enumerate(spec.block_norm, start=1)
        if flag
    }
    return NetParams(layers, skips, norms)


def _as_rows(x: Tensor, width: int) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"input shape {x.shape} does not match width {width}")
    return x, single


def phi_forward(x: Tensor, layer: LayerParams) -> Tensor:
    """``max(0, M x + b)`` for a vector or a batch of row vectors."""
    rows, single = _as_rows(x, layer.in_width)
    out = T.relu(rows @ layer.weight.T + layer.bias)
    return out.reshape(-1) if single else out


def dropout_forward(x: Tensor, rate: float, seed, mode: str = "train") -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "dropout")
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def block_norm_forward(batch: Tensor, params: BlockNormParams, mode: str = "train",
                       update_stats: bool = True) -> Tensor:
    """Per-unit standardization followed by ``gain * xhat + bias``.

    Train mode uses the batch statistics (variance floored at ``eps``) and
    folds them into the running estimates; eval mode uses the running
    estimates only.
    """
    batch = T.as_tensor(batch)
    if mode == "train":
        if batch.ndim != 2 or batch.shape[0] < 2:
            raise ValueError("block norm in train mode needs a batch of at least 2 rows")
        mu = batch.mean(axis=0)
        centered = batch - mu
        var = (centered * centered).mean(axis=0)
        floored = T.where(var.data >= params.eps, var, params.eps)
        xhat = centered * T.power(floored, -0.5)
        if update_stats:
            m = params.momentum
            params.running_mean[...] = m * params.running_mean + (1 - m) * mu.data
            params.running_var[...] = m * params.running_var + (1 - m) * var.data
    else:
        scale = 1.0 / np.sqrt(np.maximum(params.running_var, params.eps))
        xhat = (batch - params.running_mean) * scale
    return xhat * params.gain + params.bias


def net_forward(spec: NetSpec, params: NetParams, x, mode: str = "eval", seed: int = 0,
                update_stats: bool = True) -> NetOutput:
    if len(params.layers) != spec.num_layers:
        raise DimensionError("parameter list does not match spec depth")
    for n, layer in enumerate(params.layers, start=1):
        if layer.weight.shape != (spec.widths[n], spec.widths[n - 1]):
            raise DimensionError(f"layer {n} weight {layer.weight.shape} does not match spec widths")
    rows, single = _as_rows(x, spec.widths[0])
    L = spec.num_layers
    acts = [rows]
    pres = []
    for n in range(1, L + 1):
        layer = params.layers[n - 1]
        z = acts[n - 1] @ layer.weight.T + layer.bias
        for a, b in spec.skip_links:
            if b == n:
                s = params.skips.get((a, b))
                z = z + (acts[a] if s is None else acts[a] @ s.T)
        if spec.block_norm[n - 1]:
            z = block_norm_forward(z, params.norms[n], mode, update_stats=update_stats)
        pres.append(z)
        act = T.relu(z) if (n < L or spec.output_relu) else z
        if mode == "train" and spec.dropout_rate > 0 and n < L:
            act = dropout_forward(act, spec.dropout_rate, stream(seed, "dropout", n), mode)
        for a, b in spec.residual_blocks:
            if b == n:
                act = act + acts[a]
        acts.append(act)
    if single:
        acts = [a.reshape(-1) for a in acts]
        pres = [p.reshape(-1) for p in pres]
    return NetOutput(acts[-1], acts, pres)


def activation_pattern(spec: NetSpec, params: NetParams, x) -> list[np.ndarray]:
    """Per rectified layer, the boolean mask of strictly positive pre-activations."""
    with T.no_grad():
        out = net_forward(spec, params, x, mode="eval")
    rectified = range(spec.num_layers if spec.output_relu else spec.num_layers - 1)
    return [out.preactivations[i].data > 0 for i in rectified]


def local_linear_map(spec: NetSpec, params: NetParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A, c)`` with ``f(x') = A x' + c`` on the cell containing ``x``."""
    x = np.asarray(T.as_tensor(x).data, dtype=np.float64)
    if x.shape != (spec.widths[0],):
        raise DimensionError(f"expected a single input of width {spec.widths[0]}")
    L = spec.num_layers
    A = [np.eye(spec.widths[0])]
    c = [np.zeros(spec.widths[0])]
    for n in range(1, L + 1):
        W = params.layers[n - 1].weight.data
        Az = W @ A[n - 1]
        cz = W @ c[n - 1] + params.layers[n - 1].bias.data
        for a, b in spec.skip_links:
            if b == n:
                s = params.skips.get((a, b))
                S = np.eye(spec.widths[n]) if s is None else s.data
                Az = Az + S @ A[a]
                cz = cz + S @ c[a]
        if spec.block_norm[n - 1]:
            bn = params.norms[n]
            scale = bn.gain.data / np.sqrt(np.maximum(bn.running_var, bn.eps))
            Az = scale[:, None] * Az
            cz = scale * (cz - bn.running_mean) + bn.bias.data
        if n < L or spec.output_relu:
            z = Az @ x + cz
            # z == 0 is only a kink when the unit actually depends on x here;
            # a unit fed by nothing but dead units stays at 0 nearby
            if np.any((z == 0.0) & np.any(Az != 0.0, axis=1)):
                raise DegeneratePointError(f"zero pre-activation in layer {n}")
            mask = (z > 0).astype(np.float64)
            Az = mask[:, None] * Az
            cz = mask * cz
        for a, b in spec.residual_blocks:
            if b == n:
                Az = Az + A[a]
                cz = cz + c[a]
        A.append(Az)
        c.append(cz)
    return A[-1], c[-1]


def autodiff_jacobian(spec: NetSpec, params: NetParams, x) -> np.ndarray:
    """Jacobian of the eval-mode network at ``x`` by one backward pass per output."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = net_forward(spec, params, xt, mode="eval").output
    rows = []
    for i in range(out.shape[0]):
        T.backward(out[i])
        rows.append(xt.grad.copy())
    return np.stack(rows)


def lipschitz_bound(spec: NetSpec, params: NetParams) -> float:
    """Upper bound on the Lipschitz constant from Frobenius norms."""
    bounds = [1.0]
    for n in range(1, spec.num_layers + 1):
        b = np.linalg.norm(params.layers[n - 1].weight.data) * bounds[n - 1]
        for a, t in spec.skip_links:
            if t == n:
                s = params.skips.get((a, t))
                b += (1.0 if s is None else np.linalg.norm(s.data)) * bounds[a]
        if spec.block_norm[n - 1]:
            bn = params.norms[n]
            b *= np.max(np.abs(bn.gain.data) / np.sqrt(np.maximum(bn.running_var, bn.eps)))
        for a, t in spec.residual_blocks:
            if t == n:
                b += bounds[a]
        bounds.append(float(b))
    return bounds[-1]
