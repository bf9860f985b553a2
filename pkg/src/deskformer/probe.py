"""Structural distance probe: squared projected distances fit tree distances."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import tensor as T
from .corpus import edges_to_parents, tree_distance_matrix, tree_edges
from .rng import stream
from .tensor import Tensor


@dataclass
class ProbeParams:
    B: np.ndarray  # [dim, rank]
    layer: int = 0

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.B.ndim != 2 or not 1 <= self.B.shape[1] <= self.B.shape[0]:
            raise ValueError(f"projection of shape {self.B.shape} needs 1 <= rank <= dim")

    @property
    def rank(self) -> int:
        return self.B.shape[1]


@dataclass
class ProbeReport:
    uuas: float
    loss: float
    spearman: float
    layer: int = 0
    predicted: list[list[int]] = field(default_factory=list)
    per_sentence: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"uuas": self.uuas, "loss": self.loss, "spearman": self.spearman,
                "layer": self.layer, "per_sentence": self.per_sentence}


def probe_distance(B, reps, i: int, j: int) -> float:
    reps = np.asarray(reps)
    n = len(reps)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"positions ({i}, {j}) outside sentence of length {n}")
    v = np.asarray(B).T @ (reps[i] - reps[j])
    return float(v @ v)


def probe_distance_matrix(B, reps) -> np.ndarray:
    P = np.asarray(reps) @ np.asarray(B)
    diff = P[:, None, :] - P[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def oracle_embedding(parents, dim: int, seed: int = 0) -> np.ndarray:
    """Points whose squared distances equal tree distances exactly.

    Node ``k`` owns the edge to its parent and a coordinate for it; each point
    is the 0/1 indicator of the edges on its path from the root. A seeded
    coordinate permutation and sign flip keep the arithmetic exact.
    """
    parents = list(parents)
    n = len(parents)
    if dim < n:
        raise ValueError(f"dim {dim} is smaller than sentence length {n}")
    tree_distance_matrix(parents)  # validates
    H = np.zeros((n, dim))
    for i in range(n):
        j = i
        while parents[j] != -1:
            H[i, j] = 1.0
            j = parents[j]
    rng = stream(seed, "oracle-embedding")
    perm = rng.permutation(dim)
    signs = rng.choice([-1.0, 1.0], size=dim)
    return H[:, perm] * signs


def _pad(reps_list, dists_list):
    S = len(reps_list)
    n = max(len(r) for r in reps_list)
    d = np.asarray(reps_list[0]).shape[1]
    R = np.zeros((S, n, d))
    D = np.zeros((S, n, n))
    W = np.zeros((S, n, n))
    for s, (r, g) in enumerate(zip(reps_list, dists_list)):
        m = len(r)
        R[s, :m] = r
        D[s, :m, :m] = g
        W[s, :m, :m] = 1.0 / (m * m)
    return R, D, W


def probe_loss(B: Tensor, R: np.ndarray, D: np.ndarray, W: np.ndarray) -> Tensor:
    """Mean over sentences of ``sum_ij |d_gold - ||B^T(h_i - h_j)||^2| / len^2``."""
    S, n, _ = R.shape
    P = T.matmul(Tensor(R), B)  # [S, n, r]
    r = P.shape[-1]
    diff = T.reshape(P, (S, n, 1, r)) - T.reshape(P, (S, 1, n, r))
    sq = T.sum_(diff * diff, axis=-1)
    return T.sum_(T.abs_(sq - D) * W) * (1.0 / S)


def _loss_value(B: np.ndarray, R, D, W) -> float:
    with T.no_grad():
        return float(probe_loss(Tensor(B), R, D, W).data)


def probe_train(reps_list, gold_list, rank: int, lr: float = 0.05, epochs: int = 200,
                seed: int = 0, batch_size: int = 64, momentum: float = 0.9,
                val_reps=None, val_gold=None, layer: int = 0, patience: int = 3,
                min_lr: float = 1e-6, check_every: int = 25) -> ProbeParams:
    """Fit a rank-``rank`` projection by minibatch gradient descent.

    ``gold_list`` holds distance matrices. Every ``check_every`` steps the
    validation loss (training loss without a validation set) is measured; after
    ``patience`` checks without improvement the learning rate halves and the
    best projection so far is restored. Training stops after ``epochs`` passes
    or once the rate falls below ``min_lr``. The best projection is returned.
    """
    if rank < 1:
        raise ValueError("rank must be at least 1")
    if len(reps_list) == 0:
        raise ValueError("empty training set")
    if len(reps_list) != len(gold_list):
        raise ValueError("reps and gold trees differ in count")
    dim = np.asarray(reps_list[0]).shape[1]
    if rank > dim:
        raise ValueError(f"rank {rank} exceeds representation dim {dim}")
    R, D, W = _pad(reps_list, gold_list)
    if val_reps is not None:
        vR, vD, vW = _pad(val_reps, val_gold)
    else:
        vR, vD, vW = R, D, W
    rng = stream(seed, "probe-init")
    B = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, rank)), requires_grad=True)
    velocity = np.zeros_like(B.data)
    best = B.data.copy()
    best_loss = _loss_value(best, vR, vD, vW)
    stale = 0
    step = 0
    for epoch in range(epochs):
        order = stream(seed, "probe-order", epoch).permutation(len(R))
        for start in range(0, len(R), batch_size):
            idx = order[start:start + batch_size]
            loss = probe_loss(B, R[idx], D[idx], W[idx])
            (g,) = T.grad(loss, [B])
            velocity = momentum * velocity + g
            B.data -= lr * velocity
            step += 1
            if step % check_every:
                continue
            val = _loss_value(B.data, vR, vD, vW)
            if val < best_loss:
                best_loss, best, stale = val, B.data.copy(), 0
                continue
            stale += 1
            if stale >= patience:
                lr *= 0.5
                stale = 0
                B.data[...] = best
                velocity[...] = 0.0
                if lr < min_lr:
                    return ProbeParams(best, layer)
    val = _loss_value(B.data, vR, vD, vW)
    if val < best_loss:
        best = B.data.copy()
    return ProbeParams(best, layer)


def mst_edges(dist: np.ndarray) -> list[tuple[int, int]]:
    """Kruskal over all pairs ordered by (distance, i, j)."""
    n = len(dist)
    pairs = sorted((dist[i, j], i, j) for i in range(n) for j in range(i + 1, n))
    root = list(range(n))

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    edges = []
    for _, i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            root[rj] = ri
            edges.append((i, j))
            if len(edges) == n - 1:
                break
    return edges


def probe_predict_tree(B, reps) -> list[int]:
    reps = np.asarray(reps)
    if len(reps) < 2:
        raise ValueError("need at least two words to decode a tree")
    return edges_to_parents(len(reps), mst_edges(probe_distance_matrix(B, reps)))


def uuas(predicted, gold) -> float:
    if len(predicted) != len(gold):
        raise ValueError(f"length mismatch: {len(predicted)} vs {len(gold)}")
    if len(gold) < 2:
        return 1.0
    return len(tree_edges(predicted) & tree_edges(gold)) / (len(gold) - 1)


def evaluate_probe(probe: ProbeParams, reps_list, parents_list, ids=None) -> ProbeReport:
    """UUAS (pooled over edges), mean loss and mean per-sentence Spearman."""
    correct = total = 0
    rhos = []
    per = []
    predicted = []
    golds = [tree_distance_matrix(p) for p in parents_list]
    R, D, W = _pad(reps_list, golds)
    loss = _loss_value(probe.B, R, D, W)
    for k, (reps, parents) in enumerate(zip(reps_list, parents_list)):
        n = len(parents)
        if n < 2:
            predicted.append([-1])
            continue
        pred = probe_predict_tree(probe.B, reps)
        predicted.append(pred)
        hit = len(tree_edges(pred) & tree_edges(parents))
        correct += hit
        total += n - 1
        iu = np.triu_indices(n, 1)
        pd = probe_distance_matrix(probe.B, reps)[iu]
        gd = golds[k][iu]
        rho = np.nan
        if n > 2 and np.ptp(pd) > 0 and np.ptp(gd) > 0:
            rho = float(spearmanr(pd, gd)[0])
            rhos.append(rho)
        per.append({"id": int(ids[k]) if ids is not None else k, "uuas": hit / (n - 1),
                    "spearman": None if np.isnan(rho) else rho, "predicted": pred})
    return ProbeReport(
        uuas=correct / total if total else 1.0,
        loss=loss,
        spearman=float(np.mean(rhos)) if rhos else float("nan"),
        layer=probe.layer,
        predicted=predicted,
        per_sentence=per,
    )


def probe_layers(train_reps: list[list[np.ndarray]], train_parents, test_reps, test_parents,
                 rank: int, seed: int = 0, **train_kw) -> tuple[list[ProbeReport], int]:
    """Train one probe per layer; returns all reports and the best layer by UUAS.

    ``train_reps[layer][sentence]`` is a ``[len, dim]`` array.
    """
    golds = [tree_distance_matrix(p) for p in train_parents]
    reports = []
    for layer, reps in enumerate(train_reps):
        probe = probe_train(reps, golds, rank, seed=seed, layer=layer, **train_kw)
        reports.append(evaluate_probe(probe, test_reps[layer], test_parents))
    best = int(np.argmax([r.uuas for r in reports]))
    return reports, best


# -- files -----------------------------------------------------------------
def write_probe_input(path, records) -> None:
    """``records`` yields ``(id, layer, reps)``."""
    with open(path, "w") as fh:
        for sid, layer, reps in records:
            fh.write(json.dumps({"id": int(sid), "layer": int(layer),
                                 "reps": np.asarray(reps).tolist()}) + "\n")


def read_probe_input(path) -> dict[int, dict[int, np.ndarray]]:
    """Returns ``{layer: {id: reps}}``."""
    out: dict[int, dict[int, np.ndarray]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.setdefault(int(rec["layer"]), {})[int(rec["id"])] = np.asarray(rec["reps"], dtype=np.float64)
    return out
