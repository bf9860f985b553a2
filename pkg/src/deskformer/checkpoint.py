"""JSON checkpoints with exact float64 round-trip and a content hash.

Layout::

    {"config": {...}, "hash": "<sha256>", "kind": "...",
     "params": {name: {"data": [...], "shape": [...]}},
     "rng": {...}, "version": 1}

Keys are sorted and every float is written with 17 significant digits, so
``save -> load -> save`` reproduces the file byte for byte. The hash is the
SHA-256 of the canonical text of everything except the hash itself.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VERSION = 1


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _dumps(obj[k]) for k in sorted(obj)) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dumps(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _dumps(obj.tolist())
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise CheckpointError("non-finite value cannot be checkpointed")
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    raise CheckpointError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    return _dumps(obj)


def params_hash(params: dict[str, np.ndarray]) -> str:
    """Hash of named tensors alone (used to certify frozen weights)."""
    body = {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).reshape(-1)}
            for k, v in params.items()}
    return hashlib.sha256(_dumps(body).encode()).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    version: int = VERSION

    def body(self) -> dict:
        return {
            "version": self.version,
            "kind": self.kind,
            "params": {
                k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).reshape(-1)}
                for k, v in self.params.items()
            },
            "config": self.config,
            "rng": self.rng,
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(_dumps(self.body()).encode()).hexdigest()

    def dumps(self) -> str:
        body = self.body()
        body["hash"] = self.hash
        return _dumps(body) + "\n"

    def save(self, path) -> str:
        Path(path).write_text(self.dumps())
        return self.hash

    @classmethod
    def loads(cls, text: str, verify: bool = True) -> "Checkpoint":
        try:
            # "-0" must stay a signed float zero for an exact round trip
            raw = json.loads(text, parse_int=lambda s: -0.0 if s == "-0" else int(s))
            params = {
                k: np.array([float(x) for x in v["data"]], dtype=np.float64).reshape(v["shape"])
                for k, v in raw["params"].items()
            }
            ckpt = cls(raw["kind"], params, raw.get("config", {}), raw.get("rng", {}),
                       int(raw["version"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc
        if ckpt.version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {ckpt.version}")
        if verify and raw.get("hash") != ckpt.hash:
            raise CheckpointError("checkpoint hash does not match its contents")
        return ckpt

    @classmethod
    def load(cls, path, verify: bool = True) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise CheckpointError(f"no checkpoint at {p}")
        return cls.loads(p.read_text(), verify)
