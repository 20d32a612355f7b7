"""Logit models with a flat parameter vector and exact backpropagation.

Parameter layout, layers in order: weight matrix of shape (fan_in, fan_out)
stored row-major, then the bias vector of length fan_out. Hidden layers use
ReLU (derivative 0 at 0); the output layer is a single linear unit.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np

Kind = Literal["logistic", "mlp"]

CHECKPOINT_FORMAT = "eapo-classifier/1"


def layer_shapes(dim: int, hidden: Sequence[int]) -> list[tuple[int, int]]:
    widths = [dim, *hidden, 1]
    return list(zip(widths[:-1], widths[1:]))


def param_count(dim: int, hidden: Sequence[int]) -> int:
    return sum(a * b + b for a, b in layer_shapes(dim, hidden))


@dataclass
class Classifier:
    kind: Kind
    dim: int
    hidden: tuple[int, ...]
    params: np.ndarray
    seed: Optional[int] = None
    _shapes: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind == "logistic" and self.hidden:
            raise ValueError("logistic classifier takes no hidden layers")
        if self.kind == "mlp" and not self.hidden:
            raise ValueError("mlp needs at least one hidden layer")
        if self.dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("dimensions must be positive")
        self.params = np.array(self.params, dtype=np.float64).reshape(-1)
        if self.params.shape[0] != param_count(self.dim, self.hidden):
            raise ValueError(
                f"expected {param_count(self.dim, self.hidden)} parameters, got {self.params.shape[0]}"
            )
        if not np.all(np.isfinite(self.params)):
            raise ValueError("parameters must be finite")
        self._shapes = layer_shapes(self.dim, self.hidden)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Classifier):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.dim == other.dim
            and self.hidden == other.hidden
            and np.array_equal(self.params, other.params)
        )

    def layers(self, params: Optional[np.ndarray] = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``params`` (default: own parameters)."""
        p = self.params if params is None else params
        out, off = [], 0
        for a, b in self._shapes:
            w = p[off : off + a * b].reshape(a, b)
            off += a * b
            out.append((w, p[off : off + b]))
            off += b
        return out

    def _inputs(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.dim:
            raise ValueError(f"expected inputs of dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x2)):
            raise ValueError("inputs must be finite")
        return x2, single

    def forward(self, x):
        """Logit f(x) for one vector (returns float) or a batch (returns array)."""
        x2, single = self._inputs(x)
        z, _ = self._forward(x2)
        return float(z[0]) if single else z

    def backward(self, x, upstream) -> np.ndarray:
        """Gradient of sum_i upstream_i * f(x_i) with respect to ``params``."""
        x2, _ = self._inputs(x)
        _, cache = self._forward(x2)
        return self.backward_cached(cache, upstream)

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Batch logits plus the activations :meth:`backward_cached` needs.

        Skips input validation; callers pass already-validated 2-D arrays.
        """
        return self._forward(x)

    def _forward(self, x2: np.ndarray) -> tuple[np.ndarray, list]:
        layers = self.layers()
        acts = [x2]
        h = x2
        for w, b in layers[:-1]:
            h = h @ w
            h += b
            np.maximum(h, 0.0, out=h)
            acts.append(h)
        w, b = layers[-1]
        return (h @ w)[:, 0] + b[0], acts

    def backward_cached(self, acts: list, upstream) -> np.ndarray:
        up = np.asarray(upstream, dtype=np.float64).reshape(-1)
        if up.shape[0] != acts[0].shape[0]:
            raise ValueError("upstream must have one entry per input")
        if not np.all(np.isfinite(up)):
            raise ValueError("upstream gradient must be finite")
        layers = self.layers()
        grad = np.empty_like(self.params)
        gl = self.layers(grad)
        delta = up[:, None]
        for li in range(len(layers) - 1, -1, -1):
            gw, gb = gl[li]
            np.matmul(acts[li].T, delta, out=gw)
            np.sum(delta, axis=0, out=gb)
            if li > 0:
                # post-ReLU activation > 0 exactly where the pre-activation > 0
                delta = (delta @ layers[li][0].T) * (acts[li] > 0)
        return grad

    def predict_proba(self, x) -> np.ndarray:
        from eapo.objectives import sigmoid

        return sigmoid(np.atleast_1d(self.forward(x)))

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)

    def param_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.params).tobytes()).hexdigest()

    # checkpoint I/O -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": self.kind,
            "dim": self.dim,
            "hidden": list(self.hidden),
            "seed": self.seed,
            # float.hex is exact and byte-stable across platforms
            "params": [float(v).hex() for v in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        params = np.array([float.fromhex(s) for s in d["params"]], dtype=np.float64)
        return cls(d["kind"], int(d["dim"]), tuple(d["hidden"]), params, d.get("seed"))

    def save(self, path, extra: Optional[dict] = None) -> None:
        d = self.to_dict()
        if extra:
            d["extra"] = extra
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Classifier":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_classifier(kind: Kind, dim: int, hidden: Sequence[int] = (), seed: int = 0) -> Classifier:
    """Glorot-uniform weights, zero biases."""
    if kind == "logistic":
        hidden = ()
    if dim < 1 or any(h < 1 for h in hidden):
        raise ValueError("dimensions must be positive")
    if kind == "mlp" and len(hidden) == 0:
        raise ValueError("mlp needs at least one hidden layer")
    rng = np.random.default_rng(seed)
    chunks = []
    for a, b in layer_shapes(dim, hidden):
        limit = np.sqrt(6.0 / (a + b))
        chunks.append(rng.uniform(-limit, limit, size=a * b))
        chunks.append(np.zeros(b))
    return Classifier(kind, dim, tuple(hidden), np.concatenate(chunks), seed)


class ReferencePolicy:
    """Frozen snapshot of a classifier; pi_ref(1|x) = sigmoid(logit)."""

    __slots__ = ("_snapshot", "_hash")

    def __init__(self, model: Classifier):
        snap = model.copy()
        snap.params.setflags(write=False)
        object.__setattr__(self, "_snapshot", snap)
        object.__setattr__(self, "_hash", snap.param_hash())

    def __setattr__(self, name, value):
        raise AttributeError("ReferencePolicy is immutable")

    @property
    def snapshot(self) -> Classifier:
        return self._snapshot

    @property
    def param_hash(self) -> str:
        return self._hash

    def logit(self, x):
        return self._snapshot.forward(x)

    def prob(self, x):
        return self._snapshot.predict_proba(x)


def freeze_reference(model: Classifier) -> ReferencePolicy:
    return ReferencePolicy(model)
