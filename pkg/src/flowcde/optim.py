"""Adam optimizer over tensor parameters and checkpoint (de)serialization.

Weight decay is coupled L2: the decay term is added to the raw gradient
before the moment updates.  Checkpoints are a JSON descriptor next to a
binary blob of little-endian float64 values concatenated in descriptor
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class AdamState:
    """Per-parameter moments plus shared hyperparameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


class Adam:
    """Bias-corrected Adam over a named parameter list."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if lr <= 0 or eps <= 0 or weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        self.params = list(params)
        self.state = AdamState(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """Apply one update to every parameter that received a gradient."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step(self.params, grads, self.state)


def adam_step(params, grads, state: AdamState):
    s = state
    s.step_count += 1
    bc1 = 1.0 - s.beta1 ** s.step_count
    bc2 = 1.0 - s.beta2 ** s.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"'{p.name or i}' shape {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{p.name or i}'")
        if s.weight_decay:
            g = g + s.weight_decay * p.data
        m = s.first_moment[i]
        v = s.second_moment[i]
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * (g * g)
        p.data = p.data - s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: dict, hyperparameters: dict | None = None):
    """Write ``<path>.json`` descriptor and ``<path>.bin`` value blob.

    ``params`` maps names to tensors (or arrays); values are concatenated
    little-endian float64 in descriptor order.
    """
    path = Path(path)
    descriptor = {
        "version": CHECKPOINT_VERSION,
        "params": [],
        "hyperparameters": hyperparameters or {},
    }
    chunks = []
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        descriptor["params"].append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(descriptor, indent=2, sort_keys=True))
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint pair back into ``({name: ndarray}, hyperparameters)``."""
    path = Path(path)
    descriptor = json.loads(path.with_suffix(".json").read_text())
    if descriptor.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version mismatch: file has {descriptor.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    blob = path.with_suffix(".bin").read_bytes()
    params = {}
    offset = 0
    for entry in descriptor["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"checkpoint blob truncated at parameter '{entry['name']}'")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").astype(np.float64)
        params[entry["name"]] = arr.reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise ValueError("checkpoint blob has trailing bytes not covered by descriptor")
    return params, descriptor["hyperparameters"]
