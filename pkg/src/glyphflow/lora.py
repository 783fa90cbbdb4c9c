"""Low-rank adapters for the flow model's self-attention projections.

An adapter for a target weight W (d_out, d_in) holds a: (r, d_in) and
b: (d_out, r); the effective weight is W + (alpha/r) * b @ a. b starts at
zero so a fresh adapter set leaves the model bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AdapterStateError, InvalidInputError
from .flow_model import FlowModel


@dataclass
class LoraAdapter:
    target: str
    a: np.ndarray  # (r, d_in)
    b: np.ndarray  # (d_out, r)
    rank: int
    alpha: float

    def delta(self) -> np.ndarray:
        """Effective additive weight, shaped like the target matrix."""
        return (self.alpha / self.rank) * (self.b @ self.a)


@dataclass
class AdapterSet:
    """Named adapters plus merge bookkeeping; behaves like a read-only mapping."""

    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    merged: bool = False

    def get(self, name: str) -> LoraAdapter | None:
        return self.adapters.get(name)

    def __iter__(self):
        return iter(self.adapters.values())

    def __len__(self) -> int:
        return len(self.adapters)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, ad in self.adapters.items():
            out[f"{name}.lora_a"] = ad.a
            out[f"{name}.lora_b"] = ad.b
        return out


def init_adapters(
    model: FlowModel,
    targets: list[str],
    rank: int = 4,
    alpha: float = 4.0,
    rng: np.random.Generator | None = None,
) -> AdapterSet:
    """Fresh adapters: a ~ N(0, 1/d_in), b = 0 (zero initial delta)."""
    if rng is None:
        raise InvalidInputError("an rng is required for adapter initialization")
    valid = set(model.self_attention_targets())
    adapters = {}
    for name in targets:
        if name not in valid:
            raise InvalidInputError(
                f"{name!r} is not a self-attention projection of this model"
            )
        w = model.weights[name]
        d_out, d_in = w.shape
        if rank > min(d_in, d_out):
            raise InvalidInputError(
                f"rank {rank} exceeds min dimension {min(d_in, d_out)} of {name!r}"
            )
        a = rng.standard_normal((rank, d_in)) / np.sqrt(d_in)
        b = np.zeros((d_out, rank))
        adapters[name] = LoraAdapter(target=name, a=a, b=b, rank=rank, alpha=alpha)
    return AdapterSet(adapters=adapters)


def effective_weight(w: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """W + (alpha/r) * b @ a; pure."""
    delta = adapter.delta()
    if delta.shape != w.shape:
        raise InvalidInputError(
            f"adapter delta shape {delta.shape} does not match weight {w.shape}"
        )
    return w + delta


def merge(model: FlowModel, adapters: AdapterSet) -> FlowModel:
    """Add adapter deltas into the base weights in place."""
    if adapters.merged:
        raise AdapterStateError("adapter set is already merged")
    for ad in adapters:
        if ad.target not in model.weights:
            raise InvalidInputError(f"model has no weight {ad.target!r}")
        model.weights[ad.target] = model.weights[ad.target] + ad.delta()
    adapters.merged = True
    return model


def unmerge(model: FlowModel, adapters: AdapterSet) -> FlowModel:
    """Subtract previously merged deltas, restoring the base weights."""
    if not adapters.merged:
        raise AdapterStateError("adapter set is not merged")
    for ad in adapters:
        model.weights[ad.target] = model.weights[ad.target] - ad.delta()
    adapters.merged = False
    return model


def adapter_grads_from_weight_grads(
    adapters: AdapterSet, weight_grads: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Map effective-weight gradients onto (a, b) parameter gradients."""
    out = {}
    for name, ad in adapters.adapters.items():
        gw = weight_grads[name]
        scale = ad.alpha / ad.rank
        out[f"{name}.lora_a"] = scale * (ad.b.T @ gw)
        out[f"{name}.lora_b"] = scale * (gw @ ad.a.T)
    return out
