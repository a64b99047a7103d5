"""Importance-weighted fusion of layer-wise latent tokens."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .fdm import _affine
from .tensor import Parameter, ShapeError, Tensor

METHODS = ("mlp", "avg-pool", "learnable-gates")


@dataclass
class TokenFuser:
    """``method`` selects how layer weights are produced.

    mlp
        A two-layer tanh MLP scores each layer's mean-pooled tokens and a
        softmax over layers turns the scores into weights (input-dependent).
        The scoring layer has no bias: a shared offset cancels in the softmax.
    avg-pool
        Uniform weights.
    learnable-gates
        Softmax over one free logit per layer (input-independent).
    """

    method: str
    n_layers: int
    w1: Parameter | None = None
    b1: Parameter | None = None
    w2: Parameter | None = None
    b2: Parameter | None = None
    gates: Parameter | None = None

    @classmethod
    def init(cls, rng, method: str, width: int, n_layers: int, prefix: str) -> "TokenFuser":
        if method not in METHODS:
            raise ValueError(f"unknown fusion method {method!r}; expected one of {METHODS}")
        if method == "mlp":
            return cls(method, n_layers,
                       w1=Parameter(rng.normal(0, 1 / math.sqrt(width), (width, width)), f"{prefix}.w1"),
                       b1=Parameter(np.zeros(width), f"{prefix}.b1"),
                       w2=Parameter(np.zeros((width, 1)), f"{prefix}.w2"))
        if method == "learnable-gates":
            return cls(method, n_layers, gates=Parameter(np.zeros(n_layers), f"{prefix}.gates"))
        return cls(method, n_layers)

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.w1, self.b1, self.w2, self.b2, self.gates) if p is not None]


def _check_layers(z: Sequence[Tensor]) -> None:
    if not z:
        raise ValueError("token fusion needs at least one layer")
    ref = z[0].shape
    for t in z[1:]:
        if t.shape != ref:
            raise ShapeError(f"layer token shapes differ: {ref} vs {t.shape}")


def layer_logits(fuser: TokenFuser, z: Sequence[Tensor]) -> Tensor:
    """Per-layer mlp scores, shape (..., n_layers)."""
    cols = []
    for t in z:
        pooled = T.mean(t, axis=-2)
        score = _affine(T.tanh(_affine(pooled, fuser.w1, fuser.b1)), fuser.w2, fuser.b2)
        cols.append(score)
    return T.concat(cols, axis=-1)


def tfm_weights(fuser: TokenFuser, z: Sequence[Tensor]) -> Tensor:
    _check_layers(z)
    n = len(z)
    if fuser.n_layers != n:
        raise ShapeError(f"fuser built for {fuser.n_layers} layers, got {n}")
    lead = z[0].shape[:-2]
    if fuser.method == "mlp":
        return T.softmax(layer_logits(fuser, z))
    if fuser.method == "learnable-gates":
        return T.expand_to(T.softmax(fuser.gates), lead)
    return Tensor(np.full((*lead, n), 1.0 / n))


def fuse_with(alpha: Tensor, z: Sequence[Tensor]) -> Tensor:
    out = None
    for i, t in enumerate(z):
        a = T.select(alpha, i, axis=-1)
        a = T.expand(T.expand(a, a.ndim, t.shape[-2]), a.ndim + 1, t.shape[-1])
        term = a * t
        out = term if out is None else out + term
    return out


def tfm_fuse(fuser: TokenFuser, z: Sequence[Tensor]) -> Tensor:
    return fuse_with(tfm_weights(fuser, z), z)


def write_fusion_csv(path, rows) -> None:
    """``rows``: iterable of (run_id, modality, layer_index, alpha)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "modality", "layer_index", "alpha"])
        for run_id, modality, layer, alpha in rows:
            w.writerow([run_id, modality, layer, repr(float(alpha))])
