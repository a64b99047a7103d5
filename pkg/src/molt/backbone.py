"""Frozen synthetic transformer stacks and the layer input/output probe."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

MODALITIES = ("audio", "visual")


@dataclass
class TransformerLayer:
    """Pre-norm block: ``x + MHA(LN(x))`` followed by ``+ FFN(LN(.))``."""

    heads: int
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln1_gain: Parameter
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, heads: int, prefix: str,
             ffn_mult: int = 4, zero_outputs: bool = False) -> "TransformerLayer":
        if width % heads:
            raise ShapeError(f"width {width} is not divisible by {heads} heads")
        hidden = ffn_mult * width
        s = 1.0 / math.sqrt(width)

        def p(name, arr):
            return Parameter(arr, f"{prefix}.{name}", frozen=True)

        wo = np.zeros((width, width)) if zero_outputs else rng.normal(0, s, (width, width))
        w2 = np.zeros((hidden, width)) if zero_outputs else rng.normal(0, 1 / math.sqrt(hidden), (hidden, width))
        return cls(
            heads=heads,
            wq=p("wq", rng.normal(0, s, (width, width))),
            wk=p("wk", rng.normal(0, s, (width, width))),
            wv=p("wv", rng.normal(0, s, (width, width))),
            wo=p("wo", wo),
            w1=p("w1", rng.normal(0, s, (width, hidden))),
            b1=p("b1", np.zeros(hidden)),
            w2=p("w2", w2),
            b2=p("b2", np.zeros(width)),
            ln1_gain=p("ln1_gain", np.ones(width)),
            ln1_bias=p("ln1_bias", np.zeros(width)),
            ln2_gain=p("ln2_gain", np.ones(width)),
            ln2_bias=p("ln2_bias", np.zeros(width)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2,
                self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias]

    def attention(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self.heads
        dh = d // h
        r = len(lead)
        perm = (*range(r), r + 1, r, r + 2)

        def split(t):
            return T.transpose(T.reshape(t, (*lead, n, h, dh)), perm)

        q, k, v = split(x @ self.wq), split(x @ self.wk), split(x @ self.wv)
        att = T.softmax(T.mul(q @ k.mT, 1.0 / math.sqrt(dh)))
        out = T.reshape(T.transpose(att @ v, perm), (*lead, n, d))
        return out @ self.wo

    def ffn(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        hid = T.gelu(x @ self.w1 + T.expand_to(self.b1, lead))
        return hid @ self.w2 + T.expand_to(self.b2, lead)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(T.layer_norm(x, self.ln1_gain, self.ln1_bias))
        return x + self.ffn(T.layer_norm(x, self.ln2_gain, self.ln2_bias))


@dataclass
class RotationLayer:
    """Synthetic test layer rotating every coordinate pair by ``angle``.

    Every nonzero token keeps its norm and has cosine ``cos(angle)`` with its
    image, so a stack of these has a known input/output similarity profile.
    ``angle = pi`` negates the input.
    """

    angle: float

    def parameters(self) -> list[Parameter]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        if d % 2:
            raise ShapeError(f"rotation layer needs an even width, got {d}")
        c, s = math.cos(self.angle), math.sin(self.angle)
        rot = np.zeros((d, d))
        for i in range(0, d, 2):
            rot[i, i], rot[i, i + 1] = c, s
            rot[i + 1, i], rot[i + 1, i + 1] = -s, c
        return x @ Tensor(rot)


@dataclass
class BackboneStack:
    modality: str
    layers: list
    n_tokens: int
    width: int

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}


def build_stack(modality: str, depth: int = 8, width: int = 32, heads: int = 2, n_tokens: int = 16,
                seed: int = 0, ffn_mult: int = 4, residual_only: bool = False) -> BackboneStack:
    """Seeded random frozen stack; ``residual_only`` zeroes both sublayer output maps."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    rng = np.random.default_rng([seed, MODALITIES.index(modality)])
    layers = [TransformerLayer.init(rng, width, heads, f"backbone.{modality}.L{i + 1}",
                                    ffn_mult=ffn_mult, zero_outputs=residual_only)
              for i in range(depth)]
    return BackboneStack(modality, layers, n_tokens, width)


def drift_stack(modality: str, angles: Sequence[float], n_tokens: int = 16, width: int = 32) -> BackboneStack:
    return BackboneStack(modality, [RotationLayer(a) for a in angles], n_tokens, width)


def _check_input(stack: BackboneStack, x: Tensor) -> None:
    if x.ndim not in (2, 3) or x.shape[-2:] != (stack.n_tokens, stack.width):
        raise ShapeError(f"{stack.modality} stack expects (..., {stack.n_tokens}, {stack.width}), got {x.shape}")


def forward_collect(stack: BackboneStack, x) -> list[Tensor]:
    """Outputs of every layer, ``[f1, ..., fL]``; the input is not included.

    The returned tensors are detached from any graph: the backbone is tapped
    in parallel and never receives gradient.
    """
    x = T.as_tensor(x)
    _check_input(stack, x)
    feats = []
    h = Tensor(x.data)
    for layer in stack.layers:
        h = Tensor(layer(h).data)
        feats.append(h)
    return feats


def collect_array(stack: BackboneStack, x: np.ndarray, layers: Iterable[int] | None = None,
                  chunk: int = 512) -> dict[int, np.ndarray]:
    """Batched ``forward_collect`` returning raw arrays keyed by 1-based layer index."""
    wanted = set(range(1, stack.depth + 1)) if layers is None else set(layers)
    out: dict[int, list[np.ndarray]] = {l: [] for l in sorted(wanted)}
    for start in range(0, x.shape[0], chunk):
        feats = forward_collect(stack, x[start:start + chunk])
        for l in out:
            out[l].append(feats[l - 1].data)
    return {l: np.concatenate(parts, axis=0) for l, parts in out.items()}


@dataclass
class SimilarityReport:
    modality: str
    mean_cosine: list[float]
    excluded_tokens: list[int] = field(default_factory=list)


def layer_io_similarity(stack: BackboneStack, batch: Sequence) -> SimilarityReport:
    """Mean token cosine between each layer's input and output.

    Tokens whose input or output has zero norm are left out and counted.
    """
    if len(batch) == 0:
        raise ValueError("layer_io_similarity needs a nonempty batch")
    x = np.stack([T.as_tensor(b).data for b in batch])
    _check_input(stack, Tensor(x))
    feats = [x] + [f.data for f in forward_collect(stack, x)]
    means, excluded = [], []
    for l in range(stack.depth):
        a, b = feats[l], feats[l + 1]
        na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
        ok = (na > 0) & (nb > 0)
        cos = (a * b).sum(-1)[ok] / (na[ok] * nb[ok])
        means.append(float(np.clip(cos.mean(), -1.0, 1.0)) if cos.size else float("nan"))
        excluded.append(int((~ok).sum()))
    return SimilarityReport(stack.modality, means, excluded)


def write_similarity_csv(path, reports: Sequence[SimilarityReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_index", "modality", "mean_cosine"])
        for rep in reports:
            for i, v in enumerate(rep.mean_cosine, start=1):
                w.writerow([i, rep.modality, repr(v)])


STAGES = ("early", "mid", "late")


@dataclass(frozen=True)
class StagePlan:
    early: frozenset
    mid: frozenset
    late: frozenset
    adapted: frozenset

    def stage(self, name: str) -> frozenset:
        return getattr(self, name)

    def layers_for(self, stages: Iterable[str]) -> list[int]:
        out: set[int] = set()
        for s in stages:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}")
            out |= self.stage(s)
        return sorted(out)

    def with_adapted(self, stages: Iterable[str]) -> "StagePlan":
        return StagePlan(self.early, self.mid, self.late, frozenset(self.layers_for(stages)))


def validate_plan(plan: StagePlan, depth: int) -> None:
    everything = set(range(1, depth + 1))
    e, m, l = set(plan.early), set(plan.mid), set(plan.late)
    if e & m or e & l or m & l:
        raise ValueError("stage_plan: early/mid/late sets overlap")
    if e | m | l != everything:
        raise ValueError(f"stage_plan: stages must cover layers 1..{depth}")
    if not set(plan.adapted) <= everything:
        raise ValueError(f"stage_plan: adapted layers must lie in 1..{depth}")


def stage_partition(depth: int, early_count: int, late_count: int) -> StagePlan:
    if early_count < 0 or late_count < 0 or early_count + late_count > depth:
        raise ValueError(f"stage_partition: need early_count + late_count <= {depth}")
    early = frozenset(range(1, early_count + 1))
    late = frozenset(range(depth - late_count + 1, depth + 1))
    mid = frozenset(range(early_count + 1, depth - late_count + 1))
    return StagePlan(early, mid, late, late)
