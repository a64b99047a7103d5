"""Feature distillation: uni-modal and cross-modal adapters mixed by a router.

All functions take features with optional leading batch dimensions,
``(..., N_f, D)``; learnable query tokens are shared across the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

QUERY_INIT_SCALE = 0.02


def _gauss(rng, shape, scale):
    return rng.normal(0.0, scale, shape)


@dataclass
class DistillAttention:
    wq: Parameter
    wk: Parameter
    wv: Parameter
    heads: int

    @classmethod
    def init(cls, rng, width: int, heads: int, prefix: str) -> "DistillAttention":
        if width % heads:
            raise ShapeError(f"width {width} is not divisible by {heads} heads")
        s = 1.0 / math.sqrt(width)
        return cls(Parameter(_gauss(rng, (width, width), s), f"{prefix}.wq"),
                   Parameter(_gauss(rng, (width, width), s), f"{prefix}.wk"),
                   Parameter(_gauss(rng, (width, width), s), f"{prefix}.wv"),
                   heads)

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    r = len(lead)
    x = T.reshape(x, (*lead, n, heads, d // heads))
    return T.transpose(x, (*range(r), r + 1, r, r + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    r = len(lead)
    x = T.transpose(x, (*range(r), r + 1, r, r + 2))
    return T.reshape(x, (*lead, n, h * dh))


def _match_lead(z: Tensor, lead: tuple) -> Tensor:
    """Repeat ``z`` over the batch dimensions ``lead`` unless it already has them."""
    if z.shape[:-2] == lead:
        return z
    if z.ndim != 2:
        raise ShapeError(f"query tokens {z.shape} do not match batch dimensions {lead}")
    return T.expand_to(z, lead)


def token_distill(z: Tensor, f: Tensor, attn: DistillAttention) -> Tensor:
    """Latent queries ``z`` attend over features ``f``; heads are concatenated back to width D."""
    d = f.shape[-1]
    if z.shape[-1] != d or attn.wq.shape != (d, d):
        raise ShapeError(f"token_distill: queries {z.shape}, features {f.shape}, W^Q {attn.wq.shape}")
    if d % attn.heads:
        raise ShapeError(f"width {d} is not divisible by {attn.heads} heads")
    lead = f.shape[:-2]
    z = _match_lead(z, lead)
    q = _split_heads(z @ attn.wq, attn.heads)
    k = _split_heads(f @ attn.wk, attn.heads)
    v = _split_heads(f @ attn.wv, attn.heads)
    scores = T.mul(q @ k.mT, 1.0 / math.sqrt(d // attn.heads))
    return _merge_heads(T.softmax(scores) @ v)


def pooled_residual(f: Tensor, w: Parameter, n_tokens: int) -> Tensor:
    """Mean-pool ``f`` over tokens, project by ``w`` and repeat for every latent token."""
    pooled = T.mean(f, axis=-2)
    proj = T.reshape(T.reshape(pooled, (-1, pooled.shape[-1])) @ w, pooled.shape)
    return T.expand(proj, proj.ndim - 1, n_tokens)


@dataclass
class UniModalAdapter:
    queries: Parameter
    attn: DistillAttention
    w_res: Parameter

    @classmethod
    def init(cls, rng, width: int, heads: int, n_tokens: int, prefix: str) -> "UniModalAdapter":
        return cls(Parameter(_gauss(rng, (n_tokens, width), QUERY_INIT_SCALE), f"{prefix}.queries"),
                   DistillAttention.init(rng, width, heads, f"{prefix}.td"),
                   Parameter(_gauss(rng, (width, width), 1.0 / math.sqrt(width)), f"{prefix}.w_res"))

    @property
    def n_tokens(self) -> int:
        return self.queries.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.queries, *self.attn.parameters(), self.w_res]


def uda_forward(adapter: UniModalAdapter, f: Tensor) -> Tensor:
    return token_distill(adapter.queries, f, adapter.attn) + pooled_residual(f, adapter.w_res, adapter.n_tokens)


@dataclass
class CrossAttention:
    """Single-block attention: queries from one token set, keys/values from another."""

    wq: Parameter
    wk: Parameter
    wv: Parameter

    @classmethod
    def init(cls, rng, width: int, prefix: str) -> "CrossAttention":
        s = 1.0 / math.sqrt(width)
        return cls(Parameter(_gauss(rng, (width, width), s), f"{prefix}.wq"),
                   Parameter(_gauss(rng, (width, width), s), f"{prefix}.wk"),
                   Parameter(_gauss(rng, (width, width), s), f"{prefix}.wv"))

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv]

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        d = queries.shape[-1]
        scores = T.mul((queries @ self.wq) @ (context @ self.wk).mT, 1.0 / math.sqrt(d))
        return T.softmax(scores) @ (context @ self.wv)


@dataclass
class CrossModalAdapter:
    """Per-modality distillation followed by cross-attention in both directions.

    ``branches[m]`` holds modality m's queries, TD attention, the cross
    attention in which m's tokens are the queries, and m's residual map.
    """

    queries: dict[str, Parameter]
    td: dict[str, DistillAttention]
    ca: dict[str, CrossAttention]
    w_res: dict[str, Parameter]

    @classmethod
    def init(cls, rng, width: int, heads: int, n_tokens: int, prefix: str) -> "CrossModalAdapter":
        q, td, ca, wr = {}, {}, {}, {}
        for m in ("audio", "visual"):
            q[m] = Parameter(_gauss(rng, (n_tokens, width), QUERY_INIT_SCALE), f"{prefix}.{m}.queries")
            td[m] = DistillAttention.init(rng, width, heads, f"{prefix}.{m}.td")
            ca[m] = CrossAttention.init(rng, width, f"{prefix}.{m}.ca")
            wr[m] = Parameter(_gauss(rng, (width, width), 1.0 / math.sqrt(width)), f"{prefix}.{m}.w_res")
        return cls(q, td, ca, wr)

    def parameters(self) -> list[Parameter]:
        out = []
        for m in ("audio", "visual"):
            out += [self.queries[m], *self.td[m].parameters(), *self.ca[m].parameters(), self.w_res[m]]
        return out


def cda_forward(adapter: CrossModalAdapter, f_a: Tensor, f_v: Tensor) -> tuple[Tensor, Tensor]:
    """Returns ``(z_a, z_v)``."""
    na, nv = adapter.queries["audio"].shape[0], adapter.queries["visual"].shape[0]
    if na != nv:
        raise ValueError(f"cross-modal adapter needs equal token counts, got audio {na} and visual {nv}")
    if f_a.shape[:-2] != f_v.shape[:-2] or f_a.shape[-1] != f_v.shape[-1]:
        raise ShapeError(f"cda_forward: audio {f_a.shape} and visual {f_v.shape} do not conform")
    d_a = token_distill(adapter.queries["audio"], f_a, adapter.td["audio"])
    d_v = token_distill(adapter.queries["visual"], f_v, adapter.td["visual"])
    z_a = adapter.ca["audio"](d_a, d_v) + pooled_residual(f_a, adapter.w_res["audio"], na)
    z_v = adapter.ca["visual"](d_v, d_a) + pooled_residual(f_v, adapter.w_res["visual"], nv)
    return z_a, z_v


@dataclass
class Router:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def init(cls, rng, width: int, n_experts: int, prefix: str) -> "Router":
        # zero output layer: every expert starts with the same weight
        return cls(Parameter(_gauss(rng, (width, width), 1.0 / math.sqrt(width)), f"{prefix}.w1"),
                   Parameter(np.zeros(width), f"{prefix}.b1"),
                   Parameter(np.zeros((width, n_experts)), f"{prefix}.w2"),
                   Parameter(np.zeros(n_experts), f"{prefix}.b2"))

    @property
    def n_experts(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def _affine(x: Tensor, w: Parameter, b: Parameter | None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (..., in); ``b=None`` skips the bias."""
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = flat @ w
    out = T.reshape(out, (*lead, w.shape[1])) if x.ndim != 2 else out
    return out if b is None else out + T.expand_to(b, lead)


def router_logits(router: Router, f_v: Tensor, f_a: Tensor) -> Tensor:
    if f_v.shape[-1] != f_a.shape[-1]:
        raise ValueError(f"router needs equal widths, got visual {f_v.shape[-1]} and audio {f_a.shape[-1]}")
    pooled = T.mean(T.concat([f_v, f_a], axis=-2), axis=-2)
    return _affine(T.tanh(_affine(pooled, router.w1, router.b1)), router.w2, router.b2)


def route(router: Router, f_v: Tensor, f_a: Tensor) -> Tensor:
    """Softmax mixture weights over the router's experts."""
    return T.softmax(router_logits(router, f_v, f_a))


@dataclass
class FeatureDistillationModule:
    layer: int
    udas: list[dict[str, UniModalAdapter]]
    cdas: list[CrossModalAdapter]
    router: Router

    @classmethod
    def init(cls, rng, layer: int, width: int, heads: int, n_tokens: int, n_uda: int, n_cda: int,
             prefix: str | None = None) -> "FeatureDistillationModule":
        if n_uda + n_cda < 1:
            raise ValueError("a feature distillation module needs at least one adapter")
        prefix = prefix or f"fdm.L{layer}"
        udas = [{m: UniModalAdapter.init(rng, width, heads, n_tokens, f"{prefix}.uda{i}.{m}")
                 for m in ("audio", "visual")} for i in range(n_uda)]
        cdas = [CrossModalAdapter.init(rng, width, heads, n_tokens, f"{prefix}.cda{j}") for j in range(n_cda)]
        return cls(layer, udas, cdas, Router.init(rng, width, n_uda + n_cda, f"{prefix}.router"))

    def parameters(self) -> list[Parameter]:
        out = []
        for pair in self.udas:
            out += pair["audio"].parameters() + pair["visual"].parameters()
        for c in self.cdas:
            out += c.parameters()
        return out + self.router.parameters()

    def token_counts(self) -> set[int]:
        counts = {a.n_tokens for pair in self.udas for a in pair.values()}
        counts |= {q.shape[0] for c in self.cdas for q in c.queries.values()}
        return counts


def _weighted(w: Tensor, i: int, z: Tensor) -> Tensor:
    col = T.select(w, i, axis=-1)
    col = T.expand(T.expand(col, col.ndim, z.shape[-2]), col.ndim + 1, z.shape[-1])
    return col * z


@dataclass
class FdmOutput:
    visual: Tensor
    audio: Tensor
    weights: Tensor
    expert_outputs: list = field(default_factory=list)


def fdm_apply(fdm: FeatureDistillationModule, f_v: Tensor, f_a: Tensor) -> FdmOutput:
    if len(fdm.token_counts()) != 1:
        raise ValueError(f"adapters in layer {fdm.layer} disagree on token count: {sorted(fdm.token_counts())}")
    experts = [(uda_forward(pair["visual"], f_v), uda_forward(pair["audio"], f_a)) for pair in fdm.udas]
    experts += [tuple(reversed(cda_forward(c, f_a, f_v))) for c in fdm.cdas]
    w = route(fdm.router, f_v, f_a)
    z_v = z_a = None
    for i, (ev, ea) in enumerate(experts):
        tv, ta = _weighted(w, i, ev), _weighted(w, i, ea)
        z_v = tv if z_v is None else z_v + tv
        z_a = ta if z_a is None else z_a + ta
    return FdmOutput(z_v, z_a, w, experts)


def fdm_forward(fdm: FeatureDistillationModule, f_v: Tensor, f_a: Tensor) -> tuple[Tensor, Tensor]:
    """Router-weighted sum of every adapter's tokens; returns ``(z_v, z_a)``."""
    out = fdm_apply(fdm, f_v, f_a)
    return out.visual, out.audio
