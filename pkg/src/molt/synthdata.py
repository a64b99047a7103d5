"""Seeded paired audio/visual classification tasks.

Four regimes:

audio-only / visual-only
    The label is planted in one stream as a low-rank token-subspace shift
    (a class direction added to a class-specific subset of tokens); the
    other stream is pure noise.
cross-modal
    Each stream carries a "semantic" factor read off the frozen backbone's
    last layer along a direction that early-stage features cannot linearly
    predict.  label = (audio_factor + visual_factor) mod K, so neither stream
    alone is better than chance.
layered-signal
    The audio stream carries two semantic factors.  The first is read off
    layer 7 along a direction layer 8 predicts poorly; the second is read
    off layer 8 along a direction no lower layer predicts.  A marker shift
    added to every input token decides which factor is the label; the other
    one is a decoy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .backbone import BackboneStack, build_stack, collect_array

REGIMES = ("audio-only", "visual-only", "cross-modal", "layered-signal")
SPLITS = ("train", "val", "test")
AXIS_BALANCE = 0.3
FADING_BALANCE = 0.1


@dataclass
class Dataset:
    regime: str
    seed: int
    num_classes: int
    audio: np.ndarray
    visual: np.ndarray
    labels: np.ndarray
    factors: dict[str, np.ndarray]
    splits: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> np.ndarray:
        return self.splits[name]

    def recompute_labels(self) -> np.ndarray:
        return label_from_factors(self.regime, self.factors, self.num_classes)

    def to_json(self) -> str:
        payload = {
            "regime": self.regime,
            "seed": self.seed,
            "num_classes": self.num_classes,
            "audio": self.audio.tolist(),
            "visual": self.visual.tolist(),
            "labels": self.labels.tolist(),
            "factors": {k: v.tolist() for k, v in self.factors.items()},
            "splits": {k: v.tolist() for k, v in self.splits.items()},
            "meta": self.meta,
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        d = json.loads(text)
        return cls(
            regime=d["regime"],
            seed=d["seed"],
            num_classes=d["num_classes"],
            audio=np.asarray(d["audio"], dtype=np.float64),
            visual=np.asarray(d["visual"], dtype=np.float64),
            labels=np.asarray(d["labels"], dtype=np.int64),
            factors={k: np.asarray(v, dtype=np.int64) for k, v in d["factors"].items()},
            splits={k: np.asarray(v, dtype=np.int64) for k, v in d["splits"].items()},
            meta=d["meta"],
        )


def label_from_factors(regime: str, factors: dict[str, np.ndarray], num_classes: int) -> np.ndarray:
    if regime == "audio-only":
        return factors["audio"].copy()
    if regime == "visual-only":
        return factors["visual"].copy()
    if regime == "cross-modal":
        return (factors["audio"] + factors["visual"]) % num_classes
    if regime == "layered-signal":
        return np.where(factors["marker"] == 1, factors["early_signal"], factors["late_signal"])
    raise ValueError(f"unknown regime {regime!r}")


# planted low-rank patterns ---------------------------------------------------

def _patterns(rng: np.random.Generator, num_classes: int, n_tokens: int, width: int,
              rank_tokens: int) -> np.ndarray:
    """One (n_tokens, width) rank-1 pattern per class: a direction on a token subset."""
    pats = np.zeros((num_classes, n_tokens, width))
    for k in range(num_classes):
        d = rng.normal(size=width)
        d /= np.linalg.norm(d)
        rows = rng.choice(n_tokens, size=rank_tokens, replace=False)
        pats[k, rows] = d
    return pats


def _planted_stream(rng, labels, pats, noise, amplitude):
    n = len(labels)
    x = rng.normal(0.0, noise, size=(n, *pats.shape[1:]))
    return x + amplitude * pats[labels]


# semantic factors read from the backbone -------------------------------------

@dataclass(frozen=True)
class SemanticAxis:
    layer: int
    direction: np.ndarray
    center: float
    scale: float
    novelty: float

    def score(self, pooled: np.ndarray) -> np.ndarray:
        return (pooled @ self.direction - self.center) / self.scale


def _pooled_all(stack: BackboneStack, x: np.ndarray) -> list[np.ndarray]:
    feats = collect_array(stack, x)
    return [x.mean(axis=1)] + [feats[l].mean(axis=1) for l in range(1, stack.depth + 1)]


def emergent_axis(stack: BackboneStack, layer: int, base_layers, x_calib: np.ndarray,
                  pooled=None, ridge: float = 1e-3, balance: float | None = None) -> SemanticAxis:
    """Direction in layer ``layer``'s pooled features least predictable from ``base_layers``.

    Solves the generalized eigenproblem max var(u.r) / (var(u.p) + balance*|u|^2),
    where p are the pooled layer features and r the residual of a ridge
    regression of p on the pooled features of ``base_layers`` (0 is the raw
    input).  balance=0 gives the most novel direction, which tends to be a
    near-silent one; a positive balance trades a little novelty for magnitude.
    """
    import scipy.linalg

    pooled = _pooled_all(stack, x_calib) if pooled is None else pooled
    y = pooled[layer]
    xb = np.concatenate([pooled[b] for b in base_layers] + [np.ones((len(y), 1))], axis=1)
    gram = xb.T @ xb + ridge * len(y) * np.eye(xb.shape[1])
    coef = np.linalg.solve(gram, xb.T @ y)
    resid = y - xb @ coef
    cov_r = np.cov(resid.T)
    balance = AXIS_BALANCE if balance is None else balance
    cov_y = np.cov(y.T) + (balance + 1e-9) * np.eye(y.shape[1])
    vals, vecs = scipy.linalg.eigh(cov_r, cov_y)
    u = vecs[:, -1] / np.linalg.norm(vecs[:, -1])
    s = y @ u
    novelty = float((resid @ u).var() / s.var())
    return SemanticAxis(layer, u, float(s.mean()), float(s.std()), novelty)


def _bin_edges(num_classes: int) -> np.ndarray:
    from scipy.stats import norm

    return norm.ppf(np.arange(1, num_classes) / num_classes)


def _bin(score: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, score).astype(np.int64)


def _margin_ok(score: np.ndarray, edges: np.ndarray, margin: float) -> np.ndarray:
    if edges.size == 0:
        return np.ones_like(score, dtype=bool)
    return np.min(np.abs(score[:, None] - edges[None, :]), axis=1) >= margin


def _marker_pattern(rng, n_tokens: int, width: int) -> np.ndarray:
    # the same shift on every token: attention over tokens cannot isolate it,
    # so only pooled statistics see the marker
    d = rng.normal(size=width)
    d /= np.linalg.norm(d)
    return np.tile(d, (n_tokens, 1))


@lru_cache(maxsize=16)
def _cached_axes(modality: str, depth: int, width: int, heads: int, n_tokens: int, backbone_seed: int,
                 regime: str, early_stage: int, signal_layers: tuple, marker_amplitude: float,
                 n_calib: int) -> tuple:
    stack = build_stack(modality, depth, width, heads, n_tokens, backbone_seed)
    rng = np.random.default_rng([backbone_seed, 7919, n_calib])
    x = rng.normal(size=(n_calib, n_tokens, width))
    if regime == "layered-signal":
        pat = _marker_pattern(np.random.default_rng([backbone_seed, 104729]), n_tokens, width)
        signs = rng.choice([-1.0, 1.0], size=n_calib)
        x = x + marker_amplitude * signs[:, None, None] * pat
    pooled = _pooled_all(stack, x)
    if regime == "cross-modal":
        return (emergent_axis(stack, depth, range(early_stage + 1), x, pooled),)
    first, second = signal_layers
    # the early factor fades by the next layer; the late one is new relative to everything below it
    return (emergent_axis(stack, first, [second], x, pooled, balance=FADING_BALANCE),
            emergent_axis(stack, second, range(second), x, pooled))


@dataclass(frozen=True)
class BackboneSpec:
    """Shapes and seed needed to rebuild the frozen stacks a dataset was made against."""

    depth: int = 8
    width: int = 32
    heads: int = 2
    n_tokens: int = 16
    seed: int = 0

    def stack(self, modality: str) -> BackboneStack:
        return build_stack(modality, self.depth, self.width, self.heads, self.n_tokens, self.seed)


def _draw_cells(stack, axes, rng, edges, margin, counts: dict, marker=None) -> dict:
    """Draw noise inputs until every factor cell has its quota.

    A cell is the tuple of bin indices along ``axes``; inputs whose score lies
    within ``margin`` of a bin edge are discarded so factors are unambiguous.
    """
    n_tokens, width = stack.n_tokens, stack.width
    got = {cell: [] for cell in counts}
    have = {cell: 0 for cell in counts}
    while any(have[c] < counts[c] for c in counts):
        missing = sum(max(0, counts[c] - have[c]) for c in counts)
        batch = min(8192, max(256, 2 * missing))
        x = rng.normal(size=(batch, n_tokens, width))
        if marker is not None:
            pat, amp = marker
            x = x + amp * pat
        pooled = _pooled_all(stack, x)
        sc = np.stack([ax.score(pooled[ax.layer]) for ax in axes], axis=1)
        keep = np.all([_margin_ok(sc[:, i], edges, margin) for i in range(len(axes))], axis=0)
        bins = np.stack([_bin(sc[:, i], edges) for i in range(len(axes))], axis=1)
        for i in np.flatnonzero(keep):
            cell = tuple(int(b) for b in bins[i])
            if cell in counts and have[cell] < counts[cell]:
                got[cell].append(x[i])
                have[cell] += 1
    return {c: np.stack(v) if v else np.empty((0, n_tokens, width)) for c, v in got.items()}


def generate(regime: str, seed: int, n: int, num_classes: int, backbone: BackboneSpec | None = None,
             noise: float = 1.0, amplitude: float = 1.5, pattern_tokens: int | None = None,
             margin: float = 0.15, marker_amplitude: float = 1.0, early_stage: int = 4,
             signal_layers: tuple | None = None, split_fractions=(4, 1, 1)) -> Dataset:
    """Build a dataset of ``n`` examples with balanced classes and disjoint splits."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if num_classes < 2 or n < num_classes:
        raise ValueError("generate requires n >= num_classes >= 2")
    bb = backbone or BackboneSpec()
    rng = np.random.default_rng([seed, REGIMES.index(regime)])
    nt, w = bb.n_tokens, bb.width
    meta: dict = {"backbone": bb.__dict__.copy()}

    if regime in ("audio-only", "visual-only"):
        labels = np.arange(n) % num_classes
        rng.shuffle(labels)
        pattern_tokens = max(1, nt // 2) if pattern_tokens is None else pattern_tokens
        if not 1 <= pattern_tokens <= nt:
            raise ValueError(f"pattern_tokens must lie in 1..{nt}")
        pats = _patterns(np.random.default_rng([seed, 31]), num_classes, nt, w, pattern_tokens)
        signal = _planted_stream(rng, labels, pats, noise, amplitude)
        other = rng.normal(0.0, noise, size=signal.shape)
        audio, visual = (signal, other) if regime == "audio-only" else (other, signal)
        key = "audio" if regime == "audio-only" else "visual"
        factors = {key: labels.astype(np.int64)}
        meta.update(noise=noise, amplitude=amplitude, pattern_tokens=pattern_tokens)

    elif regime == "cross-modal":
        edges = _bin_edges(num_classes)
        combos = np.arange(n) % (num_classes * num_classes)
        rng.shuffle(combos)
        fa, fv = combos // num_classes, combos % num_classes
        streams = {}
        for modality, want in (("audio", fa), ("visual", fv)):
            axes = _cached_axes(modality, bb.depth, w, bb.heads, nt, bb.seed, regime, early_stage,
                                (), 0.0, 6000)
            counts = {(k,): int((want == k).sum()) for k in range(num_classes)}
            drawn = _draw_cells(bb.stack(modality), axes, rng, edges, margin, counts)
            out = np.empty((n, nt, w))
            for k in range(num_classes):
                out[want == k] = drawn[(k,)]
            streams[modality] = out
            meta[f"{modality}_axis_novelty"] = axes[0].novelty
        audio, visual = streams["audio"], streams["visual"]
        factors = {"audio": fa.astype(np.int64), "visual": fv.astype(np.int64)}
        labels = label_from_factors(regime, factors, num_classes)
        meta.update(margin=margin, early_stage=early_stage)

    else:  # layered-signal
        layers = tuple(signal_layers or (bb.depth - 1, bb.depth))
        if len(layers) != 2 or not (1 <= layers[0] < layers[1] <= bb.depth):
            raise ValueError("signal_layers must be two increasing layer indices")
        edges = _bin_edges(num_classes)
        axes = _cached_axes("audio", bb.depth, w, bb.heads, nt, bb.seed, regime, early_stage,
                            layers, marker_amplitude, 6000)
        pat = _marker_pattern(np.random.default_rng([bb.seed, 104729]), nt, w)
        combos = np.arange(n) % (2 * num_classes * num_classes)
        rng.shuffle(combos)
        marker = combos % 2
        want_e = (combos // 2) % num_classes
        want_l = (combos // (2 * num_classes)) % num_classes
        stack = bb.stack("audio")
        audio = np.empty((n, nt, w))
        for m in (0, 1):
            sel = marker == m
            counts = {(ke, kl): int((sel & (want_e == ke) & (want_l == kl)).sum())
                      for ke in range(num_classes) for kl in range(num_classes)}
            sign = 1.0 if m else -1.0
            drawn = _draw_cells(stack, axes, rng, edges, margin, counts,
                                marker=(pat, sign * marker_amplitude))
            for (ke, kl), xs in drawn.items():
                audio[sel & (want_e == ke) & (want_l == kl)] = xs
        visual = rng.normal(0.0, 1.0, size=audio.shape)
        factors = {"marker": marker.astype(np.int64), "early_signal": want_e.astype(np.int64),
                   "late_signal": want_l.astype(np.int64)}
        labels = label_from_factors(regime, factors, num_classes)
        meta.update(signal_layers=list(layers), margin=margin, marker_amplitude=marker_amplitude,
                    axis_novelty=[ax.novelty for ax in axes])

    perm = rng.permutation(n)
    fr = np.asarray(split_fractions, dtype=float)
    cuts = np.floor(np.cumsum(fr)[:-1] / fr.sum() * n).astype(int)
    parts = np.split(perm, cuts)
    splits = {name: np.sort(p) for name, p in zip(SPLITS, parts)}
    return Dataset(regime, seed, num_classes, audio, visual, labels.astype(np.int64), factors, splits, meta)


def signal_layer_of(dataset: Dataset) -> np.ndarray:
    """Per-example backbone layer whose factor decides the label (layered-signal only)."""
    if dataset.regime != "layered-signal":
        raise ValueError("signal_layer_of applies to the layered-signal regime")
    early, late = dataset.meta["signal_layers"]
    return np.where(dataset.factors["marker"] == 1, early, late)


def single_stream_bayes_bound(dataset: Dataset, stream: str) -> float:
    """Best accuracy achievable from one stream's planted factors (or both with ``"both"``).

    Enumerates every value of the stream's stored factors and predicts the
    majority label for it, which is the Bayes rule given those factors.
    """
    regime = dataset.regime
    f = dataset.factors
    if stream not in ("audio", "visual", "both"):
        raise ValueError(f"unknown stream {stream!r}")
    if regime == "layered-signal":
        audio_keys, visual_keys = ["marker", "early_signal", "late_signal"], []
    elif regime in REGIMES:
        audio_keys = ["audio"] if "audio" in f else []
        visual_keys = ["visual"] if "visual" in f else []
    else:
        raise ValueError(f"unknown regime {regime!r}")
    keys = {"audio": audio_keys, "visual": visual_keys, "both": audio_keys + visual_keys}[stream]
    n = len(dataset)
    if not keys:
        cells = np.zeros(n, dtype=np.int64)
    else:
        cells = np.ravel_multi_index([f[k] for k in keys], [int(f[k].max()) + 1 for k in keys])
    correct = 0
    for c in np.unique(cells):
        correct += np.bincount(dataset.labels[cells == c]).max()
    return correct / n
