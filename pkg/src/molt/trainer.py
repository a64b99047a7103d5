"""Model assembly, optimisation, evaluation and efficiency accounting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from . import tensor as T
from .backbone import STAGES, BackboneStack, collect_array, forward_collect
from .config import MoltConfig
from .fdm import FeatureDistillationModule, fdm_apply
from .fusion import TokenFuser, fuse_with, tfm_weights
from .losses import mean_offdiag_abs_cosine, task_loss, token_cosines, tor_loss, total_loss
from .synthdata import Dataset, generate
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelOutput:
    logits: Tensor
    tokens: dict[str, list[Tensor]]
    alpha: dict[str, Tensor]
    router: dict[int, Tensor]


class MoltModel:
    """Frozen audio/visual stacks plus the trainable adaptation path.

    Adapters read the tapped layer outputs; nothing is written back into the
    backbones.
    """

    def __init__(self, config: MoltConfig, stacks: dict[str, BackboneStack] | None = None):
        self.config = config
        bb = config.backbone
        spec = bb.spec()
        self.stacks = stacks or {m: spec.stack(m) for m in ("audio", "visual")}
        # features can be shared between models built from the same backbone shapes and seed
        self.stack_key = spec if stacks is None else id(stacks)
        self.layers = config.adapted_layers
        rng = np.random.default_rng([config.seed, 2024])
        f = config.fdm
        self.fdms = {l: FeatureDistillationModule.init(rng, l, bb.width, f.heads, f.n_tokens, f.n_uda, f.n_cda)
                     for l in self.layers}
        self.fusers = {m: TokenFuser.init(rng, config.fusion, bb.width, len(self.layers), f"fusion.{m}")
                       for m in ("audio", "visual")}
        k = config.data.num_classes
        self.head_w = Parameter(rng.normal(0, 1 / math.sqrt(2 * bb.width), (2 * bb.width, k)), "head.w")
        self.head_b = Parameter(np.zeros(k), "head.b")

    def parameters(self) -> list[Parameter]:
        out = []
        for l in self.layers:
            out += self.fdms[l].parameters()
        for m in ("audio", "visual"):
            out += self.fusers[m].parameters()
        return out + [self.head_w, self.head_b]

    def frozen_parameters(self) -> list[Parameter]:
        return self.stacks["audio"].parameters() + self.stacks["visual"].parameters()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def forward_features(self, feats_a: dict[int, np.ndarray], feats_v: dict[int, np.ndarray]) -> ModelOutput:
        tokens: dict[str, list[Tensor]] = {"audio": [], "visual": []}
        router = {}
        for l in self.layers:
            out = fdm_apply(self.fdms[l], T.as_tensor(feats_v[l]), T.as_tensor(feats_a[l]))
            tokens["audio"].append(out.audio)
            tokens["visual"].append(out.visual)
            router[l] = out.weights
        alpha, pooled = {}, []
        for m in ("audio", "visual"):
            alpha[m] = tfm_weights(self.fusers[m], tokens[m])
            fused = fuse_with(alpha[m], tokens[m])
            pooled.append(T.mean(fused, axis=-2))
        h = T.concat(pooled, axis=-1)
        if h.ndim == 1:
            h = T.reshape(h, (1, h.shape[0]))
        logits = h @ self.head_w + T.expand_to(self.head_b, h.shape[:-1])
        return ModelOutput(logits, tokens, alpha, router)

    def forward(self, audio, visual) -> ModelOutput:
        fa = forward_collect(self.stacks["audio"], audio)
        fv = forward_collect(self.stacks["visual"], visual)
        return self.forward_features({l: fa[l - 1] for l in self.layers}, {l: fv[l - 1] for l in self.layers})

    def losses(self, out: ModelOutput, labels):
        task = task_loss(out.logits, labels)
        lam = self.config.lambda_tor
        tor_a, tor_v = tor_loss(out.tokens["audio"]), tor_loss(out.tokens["visual"])
        return total_loss(task, tor_a, tor_v, lam)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1 + math.cos(math.pi * min(step, total) / total))


# features --------------------------------------------------------------------

_FEATURE_CACHE: dict = {}
_DATASET_CACHE: dict = {}


def dataset_for(config: MoltConfig) -> Dataset:
    d = config.data
    key = (d.regime, d.seed, d.n, d.num_classes, d.noise, d.amplitude, d.margin, config.backbone.spec())
    if key not in _DATASET_CACHE:
        if len(_DATASET_CACHE) >= 8:
            _DATASET_CACHE.pop(next(iter(_DATASET_CACHE)))
        early = len(config.stage_plan.early)
        _DATASET_CACHE[key] = generate(d.regime, d.seed, d.n, d.num_classes, backbone=config.backbone.spec(),
                                       noise=d.noise, amplitude=d.amplitude, margin=d.margin,
                                       early_stage=early)
    return _DATASET_CACHE[key]


def dataset_features(model: MoltModel, dataset: Dataset) -> tuple[dict, dict]:
    """Tapped layer outputs for every example, computed once per dataset and stack."""
    out = []
    for m, x in (("audio", dataset.audio), ("visual", dataset.visual)):
        stack = model.stacks[m]
        key = (id(dataset), m, model.stack_key)
        cached = _FEATURE_CACHE.get(key)
        if cached is None or cached[0] is not dataset:
            cached = (dataset, model.stacks, {})
            if len(_FEATURE_CACHE) >= 8:
                _FEATURE_CACHE.pop(next(iter(_FEATURE_CACHE)))
            _FEATURE_CACHE[key] = cached
        store = cached[2]
        missing = [l for l in model.layers if l not in store]
        if missing:
            store.update(collect_array(stack, x, missing))
        out.append({l: store[l] for l in model.layers})
    return out[0], out[1]


def _subset(feats: dict, idx) -> dict:
    return {l: a[idx] for l, a in feats.items()}


# metrics ---------------------------------------------------------------------

@dataclass
class ParamReport:
    trainable_count: int
    frozen_count: int
    trainable_fraction: float
    per_module: dict[str, int]


@dataclass
class MemoryReport:
    activation_elements_adapted: int
    sequential_elements: int
    per_plan: dict[str, dict[str, int]] = field(default_factory=dict)


@dataclass
class MetricsRecord:
    run_id: str
    config: dict
    epochs: list[dict]
    train_accuracy: float
    val_accuracy: float
    test_accuracy: float
    mean_offdiag_cosine: dict[str, float]
    mean_alpha: dict[str, list[float]]
    mean_router_weights: dict[str, list[float]]
    params: dict
    memory: dict
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class Evaluation:
    accuracy: float
    predictions: np.ndarray
    alpha: dict[str, np.ndarray]
    router: dict[int, np.ndarray]
    tokens: dict[str, list[np.ndarray]]


def run_eval(model: MoltModel, dataset: Dataset, split: str, batch: int = 500, keep_tokens: bool = False) -> Evaluation:
    idx = dataset.split(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    fa, fv = dataset_features(model, dataset)
    preds, alphas, routers = [], {"audio": [], "visual": []}, {l: [] for l in model.layers}
    tokens = {"audio": [[] for _ in model.layers], "visual": [[] for _ in model.layers]}
    with T.no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s:s + batch]
            out = model.forward_features(_subset(fa, b), _subset(fv, b))
            preds.append(np.argmax(out.logits.data, axis=1))
            for m in alphas:
                alphas[m].append(out.alpha[m].data)
                if keep_tokens:
                    for i, t in enumerate(out.tokens[m]):
                        tokens[m][i].append(t.data)
            for l in routers:
                routers[l].append(out.router[l].data)
    pred = np.concatenate(preds)
    acc = float((pred == dataset.labels[idx]).mean())
    return Evaluation(acc, pred, {m: np.concatenate(v) for m, v in alphas.items()},
                      {l: np.concatenate(v) for l, v in routers.items()},
                      {m: [np.concatenate(v) for v in ts] for m, ts in tokens.items()} if keep_tokens else {})


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty split")
    return float((predictions == labels).mean())


def evaluate(model: MoltModel, dataset: Dataset, split: str = "test") -> float:
    """Fraction of correct argmax predictions (ties go to the lowest class index)."""
    return run_eval(model, dataset, split).accuracy


# training --------------------------------------------------------------------

def train(config: MoltConfig, dataset: Dataset | None = None, run_id: str = "run",
          stacks: dict[str, BackboneStack] | None = None) -> tuple[MoltModel, MetricsRecord]:
    dataset = dataset if dataset is not None else dataset_for(config)
    model = MoltModel(config, stacks)
    params = model.parameters()
    o = config.optim
    opt = Adam(params, o.lr, o.beta1, o.beta2, o.eps)
    fa, fv = dataset_features(model, dataset)
    train_idx = dataset.split("train")
    labels = dataset.labels
    shuffle = np.random.default_rng([config.seed, 77])
    n_batches = max(1, math.ceil(len(train_idx) / o.batch_size))
    total_steps = o.epochs * n_batches
    step = 0
    history = []
    for epoch in range(o.epochs):
        order = shuffle.permutation(train_idx)
        sums = {"total": 0.0, "task_loss": 0.0, "tor_audio": 0.0, "tor_visual": 0.0}
        correct = 0
        for bi in range(n_batches):
            b = order[bi * o.batch_size:(bi + 1) * o.batch_size]
            lr = cosine_lr(o.lr, step, total_steps) if o.schedule == "cosine" else o.lr
            try:
                out = model.forward_features(_subset(fa, b), _subset(fv, b))
                bundle = model.losses(out, labels[b])
                grads = T.backward(bundle.total, params)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at step {step} (lr={lr:g}): {exc}") from None
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"non-finite gradient at step {step} (lr={lr:g})")
            opt.step(grads, lr)
            step += 1
            for k, v in bundle.scalars().items():
                sums[k] += v * len(b)
            correct += int((np.argmax(out.logits.data, axis=1) == labels[b]).sum())
        n = len(train_idx)
        rec = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}, "train_accuracy": correct / n,
               "val_accuracy": evaluate(model, dataset, "val"), "lr": lr}
        history.append(rec)
        log.debug("epoch %d: %s", epoch + 1, rec)
    return model, summarize(model, dataset, history, run_id)


def summarize(model: MoltModel, dataset: Dataset, history: list[dict], run_id: str) -> MetricsRecord:
    config = model.config
    test = run_eval(model, dataset, "test", keep_tokens=True)
    extras = {}
    if dataset.regime == "layered-signal":
        from .synthdata import signal_layer_of

        idx = dataset.split("test")
        top = np.asarray(model.layers)[np.argmax(test.alpha["audio"], axis=1)]
        extras["signal_layer_top_alpha_rate"] = float((top == signal_layer_of(dataset)[idx]).mean())
    return MetricsRecord(
        run_id=run_id,
        config=config.to_dict(),
        epochs=history,
        train_accuracy=evaluate(model, dataset, "train"),
        val_accuracy=evaluate(model, dataset, "val"),
        test_accuracy=test.accuracy,
        mean_offdiag_cosine={m: mean_offdiag_abs_cosine(test.tokens[m]) for m in ("audio", "visual")},
        mean_alpha={m: test.alpha[m].mean(axis=0).tolist() for m in ("audio", "visual")},
        mean_router_weights={str(l): w.mean(axis=0).tolist() for l, w in test.router.items()},
        params=asdict(count_trainable(config)),
        memory=asdict(estimate_activation_memory(config)),
        extras=extras,
    )


def mean_token_cosines(model: MoltModel, dataset: Dataset, split: str = "test") -> dict[str, np.ndarray]:
    """Per-modality token cosine matrix averaged over a split (heatmap data)."""
    ev = run_eval(model, dataset, split, keep_tokens=True)
    return {m: token_cosines(ev.tokens[m]).mean(axis=0) for m in ("audio", "visual")}


# accounting ------------------------------------------------------------------

def count_trainable(config: MoltConfig) -> ParamReport:
    model = MoltModel(config)
    per: dict[str, int] = {}
    for p in model.parameters():
        key = p.name.split(".")[0] + ("." + p.name.split(".")[1] if p.name.startswith(("fdm", "fusion")) else "")
        per[key] = per.get(key, 0) + p.size
    trainable = sum(p.size for p in model.parameters())
    frozen = sum(p.size for p in model.frozen_parameters())
    return ParamReport(trainable, frozen, trainable / (trainable + frozen), per)


def _td_acts(nz, nf, d, h):
    return 2 * nz * d + 2 * nf * d + 2 * h * nz * nf


def adapter_layer_acts(config: MoltConfig) -> int:
    """Activation elements one adapted layer keeps for the backward pass (per example)."""
    d, nf = config.backbone.width, config.backbone.n_tokens
    f = config.fdm
    nz, h = f.n_tokens, f.heads
    residual = 2 * d + nz * d
    uda = _td_acts(nz, nf, d, h) + residual + nz * d
    ca = 4 * nz * d + 2 * nz * nz
    cda = 2 * (_td_acts(nz, nf, d, h) + ca + residual + nz * d)
    n_exp = f.n_uda + f.n_cda
    router = 2 * nf * d + 3 * d + 2 * n_exp
    mixing = 2 * n_exp * nz * d
    taps = 2 * nf * d
    return taps + 2 * f.n_uda * uda + f.n_cda * cda + router + mixing


def fusion_head_acts(config: MoltConfig, n_layers: int) -> int:
    d, nz = config.backbone.width, config.fdm.n_tokens
    per_modality = n_layers * (3 * d + 1) + n_layers + n_layers * nz * d + nz * d + d
    return 2 * per_modality + 2 * d + config.data.num_classes


def backbone_layer_acts(config: MoltConfig) -> int:
    b = config.backbone
    n, d, h = b.n_tokens, b.width, b.heads
    hidden = 4 * d
    return 8 * n * d + 2 * h * n * n + 2 * n * hidden


def activation_counts(config: MoltConfig, adapted: list[int]) -> tuple[int, int]:
    """(parallel, sequential) activation elements for a given adapted layer set."""
    if not adapted:
        return 0, 0
    adapters = len(adapted) * adapter_layer_acts(config) + fusion_head_acts(config, len(adapted))
    downstream = config.backbone.depth - min(adapted) + 1
    return adapters, adapters + 2 * downstream * backbone_layer_acts(config)


def stage_combinations() -> list[tuple[str, ...]]:
    return [c for r in (3, 2, 1) for c in combinations(STAGES, r)]


def estimate_activation_memory(config: MoltConfig) -> MemoryReport:
    """Analytic count of activations retained for backward, per example.

    The parallel figure covers the tapped features and everything inside
    the adapters, router, fusion and head.  The sequential figure models
    the same adapters inserted into the backbone path, which additionally
    keeps every backbone layer from the first adapted one upward.
    """
    par, seq = activation_counts(config, config.adapted_layers)
    plan = config.plan
    per_plan = {}
    for combo in stage_combinations():
        layers = plan.layers_for(combo)
        p, s = activation_counts(config, layers)
        per_plan["+".join(combo)] = {"parallel": p, "sequential": s, "n_layers": len(layers)}
    return MemoryReport(par, seq, per_plan)


# gradient verification -------------------------------------------------------

def tiny_config(**overrides) -> MoltConfig:
    base = MoltConfig.from_dict({
        "backbone": {"depth": 4, "width": 4, "heads": 2, "n_tokens": 4, "seed": 3},
        "stage_plan": {"early": [1, 2], "mid": [3], "late": [4], "adapted": ["mid", "late"]},
        "fdm": {"n_uda": 1, "n_cda": 1, "n_tokens": 2, "heads": 2},
        "fusion": "mlp",
        "lambda_tor": 0.1,
        "data": {"regime": "audio-only", "num_classes": 3, "n": 12},
    })
    return base.replace(**overrides) if overrides else base


def run_grad_suite(config: MoltConfig | None = None, batch: int = 3, eps: float = 1e-5,
                   perturb: float = 0.5) -> T.RelErrorReport:
    """Finite-difference check of the full loss against every trainable parameter.

    Parameters are first moved to a random point so zero-initialised output
    layers do not hide gradient paths.
    """
    config = config or tiny_config()
    if config.backbone.width > 8 or config.fdm.n_tokens > 2:
        raise ValueError("run_grad_suite is meant for tiny shapes (width <= 8, n_tokens <= 2)")
    model = MoltModel(config)
    rng = np.random.default_rng([config.seed, 555])
    for p in model.parameters():
        p.data += rng.normal(0, perturb, p.shape)
    b = config.backbone
    audio = rng.normal(size=(batch, b.n_tokens, b.width))
    visual = rng.normal(size=(batch, b.n_tokens, b.width))
    labels = rng.integers(0, config.data.num_classes, size=batch)
    fa = {l: f.data for l, f in zip(range(1, b.depth + 1), forward_collect(model.stacks["audio"], audio))}
    fv = {l: f.data for l, f in zip(range(1, b.depth + 1), forward_collect(model.stacks["visual"], visual))}

    def loss_fn():
        out = model.forward_features(fa, fv)
        return model.losses(out, labels).total

    return T.grad_check(loss_fn, model.parameters(), eps=eps)
