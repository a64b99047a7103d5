"""Token orthogonality regularisation and the combined training objective."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_EPS = 1e-12


def _concat_tokens(z: Sequence[Tensor]) -> Tensor:
    if not z:
        raise ValueError("tor_loss needs at least one layer of tokens")
    return z[0] if len(z) == 1 else T.concat(list(z), axis=-2)


def tor_loss(z: Sequence[Tensor]) -> Tensor:
    """Squared Frobenius distance between the token cosine matrix and the identity.

    ``z`` is the list of per-layer token sets of one modality, each
    ``(..., N_z, D)``; tokens are concatenated and compared pairwise.
    Batched input returns the batch mean.  The diagonal is treated as exactly
    1, so zero-norm tokens (which are warned about) contribute cosine 0
    against everything else.
    """
    zz = _concat_tokens(z)
    n = zz.shape[-2]
    gram = zz @ zz.mT
    eye = np.eye(n)
    sq = T.total(gram * Tensor(np.broadcast_to(eye, gram.shape).copy()), axis=-1)
    # cos_ij = g_ij / sqrt(g_ii g_jj): identical tokens give exactly 1
    outer = T.expand(sq, sq.ndim, n) * T.expand(sq, sq.ndim - 1, n)
    live = outer.data > NORM_EPS**2
    dead = int((sq.data <= NORM_EPS**2).sum())
    if dead:
        warnings.warn(f"tor_loss: {dead} zero-norm token(s) counted with cosine 0", RuntimeWarning)
    safe = outer * Tensor(live.astype(float)) + Tensor(np.where(live, 0.0, NORM_EPS**2))
    cos = gram / T.sqrt(safe)
    off = Tensor(np.broadcast_to(1.0 - eye, cos.shape).copy())
    per = T.total(T.square(cos * off), axis=(-2, -1))
    return T.mean(per) if per.ndim else per


def token_cosines(z: Sequence[np.ndarray]) -> np.ndarray:
    """Cosine matrix of concatenated tokens, plain numpy; batched input gives one matrix per example."""
    zz = np.concatenate([np.asarray(t) for t in z], axis=-2)
    unit = zz / np.maximum(np.linalg.norm(zz, axis=-1, keepdims=True), NORM_EPS)
    return unit @ np.swapaxes(unit, -1, -2)


def mean_offdiag_abs_cosine(z: Sequence[np.ndarray]) -> float:
    c = token_cosines(z)
    n = c.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    return float(np.abs(c[..., mask]).mean()) if n > 1 else 0.0


def task_loss(logits: Tensor, label) -> Tensor:
    """Softmax cross-entropy; ``logits`` may be one row or a batch."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    return T.cross_entropy(logits, np.atleast_1d(label))


@dataclass
class LossBundle:
    task_loss: Tensor
    tor_loss_per_modality: dict[str, Tensor]
    lambda_tor: float
    total: Tensor = field(repr=False)

    def scalars(self) -> dict[str, float]:
        out = {"task_loss": self.task_loss.item(), "total": self.total.item()}
        out.update({f"tor_{m}": v.item() for m, v in self.tor_loss_per_modality.items()})
        return out


def total_loss(task: Tensor, tor_a: Tensor, tor_v: Tensor, lam: float) -> LossBundle:
    if lam < 0:
        raise ValueError(f"lambda_tor must be nonnegative, got {lam}")
    tot = task + T.mul(tor_a + tor_v, lam) if lam else task
    return LossBundle(task, {"audio": tor_a, "visual": tor_v}, lam, tot)


def write_cosine_csv(path, rows) -> None:
    """``rows``: iterable of (run_id, modality, cosine matrix)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "modality", "i", "j", "cosine"])
        for run_id, modality, mat in rows:
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    w.writerow([run_id, modality, i, j, repr(float(mat[i, j]))])
