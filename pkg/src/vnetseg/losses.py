"""Dice overlap objective with its closed-form gradient, and the re-weighted
logistic baseline.

The Dice coefficient over N voxels of a prediction p and binary truth g is

    D = (2 * sum(p_i * g_i) + eps) / (sum(p_i^2) + sum(g_i^2) + eps)

with a small eps in numerator and denominator so the empty/empty case is
well-defined (D -> 1) and gradients stay finite. ``dice_backward`` is the
exact derivative of this smoothed form, so it agrees with finite differences
of ``dice_forward`` to tight tolerances. Training minimizes 1 - D; no class
weights enter anywhere in the Dice path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor5
from .validation import check_binary, check_probabilities

DICE_EPS = 1e-6

# probabilities are clamped here before log() so a saturated softmax cannot
# produce an infinite logistic loss
PROB_CLAMP = 1e-12


@dataclass
class DiceLossResult:
    dice: float          # D in [0, 1]
    loss: float          # 1 - D
    grad: np.ndarray     # dD/dp per voxel; negate for descent on the loss


@dataclass
class ClassWeights:
    """Per-class weights for the logistic baseline."""

    w_background: float
    w_foreground: float

    def __post_init__(self):
        if self.w_background < 0 or self.w_foreground < 0:
            raise ValueError("class weights must be non-negative")
        if self.w_background == 0 and self.w_foreground == 0:
            raise ValueError("class weights must not both be zero")

    @classmethod
    def inverse_frequency(cls, g: np.ndarray) -> "ClassWeights":
        """Balanced weighting: w_c = N / (2 * count_c), computed on ``g``."""
        g = np.asarray(g)
        n = g.size
        fg = int(g.sum())
        bg = n - fg
        return cls(n / (2.0 * max(bg, 1)), n / (2.0 * max(fg, 1)))


def _prep(p, g):
    p = np.asarray(p, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: p has {p.size} voxels, g has {g.size}")
    check_probabilities(p, "p")
    check_binary(g, "g")
    return p, g


def dice_forward(p, g) -> DiceLossResult:
    """Smoothed Dice coefficient of soft probabilities p against binary g."""
    p, g = _prep(p, g)
    num = 2.0 * float(p @ g) + DICE_EPS
    den = float(p @ p) + float(g @ g) + DICE_EPS
    d = num / den
    return DiceLossResult(dice=d, loss=1.0 - d, grad=_dice_grad(p, g, num, den))


def dice_backward(p, g) -> np.ndarray:
    """dD/dp_j for the smoothed Dice; same eps as the forward."""
    p, g = _prep(p, g)
    num = 2.0 * float(p @ g) + DICE_EPS
    den = float(p @ p) + float(g @ g) + DICE_EPS
    return _dice_grad(p, g, num, den)


def _dice_grad(p, g, num, den):
    return 2.0 * (g * den - p * num) / (den * den)


def weighted_logistic(p: np.ndarray, g: np.ndarray, w: ClassWeights):
    """Re-weighted multinomial logistic loss on a (2, N) probability field.

    Returns (loss, gradient w.r.t. the pre-softmax logits), the usual fused
    softmax-cross-entropy composition:

        loss = -(1/N) * sum_i w[g_i] * log p[g_i, i]
        dloss/dz[c, i] = (1/N) * w[g_i] * (p[c, i] - [c == g_i])
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != 2:
        raise ValueError(f"p must be (2, N), got {p.shape}")
    g = np.asarray(g).ravel()
    if g.size != p.shape[1]:
        raise ValueError(f"length mismatch: p has {p.shape[1]} voxels, g has {g.size}")
    check_binary(g, "g")
    check_probabilities(p, "p")

    n = g.size
    gi = g.astype(np.intp)
    w_vox = np.where(gi == 1, w.w_foreground, w.w_background)
    p_true = np.clip(p[gi, np.arange(n)], PROB_CLAMP, None)
    loss = -float(np.sum(w_vox * np.log(p_true))) / n

    onehot = np.zeros_like(p)
    onehot[gi, np.arange(n)] = 1.0
    grad = w_vox[np.newaxis, :] * (p - onehot) / n
    return loss, grad


# ---------------------------------------------------------------------------
# tape adapters: scalar loss nodes over a (B, 2, D, H, W) network output


def dice_loss_op(probs: Tensor5, labels: np.ndarray, tape: Tape) -> Tensor5:
    """Mean-per-volume Dice loss on the foreground channel of ``probs``.

    ``labels`` is a (B, D, H, W) binary array. The recorded backward rule
    injects -(1/B) dD/dp into the foreground channel gradient.
    """
    b = probs.shape[0]
    if labels.shape != (b,) + tuple(probs.shape[2:]):
        raise ValueError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    results = [
        dice_forward(probs.values[i, 1], labels[i]) for i in range(b)
    ]
    loss = float(np.mean([r.loss for r in results]))
    out = Tensor5(np.full((1, 1, 1, 1, 1), loss))

    def _bwd(probs=probs, results=results, out=out, b=b):
        if out.grad is None:
            return
        upstream = out.grad.ravel()[0]
        g = np.zeros_like(probs.values)
        for i, r in enumerate(results):
            g[i, 1] = -r.grad.reshape(probs.values.shape[2:]) / b
        if probs.grad is None:
            probs.grad = np.zeros_like(probs.values)
        probs.grad += upstream * g

    tape._record(out, _bwd)
    return out


def weighted_logistic_op(
    logits: Tensor5,
    labels: np.ndarray,
    weights: ClassWeights | None,
    tape: Tape,
) -> Tensor5:
    """Mean-per-volume re-weighted logistic loss, differentiated straight to
    the logits. ``weights=None`` uses inverse class frequency over the
    minibatch."""
    b = logits.shape[0]
    if labels.shape != (b,) + tuple(logits.shape[2:]):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if weights is None:
        weights = ClassWeights.inverse_frequency(labels)

    z = logits.values - logits.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)

    losses = []
    grads = np.zeros_like(logits.values)
    for i in range(b):
        p2 = probs[i].reshape(2, -1)
        li, gi = weighted_logistic(p2, labels[i].ravel(), weights)
        losses.append(li)
        grads[i] = gi.reshape(logits.values.shape[1:]) / b
    out = Tensor5(np.full((1, 1, 1, 1, 1), float(np.mean(losses))))

    def _bwd(logits=logits, grads=grads, out=out):
        if out.grad is None:
            return
        if logits.grad is None:
            logits.grad = np.zeros_like(logits.values)
        logits.grad += out.grad.ravel()[0] * grads

    tape._record(out, _bwd)
    return out
