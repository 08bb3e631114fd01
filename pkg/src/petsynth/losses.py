"""Synthesis losses and their gradients.

The reconstruction distance is an intensity-weighted L2: each voxel's squared
error is weighted by the (normalized) target SUV, so hot regions dominate.
``split_suv_loss`` computes that distance separately over the low-uptake and
high-uptake voxel populations and sums the two, which stops the sparse hot
voxels from being averaged away.  The adversarial terms follow the standard
two-player objective with a non-saturating generator loss.

Gradients are with respect to the prediction (or the discriminator's output
probabilities) and feed the network backward pass directly.
"""

from __future__ import annotations

import numpy as np

# normalized equivalent of the 2.5 SUV malignancy cut under a [0, 20] window
SPLIT_THRESHOLD_NORM = 0.125

# dense head class order is (fake, real)
FAKE_CLASS = 0
REAL_CLASS = 1

PROB_EPS = 1e-7


def _check_shapes(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")


def weighted_l2_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """(1/n) sum of target * (pred - target)^2 over all voxels.

    An all-zero target yields 0 for any prediction; that degenerate case is
    why training uses the split variant.
    """
    _check_shapes(pred, target)
    diff = pred - target
    return float(np.mean(target * diff * diff))


def weighted_l2_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_shapes(pred, target)
    return (2.0 / pred.size) * target * (pred - target)


def split_suv_loss(pred: np.ndarray, target: np.ndarray,
                   threshold: float = SPLIT_THRESHOLD_NORM) -> float:
    """Weighted L2 over the low-uptake set plus weighted L2 over the high set.

    The split is on the target: high means target > threshold (strict).  Each
    term normalizes by its own subset size; an empty subset contributes 0.
    """
    _check_shapes(pred, target)
    high = target > threshold
    diff = pred - target
    werr = target * diff * diff
    total = 0.0
    for mask in (~high, high):
        n = int(mask.sum())
        if n:
            total += float(werr[mask].sum()) / n
    return total


def split_suv_grad(pred: np.ndarray, target: np.ndarray,
                   threshold: float = SPLIT_THRESHOLD_NORM) -> np.ndarray:
    _check_shapes(pred, target)
    high = target > threshold
    grad = np.zeros_like(pred)
    base = 2.0 * target * (pred - target)
    for mask in (~high, high):
        n = int(mask.sum())
        if n:
            grad[mask] = base[mask] / n
    return grad


def _real_prob(d_out: np.ndarray) -> np.ndarray:
    if d_out.ndim != 2 or d_out.shape[1] != 2:
        raise ValueError(f"discriminator output must be (n, 2), got {d_out.shape}")
    return np.clip(d_out[:, REAL_CLASS], PROB_EPS, 1.0 - PROB_EPS)


def adversarial_losses(d_real: np.ndarray, d_fake: np.ndarray) -> tuple[float, float]:
    """Discriminator loss and the non-saturating generator adversarial loss.

    loss_d   = -mean log d_real(real) - mean log(1 - d_fake(real))
    loss_g   = -mean log d_fake(real)

    Probabilities are clamped away from {0, 1} so both losses stay finite.
    """
    p_real = _real_prob(d_real)
    p_fake = _real_prob(d_fake)
    loss_d = float(-np.mean(np.log(p_real)) - np.mean(np.log(1.0 - p_fake)))
    loss_g = float(-np.mean(np.log(p_fake)))
    return loss_d, loss_g


def discriminator_grads(d_real: np.ndarray, d_fake: np.ndarray):
    """Gradients of loss_d with respect to the two probability batches.

    Rows where the probability hit the clamp get zero gradient.
    """
    p_real = _real_prob(d_real)
    p_fake = _real_prob(d_fake)
    n_r, n_f = d_real.shape[0], d_fake.shape[0]
    g_real = np.zeros_like(d_real)
    g_fake = np.zeros_like(d_fake)
    live_r = (d_real[:, REAL_CLASS] > PROB_EPS) & (d_real[:, REAL_CLASS] < 1 - PROB_EPS)
    live_f = (d_fake[:, REAL_CLASS] > PROB_EPS) & (d_fake[:, REAL_CLASS] < 1 - PROB_EPS)
    g_real[:, REAL_CLASS] = np.where(live_r, -1.0 / (n_r * p_real), 0.0)
    g_fake[:, REAL_CLASS] = np.where(live_f, 1.0 / (n_f * (1.0 - p_fake)), 0.0)
    return g_real, g_fake


def generator_adv_grad(d_fake: np.ndarray) -> np.ndarray:
    """Gradient of the non-saturating generator loss w.r.t. d_fake."""
    p_fake = _real_prob(d_fake)
    g = np.zeros_like(d_fake)
    live = (d_fake[:, REAL_CLASS] > PROB_EPS) & (d_fake[:, REAL_CLASS] < 1 - PROB_EPS)
    g[:, REAL_CLASS] = np.where(live, -1.0 / (d_fake.shape[0] * p_fake), 0.0)
    return g


def generator_objective(pred: np.ndarray, target: np.ndarray, d_fake: np.ndarray,
                        lam: float, threshold: float = SPLIT_THRESHOLD_NORM) -> float:
    """Adversarial term plus lam times the split reconstruction loss."""
    loss_g = float(-np.mean(np.log(_real_prob(d_fake))))
    return loss_g + lam * split_suv_loss(pred, target, threshold)


def generator_objective_grads(pred: np.ndarray, target: np.ndarray, d_fake: np.ndarray,
                              lam: float, threshold: float = SPLIT_THRESHOLD_NORM):
    """(d/dpred, d/dd_fake) of the generator objective."""
    return lam * split_suv_grad(pred, target, threshold), generator_adv_grad(d_fake)
