"""Density-ratio estimation with a tabular logistic classifier.

The classifier holds one logit per cell and is trained on the exact
expected logistic loss

    0.5 * E_p[softplus(-logit)] + 0.5 * E_q[softplus(logit)],

whose minimizer is logit = log(p / q) on every cell where both masses are
positive. Cells where ``min(p, q) <= mask_threshold`` are excluded from the
fit; their logit is left at 0 and they are flagged in ``mask``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence, ValidationError

MASK_THRESHOLD = 1e-9


@dataclass(frozen=True)
class RatioFitConfig:
    step: float = 1.0
    tolerance: float = 1e-10
    max_iters: int = 100_000
    mask_threshold: float = MASK_THRESHOLD


@dataclass(frozen=True, eq=False)
class TabularLogitClassifier:
    logits: np.ndarray
    mask: np.ndarray
    labels: tuple
    iterations: int
    grad_norm: float
    losses: tuple = ()

    def to_record(self):
        """Cell label -> logit for every fitted cell."""
        return {str(lab): float(v) for lab, v, m in zip(self.labels, self.logits.ravel(), self.mask.ravel()) if m}


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-softplus(-x))


def logistic_loss(logits, p, q):
    return 0.5 * float(np.sum(p * softplus(-logits)) + np.sum(q * softplus(logits)))


def _softplus_diff(a, b):
    """softplus(a) - softplus(b) without cancellation when a is close to b."""
    return np.log1p(sigmoid(b) * np.expm1(a - b))


def logistic_loss_change(new, old, p, q):
    """loss(new) - loss(old), accurate even when the change is below the loss's ulp."""
    return 0.5 * float(np.sum(p * _softplus_diff(-new, -old)) + np.sum(q * _softplus_diff(new, old)))


def logistic_grad(logits, p, q):
    return 0.5 * (q * sigmoid(logits) - p * sigmoid(-logits))


def _cells(dist):
    probs = np.asarray(dist.probs, dtype=np.float64)
    if probs.ndim == 2:
        labels = tuple((r, c) for r in dist.row_space.labels for c in dist.col_space.labels)
    else:
        labels = tuple(dist.space.labels)
    return probs, labels


def fit_ratio_classifier(dist_p, dist_q, config=None):
    """Fit per-cell logits separating samples of ``dist_p`` from ``dist_q``.

    Full-batch gradient descent; a step that raises the loss is halved and
    retried, and an accepted step keeps its size for the next iteration.
    Step acceptance uses the cancellation-free loss change, so the recorded
    loss sequence (initial loss plus accepted changes) is non-increasing.
    Raises NonConvergence (carrying the partial classifier) at the cap.
    """
    config = config or RatioFitConfig()
    p, labels = _cells(dist_p)
    q, _ = _cells(dist_q)
    if p.shape != q.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {q.shape}")
    mask = np.minimum(p, q) > config.mask_threshold
    pm, qm = p[mask], q[mask]
    theta = np.zeros(pm.shape)
    loss = logistic_loss(theta, pm, qm)
    losses = [loss]
    step = config.step
    grad = logistic_grad(theta, pm, qm)
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    it = 0
    while gnorm >= config.tolerance:
        if it >= config.max_iters:
            clf = _finish(theta, mask, labels, it, gnorm, losses)
            raise NonConvergence(config.max_iters, gnorm, result=clf)
        while True:
            trial = theta - step * grad
            delta = logistic_loss_change(trial, theta, pm, qm)
            if delta <= 0.0:
                break
            step *= 0.5
            if step < 1e-300:
                trial, delta = theta, 0.0
                break
        theta, loss = trial, loss + delta
        losses.append(loss)
        grad = logistic_grad(theta, pm, qm)
        gnorm = float(np.max(np.abs(grad)))
        it += 1
    return _finish(theta, mask, labels, it, gnorm, losses)


def _finish(theta, mask, labels, it, gnorm, losses):
    logits = np.zeros(mask.shape)
    logits[mask] = theta
    logits.setflags(write=False)
    return TabularLogitClassifier(logits, mask, labels, it, gnorm, tuple(losses))


def estimated_mutual_information(classifier, dist_p):
    """sum_i p_i * logit_i over the fitted cells of a joint-vs-product classifier."""
    p = np.asarray(dist_p.probs, dtype=np.float64)
    m = classifier.mask
    return float(np.sum(p[m] * classifier.logits[m]))


def exact_log_ratio(dist_p, dist_q):
    """log(p / q) per cell, NaN where either mass is zero."""
    p, _ = _cells(dist_p)
    q, _ = _cells(dist_q)
    out = np.full(p.shape, np.nan)
    ok = (p > 0) & (q > 0)
    out[ok] = np.log(p[ok]) - np.log(q[ok])
    return out
