"""Classification losses (value + logit gradient in one pass)."""

import numpy as np

from splitmix.errors import ShapeError


def cross_entropy(logits, labels, present_classes=None):
    """Mean cross-entropy over a batch, optionally masked to present classes.

    With `present_classes` given, the softmax normalizes over those classes
    only; absent-class logits contribute nothing and receive zero gradient.
    Returns (loss, dlogits) where dlogits already includes the 1/N factor.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if present_classes is None:
        mask = np.ones(c, dtype=bool)
    else:
        mask = np.zeros(c, dtype=bool)
        mask[list(present_classes)] = True
        absent = ~mask[labels]
        if absent.any():
            bad = labels[absent][0]
            raise ValueError(f"label {bad} not in present classes {sorted(set(np.where(mask)[0]))}")
    masked = np.where(mask[None, :], logits, -np.inf)
    zmax = masked.max(axis=1, keepdims=True)
    expd = np.exp(masked - zmax)
    denom = expd.sum(axis=1, keepdims=True)
    log_probs = (masked - zmax) - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = expd / denom
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    dlogits[:, ~mask] = 0.0
    return loss, dlogits


def accuracy(logits, labels):
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())
