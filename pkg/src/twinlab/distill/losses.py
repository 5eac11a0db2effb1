"""Cross-entropy and representational-similarity losses with gradients."""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax

_EPS = 1e-12
KERNELS = ("centered", "cosine", "pearson")
LOSS_MODES = ("additive", "literal", "rescaled")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(logits, axis=1)
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def _prep(a, kernel):
    a = a.reshape(a.shape[0], -1)
    if kernel == "centered":
        return a - a.mean(axis=0, keepdims=True)
    if kernel == "pearson":
        return a - a.mean(axis=1, keepdims=True)
    if kernel == "cosine":
        return a
    raise ValueError(f"unknown RSA kernel {kernel!r}; choose from {KERNELS}")


def similarity(a, kernel="centered"):
    """Cosine similarity matrix between the rows of a (batch, ...) activation."""
    c = _prep(a, kernel)
    nrm = np.sqrt((c**2).sum(axis=1, keepdims=True) + _EPS)
    u = c / nrm
    return u @ u.T


def rsa_loss(student, teacher, kernel="centered"):
    """Mean squared difference of off-diagonal similarity entries, per tap averaged.

    ``student`` and ``teacher`` are lists of activations with matching batch
    size. Returns the loss and the gradient w.r.t. each student activation.
    """
    if len(student) != len(teacher):
        raise ValueError("student and teacher must expose the same number of taps")
    n_taps = len(student)
    total = 0.0
    grads = []
    for a, t in zip(student, teacher):
        B = a.shape[0]
        if B < 2:
            raise ValueError("RSA needs a batch of at least 2")
        c = _prep(a, kernel)
        nrm = np.sqrt((c**2).sum(axis=1, keepdims=True) + _EPS)
        u = c / nrm
        gs = u @ u.T
        gt = similarity(t, kernel)
        diff = gs - gt
        np.fill_diagonal(diff, 0.0)
        n_pairs = B * (B - 1)
        total += float((diff**2).sum()) / n_pairs
        dG = 2.0 * diff / n_pairs
        du = 2.0 * dG @ u
        dc = (du - u * (u * du).sum(axis=1, keepdims=True)) / nrm
        if kernel == "centered":
            dc = dc - dc.mean(axis=0, keepdims=True)
        elif kernel == "pearson":
            dc = dc - dc.mean(axis=1, keepdims=True)
        grads.append(dc.reshape(a.shape) / n_taps)
    return total / n_taps, grads


def loss_weights(beta, mode="additive"):
    """Weights (w_ce, w_rsa) for the total loss ``w_ce * CE + w_rsa * RSA``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if mode == "additive":
        return 1.0, beta
    if mode == "literal":
        return 1.0 - beta, beta
    if mode == "rescaled":
        return 1.0 / (1.0 + beta), beta / (1.0 + beta)
    raise ValueError(f"unknown loss mode {mode!r}; choose from {LOSS_MODES}")
