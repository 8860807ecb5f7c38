"""Discriminative few-shot baselines that absorb spurious correlations.

Both variants operate directly in pixel space: nearest class prototype and a
softmax linear classifier.  On tasks where the training environments are
perfectly correlated with labels, these models latch onto the visually
dominant environment and collapse on anti-correlated test splits, which is
the failure the time-step classifier is built to avoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .worldgen import FewShotTask


class BaselineDivergenceError(RuntimeError):
    """Linear baseline training produced a non-finite loss or failed to fit."""


@dataclass
class PrototypeModel:
    """Fitted baseline: class prototypes, or linear weights with bias column."""

    mode: str
    classes: tuple[int, ...]
    prototypes: np.ndarray | None = None  # (K, D)
    linear_weights: np.ndarray | None = None  # (K, D + 1)


@dataclass(frozen=True)
class LinearOpt:
    lr: float = 0.5
    momentum: float = 0.9
    iters: int = 5000
    target_train_acc: float = 0.99


def fit_baseline(task: FewShotTask, mode: str, opt: LinearOpt | None = None, seed=0) -> PrototypeModel:
    """Fit prototypes (class means) or a softmax linear classifier.

    Linear mode runs its full gradient budget (the late iterations sharpen
    the margin) and must end with train accuracy of at least
    ``opt.target_train_acc``.
    """
    if mode not in ("prototype", "linear"):
        raise ValueError(f"mode must be 'prototype' or 'linear', got {mode!r}")
    if not task.train:
        raise ValueError("task has an empty train split")
    images = np.stack([img.ravel() for img, _ in task.train]).astype(np.float64)
    labels = np.asarray([label for _, label in task.train])
    classes = tuple(sorted(np.unique(labels)))

    if mode == "prototype":
        protos = np.stack([images[labels == c].mean(axis=0) for c in classes])
        return PrototypeModel(mode=mode, classes=classes, prototypes=protos)

    opt = opt or LinearOpt()
    x = np.hstack([images, np.ones((len(images), 1))])
    y_idx = np.searchsorted(classes, labels)
    onehot = np.zeros((len(labels), len(classes)))
    onehot[np.arange(len(labels)), y_idx] = 1.0
    w = np.zeros((len(classes), x.shape[1]))
    vel = np.zeros_like(w)
    for i in range(opt.iters):
        logits = x @ w.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot).T @ x / len(labels)
        if not np.all(np.isfinite(grad)):
            raise BaselineDivergenceError(f"linear baseline diverged at step {i}")
        vel = opt.momentum * vel - opt.lr * grad
        w += vel
    train_acc = float(((x @ w.T).argmax(axis=1) == y_idx).mean())
    if train_acc < opt.target_train_acc:
        raise BaselineDivergenceError(
            f"linear baseline reached train accuracy {train_acc:.3f} < {opt.target_train_acc}"
        )
    return PrototypeModel(mode=mode, classes=classes, linear_weights=w)


def classify_baseline(model: PrototypeModel, x: np.ndarray) -> int:
    """Nearest prototype or linear argmax; ties resolve to the smallest class."""
    flat = np.asarray(x, dtype=np.float64).ravel()
    if model.mode == "prototype":
        d2 = ((model.prototypes - flat) ** 2).sum(axis=1)
        return int(model.classes[int(np.argmin(d2))])
    scores = model.linear_weights @ np.append(flat, 1.0)
    return int(model.classes[int(np.argmax(scores))])
