"""Epoch loop shared by both stages: Adam on L1, best-validation weights, patience stop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numcore import Adam, Node, backward
from .rng import XorShift64Star

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return min(self.rows, key=lambda r: r[2])[0]

    @property
    def best_val(self) -> float:
        return min(r[2] for r in self.rows)

    def to_text(self) -> str:
        lines = ["epoch,train_l1,val_l1"]
        lines += [f"{e},{t:.9g},{v:.9g}" for e, t, v in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainingLog":
        rows = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("epoch"):
                continue
            e, t, v = line.split(",")
            rows.append((int(e), float(t), float(v)))
        return cls(rows)


def fit(
    params: dict[str, Node],
    batch_loss: Callable[[Sequence], Node],
    train: Sequence,
    val: Sequence,
    *,
    lr: float,
    batch_size: int,
    patience: int,
    seed: int,
    max_epochs: int | None = None,
) -> TrainingLog:
    """Train ``params`` in place and leave them at the best-validation epoch.

    ``batch_loss(items)`` must return the mean loss over ``items``. Training
    stops once ``patience`` consecutive epochs bring no new best validation
    loss (so ``patience=0`` runs exactly one epoch), or at ``max_epochs``.
    """
    if not train or not val:
        raise TrainingError("training needs non-empty train and validation splits")
    rng = XorShift64Star(seed)
    opt = Adam(params, lr)
    history = TrainingLog()
    best = math.inf
    best_values = {k: p.value.copy() for k, p in params.items()}
    stale = 0
    epoch = 0
    while max_epochs is None or epoch < max_epochs:
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [train[i] for i in order[start : start + batch_size]]
            opt.zero_grad()
            loss = batch_loss(batch)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {start}"
                )
            backward(loss)
            opt.step()
            total += value * len(batch)
        train_l1 = total / len(train)
        val_l1 = evaluate_loss(batch_loss, val, batch_size)
        history.rows.append((epoch, train_l1, val_l1))
        log.debug("epoch %d train %.6g val %.6g", epoch, train_l1, val_l1)
        if val_l1 < best:
            best = val_l1
            best_values = {k: p.value.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
        epoch += 1
        if stale >= patience:
            break
    for k, p in params.items():
        p.value = best_values[k]
        p.zero_grad()
    return history


def evaluate_loss(batch_loss, items: Sequence, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        total += float(batch_loss(chunk).value) * len(chunk)
    return total / len(items)


def uniform_fan_in(rng: XorShift64Star, shape: tuple[int, ...], gain: float = math.sqrt(2.0)) -> np.ndarray:
    """``U(-b, b)`` with ``b = gain * sqrt(3 / fan_in)``; the default gain suits ReLU layers."""
    fan_in = int(np.prod(shape[1:]))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform_array(shape, -bound, bound).astype(np.float32)
