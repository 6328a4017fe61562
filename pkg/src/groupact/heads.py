"""Classification heads and the joint training loss.

The group head pools the group token sequence over time and applies a
linear map to group-activity logits.  The individual head pools each
individual's timeline the same way and maps to action logits.  The joint
loss is standard cross-entropy on the group prediction plus a weighted
cross-entropy on the individual predictions, averaged over individuals
and batch.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .layers import Linear
from .tensor import ContractError, Tensor

_POOL_MODES = ("mean", "last", "center")


def _pool_time(x, mode):
    """Pool [..., T, D] over T by mean, the last frame, or the center frame."""
    if mode == "mean":
        return tz.tensor_mean(x, axis=-2)
    t_len = x.shape[-2]
    idx = t_len - 1 if mode == "last" else t_len // 2
    axes = (x.ndim - 2,) + tuple(i for i in range(x.ndim) if i != x.ndim - 2)
    moved = tz.transpose(x, axes)           # [T, ..., D]
    row = tz.gather_rows(moved, np.array([idx]))
    return tz.reshape(row, x.shape[:-2] + (x.shape[-1],))


def _apply_linear(linear, x):
    """Apply a linear map, tolerating a bare vector input."""
    if x.ndim == 1:
        out = linear(tz.reshape(x, (1,) + x.shape))
        return tz.reshape(out, out.shape[1:])
    return linear(x)


class ClassifierHeads:
    """Map final representations to group and individual logits."""

    def __init__(self, rng, dim, group_classes, agent_classes,
                 group_pool="mean", agent_pool="mean", name="heads"):
        for mode in (group_pool, agent_pool):
            if mode not in _POOL_MODES:
                raise ContractError(f"unknown pool mode {mode!r}")
        self.group_pool = group_pool
        self.agent_pool = agent_pool
        self.group = Linear(rng, dim, group_classes, name=f"{name}.group")
        self.agent = Linear(rng, dim, agent_classes, name=f"{name}.agent")

    def group_logits(self, x_g):
        """Group logits from the group token sequence: [..., T, D] -> [..., G]."""
        return _apply_linear(self.group, _pool_time(x_g, self.group_pool))

    def individual_logits(self, x_i):
        """Action logits per individual: [..., T, N, D] -> [..., N, A]."""
        n = x_i.ndim
        axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
        by_agent = tz.transpose(x_i, axes)  # [..., N, T, D]
        return _apply_linear(self.agent, _pool_time(by_agent, self.agent_pool))

    def params(self):
        out = {}
        out.update(self.group.params())
        out.update(self.agent.params())
        return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood over every leading axis of ``logits``."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ContractError(
            f"labels {labels.shape} do not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(
            f"label out of range for {k} classes: min {labels.min()}, max {labels.max()}")
    ls = tz.log_softmax(logits, axis=-1)
    onehot = Tensor(np.eye(k)[labels], name="onehot")
    picked = tz.tensor_sum(ls * onehot, axis=-1)
    return tz.scale(tz.tensor_mean(picked), -1.0)


def combined_loss(group_logits, y_g, individual_logits, y_a, lam):
    """Group cross-entropy plus ``lam`` times the individual cross-entropy."""
    if lam < 0:
        raise ContractError(f"lam must be non-negative, got {lam}")
    loss = cross_entropy(group_logits, y_g)
    if lam != 0.0:
        loss = loss + tz.scale(cross_entropy(individual_logits, y_a), lam)
    return loss
