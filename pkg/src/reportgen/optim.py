"""Adam with per-group learning rates, exponential epoch decay and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params``.

    A ``None`` gradient is treated as zero.
    """
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(state.first_moment) != len(params):
        raise ShapeError("adam_step: parameter, gradient and moment lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = state.learning_rate
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)


class Adam:
    """Adam over named parameter groups, each with its own base learning rate."""

    def __init__(self, groups: dict[str, list[Tensor]], lrs: dict[str, float],
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.base_lrs = dict(lrs)
        self.states = {
            name: AdamState(learning_rate=lrs[name], beta1=betas[0], beta2=betas[1], epsilon=eps)
            for name in groups
        }

    def set_epoch(self, epoch: int, decay: float) -> None:
        """Learning rate for epoch ``e`` (0-based) is ``lr0 * decay**e``."""
        for name, st in self.states.items():
            st.learning_rate = self.base_lrs[name] * decay ** epoch

    def lr(self, group: str) -> float:
        return self.states[group].learning_rate

    def step(self) -> None:
        for name, params in self.groups.items():
            adam_step([p.data for p in params], [p.grad for p in params], self.states[name])

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.grad = None


class EarlyStopping:
    """Stop once ``patience`` epochs have passed without a new best validation loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0
