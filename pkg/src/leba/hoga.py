"""Fitting the surrogate's outputs and input-gradients to query evidence.

Each buffered probe pairs a pre-image with a post-image one smoothed
coordinate stamp away, plus the victim's target-class probability at both.
The backward loss asks the surrogate's directional derivative along that
stamp to match the observed, gamma-scaled change in log-probability; the
forward loss matches the surrogate's probability to the victim's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from leba import nets
from leba import tensor as T
from leba.tensor import ContractError

# summed |log P' - log P| below this counts as no evidence for the gamma estimate
DENOM_FLOOR = 1e-12


@dataclass
class QueryTuple:
    x_post: np.ndarray
    x_pre: np.ndarray
    p_post: float
    p_pre: float
    label: int


@dataclass
class Buffer:
    capacity: int = 24
    entries: list[QueryTuple] = field(default_factory=list)

    def add(self, item: QueryTuple) -> None:
        if len(self.entries) >= self.capacity:
            raise ContractError(f"buffer already holds {self.capacity} tuples")
        self.entries.append(item)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def clear(self) -> None:
        self.entries = []

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class HogaState:
    gamma: float = 3.0
    lam: float = 0.01
    lr: float = 1e-3
    use_backward_loss: bool = True
    use_forward_loss: bool = True
    adaptive_gamma: bool = True
    steps: int = 0


def forward_loss(s_t, p_t) -> float:
    s_t, p_t = np.asarray(s_t, dtype=np.float64), np.asarray(p_t, dtype=np.float64)
    if s_t.shape != p_t.shape:
        raise ContractError(f"forward_loss: shapes {s_t.shape} and {p_t.shape} do not conform")
    if s_t.size == 0:
        raise ContractError("forward_loss: empty batch")
    return float(np.mean((s_t - p_t) ** 2))


def backward_loss(g_dot_delta, logp_post, logp_pre, gamma: float) -> float:
    g = np.asarray(g_dot_delta, dtype=np.float64)
    target = gamma * (np.asarray(logp_post, dtype=np.float64) - np.asarray(logp_pre, dtype=np.float64))
    if g.shape != target.shape:
        raise ContractError(f"backward_loss: shapes {g.shape} and {target.shape} do not conform")
    return float(np.mean((g - target) ** 2))


def estimate_gamma(g_dot_delta, logp_post, logp_pre):
    """Sum |g.delta| / sum |delta log P|, or None when the denominator vanishes."""
    denom = float(np.abs(np.asarray(logp_post) - np.asarray(logp_pre)).sum())
    if denom < DENOM_FLOOR:
        return None
    return float(np.abs(np.asarray(g_dot_delta)).sum()) / denom


def update_gamma(gamma: float, g_dot_delta, logp_post, logp_pre) -> float:
    est = estimate_gamma(g_dot_delta, logp_post, logp_pre)
    if est is None:
        return gamma
    return 0.9 * gamma + 0.1 * est


def _log(p) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), 1e-300))


def hoga_losses(surrogate: nets.Model, entries: list[QueryTuple], gamma: float, params=None):
    """Build the loss graph for a batch of tuples.

    Returns (l_B node, l_F node, g.delta values, (log P', log P)). Gradients of each tuple are
    taken against that tuple's own pre-image; the batch shares no layer that
    mixes samples, so one batched graph gives the same per-sample gradients.
    """
    if not entries:
        raise ContractError("hoga: empty batch")
    if params is None:
        params = nets.param_nodes(surrogate)
    x_pre = np.stack([e.x_pre for e in entries])
    delta = np.stack([e.x_post for e in entries]) - x_pre
    labels = np.array([e.label for e in entries])
    p_pre = np.array([e.p_pre for e in entries])
    p_post = np.array([e.p_post for e in entries])
    n = len(entries)

    x = T.variable(x_pre)
    log_s = nets.class_log_prob(surrogate, x, labels, params)
    l_f = T.mse(T.exp(log_s), T.constant(p_pre))
    g_s = T.grad_as_node(T.sum(log_s), x)
    g_dot = T.reshape(T.sum_to(T.mul(g_s, T.constant(delta)), (n,) + (1,) * (x_pre.ndim - 1)), (n,))
    target = gamma * (_log(p_post) - _log(p_pre))
    l_b = T.mse(g_dot, T.constant(target))
    return l_b, l_f, g_dot.value.copy(), (_log(p_post), _log(p_pre))


def step(surrogate: nets.Model, buffer: Buffer | list[QueryTuple], state: HogaState):
    """One HOGA update: losses, high-order backprop, gamma update, SGD step.

    Mutates and returns ``surrogate`` and ``state``.
    """
    entries = buffer.entries if isinstance(buffer, Buffer) else list(buffer)
    params = nets.param_nodes(surrogate)
    l_b, l_f, g_dot, (lp_post, lp_pre) = hoga_losses(surrogate, entries, state.gamma, params)
    loss = None
    if state.use_backward_loss:
        loss = l_b
    if state.use_forward_loss and state.lam > 0:
        lf = T.mul_scalar(l_f, state.lam)
        loss = lf if loss is None else T.add(loss, lf)
    names = list(params)
    grads = T.backward(loss, [params[k] for k in names]) if loss is not None else []
    if state.adaptive_gamma:
        state.gamma = update_gamma(state.gamma, g_dot, lp_post, lp_pre)
    if state.lr != 0:
        for k, g in zip(names, grads):
            surrogate.params[k] = surrogate.params[k] - state.lr * g
    state.steps += 1
    return surrogate, state
