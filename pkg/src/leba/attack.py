"""Score-based greedy attacks guided by a surrogate: SimBA, SimBA+, SimBA++ and LeBA.

All loops minimise the margin loss J = log p_y - max_{j != y} log p_j and
accept a probe only when it strictly lowers J. The attack succeeds when
J < 0. Every victim evaluation goes through the oracle and costs one query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from leba import hoga, nets
from leba import tensor as T
from leba.tensor import ContractError

PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    zeta: float = 2.0
    n_q: Optional[int] = 20  # None: never run the transfer step
    n_t: int = 10
    mu: float = 0.9
    epsilon_t: Optional[float] = None  # None: zeta / n_t
    kernel_size: int = 5
    kernel_sigma: float = 1.5
    buffer_size: int = 24
    lam: float = 0.01
    gamma0: float = 3.0
    max_queries: int = 2000
    mode: str = "train"
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.epsilon > 0, "epsilon > 0"),
            (self.zeta > 0, "zeta > 0"),
            (self.n_q is None or self.n_q >= 1, "n_q >= 1"),
            (self.n_t >= 1, "n_t >= 1"),
            (0 <= self.mu < 1, "0 <= mu < 1"),
            (self.buffer_size >= 1, "buffer_size >= 1"),
            (self.lam >= 0, "lam >= 0"),
            (self.gamma0 > 0, "gamma0 > 0"),
            (self.max_queries >= 1, "max_queries >= 1"),
            (self.mode in ("train", "test"), "mode in {train, test}"),
            (self.kernel_size % 2 == 1, "odd kernel_size"),
        ]
        for ok, what in checks:
            if not ok:
                raise ContractError(f"AttackConfig requires {what}")

    @property
    def step_t(self) -> float:
        return self.zeta / self.n_t if self.epsilon_t is None else self.epsilon_t

    @property
    def kernel(self) -> np.ndarray:
        return T.gaussian_kernel(self.kernel_size, self.kernel_sigma)

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


@dataclass
class AttackResult:
    success: bool
    queries: int
    x_adv: np.ndarray
    l2_dist: float
    trace: list[tuple[int, float]] = field(default_factory=list)  # every query: (index, J')
    accepted: list[tuple[int, float]] = field(default_factory=list)  # accepted states: (index, J)
    hoga_steps: int = 0


# ---------------------------------------------------------------- building blocks


def attack_loss(probs: np.ndarray, y: int) -> float:
    """log p_y minus the largest other log-probability; negative means misclassified."""
    logp = np.log(np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR))
    other = np.delete(logp, y)
    return float(logp[y] - other.max())


def project_l2(x_adv: np.ndarray, x: np.ndarray, zeta: float) -> np.ndarray:
    """Scale the perturbation back onto the l2 ball of radius zeta when it leaves it."""
    if zeta <= 0:
        raise ContractError(f"zeta must be positive, got {zeta}")
    if x_adv.shape != x.shape:
        raise ContractError(f"shapes {x_adv.shape} and {x.shape} differ")
    d = x_adv - x
    dist = math.sqrt(float(np.vdot(d, d)))
    if dist >= zeta:
        return x + (zeta / dist) * d
    return x_adv


def clip_l2(x_adv: np.ndarray, x: np.ndarray, zeta: float) -> np.ndarray:
    """l2 projection followed by a [0, 1] pixel clamp (clamping only shrinks the distance)."""
    return np.clip(project_l2(x_adv, x, zeta), 0.0, 1.0)


def l2(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return math.sqrt(float(np.vdot(d, d)))


class CoordinateSampler:
    """Draws one-hot coordinates with probability proportional to |M|."""

    def __init__(self, grad_map: Optional[np.ndarray], shape: tuple[int, ...]):
        self.shape = tuple(shape)
        self.size = int(np.prod(self.shape))
        weights = None if grad_map is None else np.abs(np.asarray(grad_map, dtype=np.float64)).ravel()
        if weights is not None and weights.size != self.size:
            raise ContractError(f"gradient map shape {np.shape(grad_map)} differs from {self.shape}")
        if weights is None or not np.isfinite(weights.sum()) or weights.sum() <= 0:
            self.cdf = None  # uniform fallback
        else:
            self.cdf = np.cumsum(weights)

    def draw(self, rng: np.random.Generator) -> int:
        u = rng.random()
        if self.cdf is None:
            return min(int(u * self.size), self.size - 1)
        i = int(np.searchsorted(self.cdf, u * self.cdf[-1], side="right"))
        return min(i, self.size - 1)


def perturbation_at(index: int, shape: tuple[int, ...], kernel: np.ndarray) -> np.ndarray:
    """Smoothed one-hot stamp at a flat coordinate, scaled to unit max entry."""
    q = np.zeros(int(np.prod(shape)))
    q[index] = 1.0
    q = q.reshape(shape)
    if kernel.shape == (1, 1):
        return q
    delta = T.smooth(q, kernel)
    return delta / delta.max()


def sample_perturbation(grad_map, kernel, rng, shape=None):
    """Draw a coordinate proportional to |M| and return (delta, flat index)."""
    shape = np.shape(grad_map) if shape is None else shape
    idx = CoordinateSampler(grad_map, shape).draw(rng)
    return perturbation_at(idx, shape, kernel), idx


def surrogate_loss_grad(surrogate: nets.Model, x: np.ndarray, y: int) -> tuple[float, np.ndarray]:
    """Attack loss of the surrogate at x and its input gradient."""
    xv = T.variable(x[None])
    logp = T.log_softmax(nets.logits(surrogate, xv))
    other = np.delete(logp.value[0], y)
    runner = int(np.flatnonzero(np.arange(logp.shape[1]) != y)[other.argmax()])
    j = T.sub(T.gather(logp, [y]), T.gather(logp, [runner]))
    (g,) = T.backward(T.sum(j), [xv])
    return float(j.value[0]), g[0]


def gradient_map(surrogate: nets.Model, x: np.ndarray, y: int, kernel: np.ndarray) -> np.ndarray:
    """Smoothed surrogate gradient of the attack loss, used to weight coordinate draws."""
    _, g = surrogate_loss_grad(surrogate, x, y)
    return T.smooth(g, kernel)


def timi(surrogate: nets.Model, x_adv: np.ndarray, x: np.ndarray, y: int, cfg: AttackConfig):
    """Translation-invariant momentum transfer step on the surrogate.

    Returns the new image and the last smoothed gradient map.
    """
    kernel = cfg.kernel
    cur = x_adv.copy()
    momentum = np.zeros_like(x_adv)
    grad_map = np.zeros_like(x_adv)
    for _ in range(cfg.n_t):
        _, g = surrogate_loss_grad(surrogate, cur, y)
        s = T.smooth(g, kernel)
        norm = math.sqrt(float(np.vdot(s, s)))
        if norm == 0.0:
            break
        grad_map = s
        momentum = cfg.mu * momentum + s / norm
        cur = clip_l2(cur - cfg.step_t * momentum, x, cfg.zeta)
    return cur, grad_map


# ---------------------------------------------------------------- outer loops


class _Probe:
    """Query bookkeeping shared by the loops: counts, trace and budget."""

    def __init__(self, oracle, y: int, budget: int):
        self.oracle = oracle
        self.y = y
        self.budget = budget
        self.used = 0
        self.trace: list[tuple[int, float]] = []

    @property
    def exhausted(self) -> bool:
        return self.used >= self.budget

    def __call__(self, x: np.ndarray) -> tuple[float, float]:
        resp = self.oracle.query(x)
        self.used += 1
        j = attack_loss(resp.probs, self.y)
        self.trace.append((self.used, j))
        return float(resp.probs[self.y]), j


def _result(x_adv, x, j, probe: _Probe, accepted, hoga_steps=0) -> AttackResult:
    return AttackResult(
        success=j < 0,
        queries=probe.used,
        x_adv=x_adv,
        l2_dist=l2(x_adv, x),
        trace=probe.trace,
        accepted=accepted,
        hoga_steps=hoga_steps,
    )


def simba_plus(x, y, oracle, surrogate: Optional[nets.Model], cfg: AttackConfig, rng=None):
    """Greedy +/- epsilon probes on smoothed coordinates drawn from the surrogate's gradient map.

    With ``surrogate=None`` coordinates are uniform.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    kernel = cfg.kernel
    probe = _Probe(oracle, y, cfg.max_queries)
    x_adv = x.copy()
    p, j = probe(x_adv)
    accepted = [(probe.used, j)]
    if j < 0 or probe.exhausted:
        return _result(x_adv, x, j, probe, accepted)
    grad_map = None if surrogate is None else gradient_map(surrogate, x, y, kernel)
    sampler = CoordinateSampler(grad_map, x.shape)
    while True:
        delta = perturbation_at(sampler.draw(rng), x.shape, kernel)
        for alpha in (cfg.epsilon, -cfg.epsilon):
            cand = clip_l2(x_adv + alpha * delta, x, cfg.zeta)
            p_new, j_new = probe(cand)
            if j_new < j:
                x_adv, p, j = cand, p_new, j_new
                accepted.append((probe.used, j))
                break
            if probe.exhausted:
                break
        if j < 0 or probe.exhausted:
            return _result(x_adv, x, j, probe, accepted)


def simba(x, y, oracle, cfg: AttackConfig, rng=None):
    """Uniform single-pixel SimBA baseline."""
    return simba_plus(x, y, oracle, None, cfg.with_(kernel_size=1), rng)


def _transfer_due(i: int, cfg: AttackConfig) -> bool:
    return cfg.n_q is not None and i % cfg.n_q == 0


def simba_pp(x, y, oracle, surrogate: nets.Model, cfg: AttackConfig, rng=None):
    """SimBA+ interleaved with a transfer step every n_q iterations (starting at 0)."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    kernel = cfg.kernel
    probe = _Probe(oracle, y, cfg.max_queries)
    x_adv = x.copy()
    p, j = probe(x_adv)
    accepted = [(probe.used, j)]
    if j < 0 or probe.exhausted:
        return _result(x_adv, x, j, probe, accepted)
    sampler = None
    if cfg.n_q is None:
        sampler = CoordinateSampler(gradient_map(surrogate, x, y, kernel), x.shape)
    i = 0
    while True:
        if _transfer_due(i, cfg):
            cand, grad_map = timi(surrogate, x_adv, x, y, cfg)
            sampler = CoordinateSampler(grad_map, x.shape)
            p_new, j_new = probe(cand)
        else:
            delta = perturbation_at(sampler.draw(rng), x.shape, kernel)
            for alpha in (cfg.epsilon, -cfg.epsilon):
                cand = clip_l2(x_adv + alpha * delta, x, cfg.zeta)
                p_new, j_new = probe(cand)
                if j_new < j or probe.exhausted:
                    break
        if j_new < j:
            x_adv, p, j = cand, p_new, j_new
            accepted.append((probe.used, j))
        if j < 0 or probe.exhausted:
            return _result(x_adv, x, j, probe, accepted)
        i += 1


class Learner:
    """Surrogate owner for LeBA: the tuple buffer plus HOGA state, kept across images."""

    def __init__(self, surrogate: nets.Model, cfg: AttackConfig, state: Optional[hoga.HogaState] = None):
        self.surrogate = surrogate
        self.buffer = hoga.Buffer(cfg.buffer_size)
        self.state = state if state is not None else hoga.HogaState(gamma=cfg.gamma0, lam=cfg.lam)
        self.train = cfg.mode == "train"
        self.tuples_seen = 0

    def add(self, x_post, x_pre, p_post, p_pre, label) -> bool:
        """Buffer one probe; run a HOGA step when the buffer fills. Returns True if it did."""
        self.buffer.add(hoga.QueryTuple(x_post, x_pre, p_post, p_pre, label))
        self.tuples_seen += 1
        if self.buffer.full:
            if self.train:
                hoga.step(self.surrogate, self.buffer, self.state)
            self.buffer.clear()
            return self.train
        return False


def leba(x, y, oracle, learner: Learner, cfg: AttackConfig, rng=None):
    """SimBA++ whose query probes are buffered and, in train mode, fitted by HOGA."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    kernel = cfg.kernel
    probe = _Probe(oracle, y, cfg.max_queries)
    x_adv = x.copy()
    p, j = probe(x_adv)
    accepted = [(probe.used, j)]
    steps = 0
    if j < 0 or probe.exhausted:
        return _result(x_adv, x, j, probe, accepted)
    sampler = None
    if cfg.n_q is None:
        sampler = CoordinateSampler(gradient_map(learner.surrogate, x, y, kernel), x.shape)
    i = 0
    while True:
        if _transfer_due(i, cfg):
            cand, grad_map = timi(learner.surrogate, x_adv, x, y, cfg)
            sampler = CoordinateSampler(grad_map, x.shape)
            p_new, j_new = probe(cand)
        else:
            delta = perturbation_at(sampler.draw(rng), x.shape, kernel)
            for alpha in (cfg.epsilon, -cfg.epsilon):
                cand = clip_l2(x_adv + alpha * delta, x, cfg.zeta)
                p_new, j_new = probe(cand)
                steps += learner.add(cand, x_adv, p_new, p, y)
                if j_new < j or probe.exhausted:
                    break
        if j_new < j:
            x_adv, p, j = cand, p_new, j_new
            accepted.append((probe.used, j))
        if j < 0 or probe.exhausted:
            return _result(x_adv, x, j, probe, accepted, steps)
        i += 1
