"""Clipped PPO surrogate with GAE, a KL penalty toward a frozen reference, and step masking.

The objective maximized per update is::

    J(theta) = (1/L) * sum_t I_t * min(ratio_t * A_t, clip(ratio_t, 1-eps, 1+eps) * A_t)
               - kl_coefficient * (1/L) * sum_t I_t * KL(pi_theta(.|s_t) || pi_ref(.|s_t))

where ``I_t`` is 0 for retrieved-content steps. ``L`` is the batch normalizer:
``sum_t I_t`` by default, or the number of trajectories when the batch sets
``normalizer`` (each tabular decision then counts like one token). Gradients
are analytic; :func:`objective` exists so they can be checked numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .policy import SoftmaxPolicy, log_softmax, softmax


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float = 1.0,
                lam: float = 0.95, masks: Optional[Sequence[bool]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns by the GAE recursion.

    ``values`` has one entry per step, optionally plus a bootstrap value for the
    state after the last step (terminal value 0 otherwise). Steps with a false
    mask are skipped entirely: their reward and value are ignored and their
    advantage is 0, so the recursion runs over the unmasked steps only.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(rewards)
    if len(values) == n:
        values = np.append(values, 0.0)
    elif len(values) != n + 1:
        raise ValueError(f"values has length {len(values)}; expected {n} or {n + 1}")
    if masks is None:
        masks = np.ones(n, dtype=bool)
    masks = np.asarray(masks, dtype=bool)
    if len(masks) != n:
        raise ValueError(f"masks has length {len(masks)}; expected {n}")

    adv = np.zeros(n)
    ret = np.zeros(n)
    live = np.flatnonzero(masks)
    next_value, running = values[n], 0.0
    for i in live[::-1]:
        delta = rewards[i] + gamma * next_value - values[i]
        running = delta + gamma * lam * running
        adv[i] = running
        ret[i] = running + values[i]
        next_value = values[i]
    return adv, ret


@dataclass
class AdvantageBatch:
    keys: list
    actions: np.ndarray
    old_log_probs: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    masks: np.ndarray
    normalizer: Optional[float] = None

    def __post_init__(self):
        n = len(self.keys)
        for name in ("actions", "old_log_probs", "returns", "advantages", "masks"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length mismatch")
        if not np.all(np.isfinite(self.advantages)):
            raise ValueError("non-finite advantage")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def live(self) -> int:
        return int(np.count_nonzero(self.masks))

    @property
    def scale(self) -> float:
        return float(self.normalizer) if self.normalizer else float(self.live)


@dataclass(frozen=True)
class PPOConfig:
    clip_epsilon: float = 0.2
    kl_coefficient: float = 1e-3
    learning_rate: float = 0.05
    epochs: int = 4

    def __post_init__(self):
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be > 0")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    return float(np.sum(np.exp(lp) * (lp - lq)))


def _terms(policy: SoftmaxPolicy, batch: AdvantageBatch, ref: SoftmaxPolicy, cfg: PPOConfig):
    eps = cfg.clip_epsilon
    L = batch.scale
    for i in np.flatnonzero(batch.masks):
        key, a, A = batch.keys[i], int(batch.actions[i]), float(batch.advantages[i])
        lp = log_softmax(policy.logits(key))
        ratio = math.exp(lp[a] - batch.old_log_probs[i])
        clipped = min(max(ratio, 1 - eps), 1 + eps)
        yield key, a, A, lp, ratio, clipped, L


def objective(policy: SoftmaxPolicy, batch: AdvantageBatch, ref: SoftmaxPolicy, cfg: PPOConfig) -> float:
    total = 0.0
    for key, a, A, lp, ratio, clipped, L in _terms(policy, batch, ref, cfg):
        total += (min(ratio * A, clipped * A) - cfg.kl_coefficient * kl_divergence(policy.logits(key), ref.logits(key))) / L
    return total


def gradient(policy: SoftmaxPolicy, batch: AdvantageBatch, ref: SoftmaxPolicy,
             cfg: PPOConfig) -> tuple[dict, dict]:
    """Analytic gradient of :func:`objective` per logit row, plus diagnostics."""
    grads: dict = {}
    ratios, clipped_n, kls = [], 0, []
    for key, a, A, lp, ratio, clipped, L in _terms(policy, batch, ref, cfg):
        p = np.exp(lp)
        g = grads.setdefault(key, np.zeros_like(p))
        # d ratio / d theta = ratio * (e_a - p); the clipped branch has zero gradient
        if ratio * A <= clipped * A:
            e = -ratio * p
            e[a] += ratio
            g += A * e / L
        else:
            clipped_n += 1
        lq = log_softmax(ref.logits(key))
        kl = float(np.sum(p * (lp - lq)))
        g -= cfg.kl_coefficient * p * (lp - lq - kl) / L
        ratios.append(ratio)
        kls.append(kl)
    n = max(len(ratios), 1)
    diag = {"mean_ratio": float(np.mean(ratios)) if ratios else 1.0,
            "clip_fraction": clipped_n / n,
            "kl": float(np.mean(kls)) if kls else 0.0}
    return grads, diag


def ppo_update(policy: SoftmaxPolicy, batch: AdvantageBatch, ref: SoftmaxPolicy,
               cfg: PPOConfig) -> tuple[SoftmaxPolicy, dict]:
    """Gradient ascent on the clipped objective for ``cfg.epochs`` full-batch steps.

    ``policy`` must be the policy that produced ``batch.old_log_probs``; a new
    policy is returned and the input is left untouched.
    """
    if len(batch) == 0 or batch.live == 0:
        raise ValueError("empty batch")
    new = policy.copy()
    diag: dict = {}
    for _ in range(cfg.epochs):
        grads, diag = gradient(new, batch, ref, cfg)
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient at {key}", diag)
            new.theta[key] = new.logits(key) + cfg.learning_rate * g
    diag["objective"] = objective(new, batch, ref, cfg)
    if not math.isfinite(diag["objective"]):
        raise TrainingDiverged("non-finite objective", diag)
    return new, diag


__all__ = ["AdvantageBatch", "PPOConfig", "TrainingDiverged", "compute_gae", "gradient",
           "kl_divergence", "objective", "ppo_update", "softmax"]
