"""Temporal environment inference by EM over environment-specific heads.

The backbone is frozen here: callers pass the representations it produced
for every training window, in time order. Each environment owns a head
mapping representation -> horizon; the head's loss on a sample is that
sample's distance to the environment.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError
from .losses import SAMPLE_LOSSES
from .nn import MlpNetwork, SgdOptimizer, backward, forward

log = logging.getLogger(__name__)


@dataclass
class EnvironmentAssignment:
    labels: np.ndarray
    n_envs: int
    changed_fraction: float = 1.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ConfigError("labels must be a vector")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_envs):
            raise ConfigError(f"labels must lie in [0, {self.n_envs})")

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_envs)

    @classmethod
    def random(cls, n: int, n_envs: int, rng: np.random.Generator, block: int = 1) -> "EnvironmentAssignment":
        """Uniform random labels, drawn per run of ``block`` consecutive samples."""
        if block < 1:
            raise ConfigError("block must be >= 1")
        n_blocks = -(-n // block)
        return cls(np.repeat(rng.integers(n_envs, size=n_blocks), block)[:n], n_envs)


class MultiHeadRegressors:
    """K heads sharing one architecture."""

    def __init__(self, heads: List[MlpNetwork]):
        if not heads:
            raise ConfigError("need at least one head")
        shapes = [[(l.weight.shape, l.activation) for l in h.layers] for h in heads]
        if any(s != shapes[0] for s in shapes):
            raise ConfigError("all heads must share the same architecture")
        self.heads = heads

    @classmethod
    def from_regressor(cls, rho: MlpNetwork, n_envs: int) -> "MultiHeadRegressors":
        return cls([rho.copy() for _ in range(n_envs)])

    def __len__(self):
        return len(self.heads)

    def __getitem__(self, e) -> MlpNetwork:
        return self.heads[e]

    def predict(self, reps: np.ndarray) -> np.ndarray:
        """``(K, n, h)`` predictions."""
        return np.stack([h(reps) for h in self.heads])

    def losses(self, reps: np.ndarray, Y: np.ndarray, base: str = "suf") -> np.ndarray:
        """``(n, K)`` per-sample loss under every head."""
        loss_fn = SAMPLE_LOSSES[base][0]
        return np.stack([loss_fn(h(reps), Y) for h in self.heads], axis=1)


@dataclass
class EmConfig:
    n_envs: int = 2
    radius: int = 2
    tol: float = 0.01
    max_iters: int = 10
    epochs: int = 100
    lr: float = 0.05
    momentum: float = 0.9
    base: str = "suf"

    def validate(self):
        if self.n_envs < 1 or self.radius < 0 or self.max_iters < 1 or self.epochs < 0:
            raise ConfigError("EM needs n_envs >= 1, radius >= 0, max_iters >= 1, epochs >= 0")
        if self.base not in SAMPLE_LOSSES:
            raise ConfigError(f"unknown base loss {self.base!r}")


def tei_objective(heads: MultiHeadRegressors, reps, Y, assignment: EnvironmentAssignment, base="suf") -> float:
    """Mean over non-empty environments of each head's in-environment risk."""
    loss_fn = SAMPLE_LOSSES[base][0]
    risks = []
    for e in range(len(heads)):
        mask = assignment.labels == e
        if mask.any():
            risks.append(loss_fn(heads[e](reps[mask]), Y[mask]).mean())
    return float(np.mean(risks))


def m_step(
    heads: MultiHeadRegressors,
    reps: np.ndarray,
    Y: np.ndarray,
    assignment: EnvironmentAssignment,
    epochs: int,
    lr: float,
    momentum: float = 0.9,
    base: str = "suf",
):
    """Fit every head to its environment's samples by full-batch descent.

    Returns ``(risks, skipped)``: final in-environment risk per head and the
    environments that had no samples (their heads are left untouched).
    """
    loss_fn, grad_fn = SAMPLE_LOSSES[base]
    risks: Dict[int, float] = {}
    skipped = []
    for e in range(len(heads)):
        mask = assignment.labels == e
        if not mask.any():
            skipped.append(e)
            log.warning("environment %d is empty; its head is not updated", e)
            continue
        r, y = reps[mask], Y[mask]
        head = heads[e]
        opt = SgdOptimizer(lr, momentum)
        params = head.parameters()
        for _ in range(epochs):
            pred, tape = forward(head, r)
            g = backward(head, tape, grad_fn(pred, y) / len(y))
            opt.step(params, g.params)
            head.version += 1
        risks[e] = float(loss_fn(head(r), y).mean())
    return risks, skipped


def e_step_assign(
    heads: MultiHeadRegressors,
    reps: np.ndarray,
    Y: np.ndarray,
    current: EnvironmentAssignment,
    base: str = "suf",
    losses: Optional[np.ndarray] = None,
) -> EnvironmentAssignment:
    """Move every sample to the head with the smallest loss.

    Ties keep the current label when it is among the minimizers, otherwise
    go to the lowest index.
    """
    L = heads.losses(reps, Y, base) if losses is None else losses
    best = L.min(axis=1, keepdims=True)
    is_min = L == best
    n = len(L)
    keep = is_min[np.arange(n), current.labels]
    labels = np.where(keep, current.labels, np.argmax(is_min, axis=1))
    changed = float(np.mean(labels != current.labels)) if n else 0.0
    return EnvironmentAssignment(labels, current.n_envs, changed)


def label_propagate(assignment: EnvironmentAssignment, radius: int) -> EnvironmentAssignment:
    """Synchronous majority vote over the window ``t-r .. t+r``.

    The window is truncated at the sequence ends. A tie keeps the sample's
    own label if it is among the winners, otherwise takes the lowest label.
    """
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    old = assignment.labels
    n, K = len(old), assignment.n_envs
    if radius == 0 or n == 0:
        return EnvironmentAssignment(old.copy(), K, 0.0)
    onehot = np.zeros((n + 1, K), dtype=np.int64)
    onehot[np.arange(1, n + 1), old] = 1
    csum = np.cumsum(onehot, axis=0)
    idx = np.arange(n)
    lo = np.maximum(idx - radius, 0)
    hi = np.minimum(idx + radius, n - 1) + 1
    counts = csum[hi] - csum[lo]
    top = counts.max(axis=1)
    own_wins = counts[idx, old] == top
    labels = np.where(own_wins, old, np.argmax(counts == top[:, None], axis=1))
    return EnvironmentAssignment(labels, K, float(np.mean(labels != old)))


@dataclass
class EmResult:
    assignment: EnvironmentAssignment
    heads: MultiHeadRegressors
    history: List[dict] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.history)


def em_infer(
    heads: MultiHeadRegressors,
    reps: np.ndarray,
    Y: np.ndarray,
    initial: EnvironmentAssignment,
    config: EmConfig,
) -> EmResult:
    """Alternate M-step, E-step and label propagation until labels settle.

    Stops when the fraction of changed labels in an iteration drops below
    ``config.tol`` or after ``config.max_iters`` iterations.
    """
    config.validate()
    if len(heads) != initial.n_envs:
        raise ConfigError(f"{len(heads)} heads for {initial.n_envs} environments")
    current = initial
    result = EmResult(current, heads)
    for it in range(config.max_iters):
        risks, skipped = m_step(heads, reps, Y, current, config.epochs, config.lr, config.momentum, config.base)
        L = heads.losses(reps, Y, config.base)
        n = len(L)
        before = float(L[np.arange(n), current.labels].sum())
        assigned = e_step_assign(heads, reps, Y, current, config.base, losses=L)
        after = float(L[np.arange(n), assigned.labels].sum())
        propagated = label_propagate(assigned, config.radius)
        changed = float(np.mean(propagated.labels != current.labels)) if n else 0.0
        current = EnvironmentAssignment(propagated.labels, current.n_envs, changed)
        result.history.append(
            {
                "iteration": it,
                "risks": {str(k): v for k, v in risks.items()},
                "skipped": skipped,
                "estep_loss_before": before,
                "estep_loss_after": after,
                "estep_changed": assigned.changed_fraction,
                "changed_fraction": changed,
                "counts": current.counts().tolist(),
            }
        )
        if changed < config.tol:
            result.converged = True
            break
    result.assignment = current
    return result


def mean_run_length(labels) -> float:
    """Average length of maximal runs of equal consecutive labels."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    runs = 1 + int(np.count_nonzero(labels[1:] != labels[:-1]))
    return len(labels) / runs
