"""Exact closed-form computations on tabular instances.

Ground truth for certifying training: the empirical class-conditioned
behavior policy, the optimal policy

    pi*(y | x, c) = pi_c(y | x, c) * exp(r(x, y, c) / beta) / Z(x, c)

with its partition function, KL divergences, and the two regularized
objectives (reward minus beta-weighted KL against either the behavior
policy or a base policy). All arithmetic is float64; exponentials use
per-slice max subtraction, so Z is reported in log space as well
(the linear Z overflows for extreme beta, log_z never does).

Array layout is (X, C, Y) throughout, matching TabularInstance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import TabularInstance
from .errors import DegenerateSlice, EmptySlot, ShapeMismatch, SupportViolation


class ConditionalTable:
    """p(y | x, c) with an explicit mask of active (x, c) slots.

    Active slices must sum to 1 within 1e-12; inactive slices are all
    zero and excluded from every computation.
    """

    def __init__(self, probs: np.ndarray, active: np.ndarray | None = None):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ValueError("conditional tables are (X, C, Y) tensors")
        if active is None:
            active = probs.sum(axis=2) > 0
        active = np.asarray(active, dtype=bool)
        if active.shape != probs.shape[:2]:
            raise ValueError("active mask shape mismatch")
        if np.any(probs < -1e-15) or np.any(probs > 1 + 1e-12):
            raise ValueError("probabilities must lie in [0, 1]")
        sums = probs.sum(axis=2)
        if np.any(np.abs(sums[active] - 1.0) > 1e-12):
            raise ValueError("active slices must sum to 1 within 1e-12")
        if np.any(sums[~active] != 0.0):
            raise ValueError("inactive slices must be all zero")
        self.probs = probs
        self.active = active

    @property
    def shape(self):
        return self.probs.shape

    def slice(self, x: int, c: int) -> np.ndarray:
        if not self.active[x, c]:
            raise EmptySlot(x, c)
        return self.probs[x, c]


def empirical_behavior(instance: TabularInstance) -> ConditionalTable:
    """Frequency estimate p(y | x, c) = n(x, y, c) / n(x, ., c)."""
    totals = instance.slot_totals()
    active = totals > 0
    probs = np.where(
        active[..., None], instance.counts / np.where(active, totals, 1.0)[..., None], 0.0
    )
    return ConditionalTable(probs, active)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Half the L1 distance between two distributions."""
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def optimal_policy(
    behavior: ConditionalTable, rewards: np.ndarray, beta: float
) -> tuple[ConditionalTable, np.ndarray, np.ndarray]:
    """Closed-form optimum of the KL-regularized reward objective.

    Returns (pi_star, z, log_z). pi_star shares the behavior support;
    z[x, c] is the partition sum (inf when it overflows float64, use
    log_z there); inactive slots carry z = 0 and log_z = -inf.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != behavior.shape:
        raise ShapeMismatch(f"rewards shape {rewards.shape} != table shape {behavior.shape}")
    if not np.all(np.isfinite(rewards)):
        raise ValueError("rewards must be finite")
    support = behavior.probs > 0
    if np.any(behavior.active & ~support.any(axis=2)):
        raise DegenerateSlice("an active behavior slice has empty support")
    masked_r = np.where(support, rewards, -np.inf)
    slice_max = masked_r.max(axis=2, keepdims=True)
    slice_max = np.where(np.isfinite(slice_max), slice_max, 0.0)
    u = np.where(support, behavior.probs * np.exp((rewards - slice_max) / beta), 0.0)
    z_stable = u.sum(axis=2)
    probs = np.where(behavior.active[..., None], u / np.where(z_stable > 0, z_stable, 1.0)[..., None], 0.0)
    with np.errstate(divide="ignore", over="ignore"):
        log_z = np.where(behavior.active, np.log(z_stable) + slice_max[..., 0] / beta, -np.inf)
        z = np.exp(log_z) * behavior.active
    return ConditionalTable(probs, behavior.active.copy()), z, log_z


def kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL divergence of two distribution slices, with 0 ln(0/q) = 0.

    Raises SupportViolation when p puts mass where q has none.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pos = p > 0
    if np.any(pos & (q <= 0)):
        raise SupportViolation("support(p) must be contained in support(q)")
    return float((p[pos] * np.log(p[pos] / q[pos])).sum())


def _resolve_weights(context_weights, reference: ConditionalTable) -> np.ndarray:
    if context_weights is None:
        n_active = int(reference.active.sum())
        return np.where(reference.active, 1.0 / n_active, 0.0)
    context_weights = np.asarray(context_weights, dtype=np.float64)
    if context_weights.shape != reference.active.shape:
        raise ShapeMismatch("context weights must be an (X, C) array")
    return context_weights


def j_crlft(
    policy: ConditionalTable,
    behavior: ConditionalTable,
    rewards: np.ndarray,
    beta: float,
    context_weights: np.ndarray | None = None,
) -> float:
    """Expected reward minus beta-weighted KL to the behavior policy,
    averaged over conditioning slots (empirical frequencies by default)."""
    if policy.shape != behavior.shape:
        raise ShapeMismatch("policy and behavior tables must share a shape")
    rewards = np.asarray(rewards, dtype=np.float64)
    weights = _resolve_weights(context_weights, behavior)
    total = 0.0
    n_x, n_c, _ = policy.shape
    for x in range(n_x):
        for c in range(n_c):
            w = weights[x, c]
            if w == 0:
                continue
            p = policy.slice(x, c)
            q = behavior.slice(x, c)
            total += w * (float((p * rewards[x, c]).sum()) - beta * kl(p, q))
    return total


def j_rlft(
    policy: ConditionalTable,
    base: ConditionalTable,
    rewards: np.ndarray,
    beta: float,
    context_weights: np.ndarray | None = None,
) -> float:
    """Expected reward minus beta-weighted KL to a base policy."""
    return j_crlft(policy, base, rewards, beta, context_weights)


def uniform_table(shape: tuple[int, int, int], active: np.ndarray | None = None) -> ConditionalTable:
    """Full-support uniform conditionals, a stand-in base policy."""
    n_x, n_c, n_y = shape
    if active is None:
        active = np.ones((n_x, n_c), dtype=bool)
    probs = np.where(np.asarray(active, dtype=bool)[..., None], 1.0 / n_y, 0.0)
    probs = np.broadcast_to(probs, shape).copy()
    return ConditionalTable(probs, active)


def table_from_policy(policy) -> ConditionalTable:
    """Snapshot a tabular policy's conditionals as a full-support table."""
    return ConditionalTable(policy.conditionals())


@dataclass
class OracleReport:
    """Closed-form certificate for one instance and reward table."""

    pi_star: ConditionalTable
    z: np.ndarray
    log_z: np.ndarray
    kl_to_behavior: float
    j_crlft: float
    j_rlft: float
    beta: float

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "pi_star": self.pi_star.probs.tolist(),
            "active": self.pi_star.active.tolist(),
            "z": self.z.tolist(),
            "log_z": self.log_z.tolist(),
            "kl_to_behavior": self.kl_to_behavior,
            "j_crlft": self.j_crlft,
            "j_rlft": self.j_rlft,
        }


def build_report(
    instance: TabularInstance,
    rewards: np.ndarray,
    beta: float,
    base: ConditionalTable | None = None,
) -> OracleReport:
    """Full oracle evaluation of an instance: pi*, Z, KL, and objectives."""
    behavior = empirical_behavior(instance)
    pi_star, z, log_z = optimal_policy(behavior, rewards, beta)
    weights = instance.context_weights()
    kl_total = 0.0
    n_x, n_c = behavior.active.shape
    for x in range(n_x):
        for c in range(n_c):
            if weights[x, c] > 0:
                kl_total += weights[x, c] * kl(pi_star.probs[x, c], behavior.probs[x, c])
    if base is None:
        base = uniform_table(behavior.shape, behavior.active)
    return OracleReport(
        pi_star=pi_star,
        z=z,
        log_z=log_z,
        kl_to_behavior=kl_total,
        j_crlft=j_crlft(pi_star, behavior, rewards, beta, weights),
        j_rlft=j_rlft(pi_star, base, rewards, beta, weights),
        beta=beta,
    )


def verify_equivalence(trained, report: OracleReport, tol: float) -> dict:
    """Certify a trained tabular policy against the oracle optimum.

    Passes when the worst active-slice total variation is at most tol;
    the record names the worst slot either way.
    """
    conditionals = trained.conditionals()
    if conditionals.shape != report.pi_star.shape:
        raise ShapeMismatch(
            f"policy shape {conditionals.shape} != oracle shape {report.pi_star.shape}"
        )
    worst_tv = -1.0
    worst_slot = None
    n_x, n_c = report.pi_star.active.shape
    for x in range(n_x):
        for c in range(n_c):
            if not report.pi_star.active[x, c]:
                continue
            tv = total_variation(conditionals[x, c], report.pi_star.probs[x, c])
            if tv > worst_tv:
                worst_tv, worst_slot = tv, (x, c)
    return {
        "passed": bool(worst_tv <= tol),
        "tol": tol,
        "worst_tv": worst_tv,
        "worst_slot": list(worst_slot) if worst_slot else None,
        "beta": report.beta,
    }


# ---------------------------------------------------------------------------
# Seeded generators for certification runs


def random_instance(
    seed: int,
    max_contexts: int = 4,
    num_classes: int = 2,
    max_responses: int = 6,
    max_count: int = 6,
) -> TabularInstance:
    """Random counts over random-size index sets within the given bounds."""
    rng = np.random.default_rng(seed)
    n_x = int(rng.integers(1, max_contexts + 1))
    n_y = int(rng.integers(2, max_responses + 1))
    while True:
        counts = rng.integers(0, max_count + 1, size=(n_x, num_classes, n_y))
        if counts.sum() > 0:
            break
    return TabularInstance(
        [f"x{i}" for i in range(n_x)],
        [f"c{i}" for i in range(num_classes)],
        [f"y{i}" for i in range(n_y)],
        counts,
    )


def random_rewards(seed: int, shape: tuple[int, int, int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """General per-cell rewards, uniform in [low, high]."""
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=shape)


def perturbed_policy(table: ConditionalTable, seed: int, scale: float) -> ConditionalTable:
    """Random valid perturbation sharing the table's support.

    Multiplies supported probabilities by exp(scale * noise) and
    renormalizes, so KL terms against same-support references stay finite.
    """
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(table.probs.shape)
    support = table.probs > 0
    u = np.where(support, table.probs * np.exp(scale * noise), 0.0)
    sums = u.sum(axis=2, keepdims=True)
    probs = np.where(table.active[..., None], u / np.where(sums > 0, sums, 1.0), 0.0)
    return ConditionalTable(probs, table.active.copy())
