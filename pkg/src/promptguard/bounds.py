"""Calculators for the analytic safety quantities.

Harm-probability ceiling, refinement budgets, KL divergence, conditional
mutual information and entropy over discrete (harm, output, population)
tables, and four-objective Pareto filtering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import InvalidInputError

PROB_TOL = 1e-9


def safety_bound(dataset_size: int, alpha_p: float) -> float:
    if dataset_size < 0:
        raise InvalidInputError("dataset_size must be nonnegative")
    if not alpha_p > 0 or not math.isfinite(alpha_p):
        raise InvalidInputError("alpha_p must be a positive real")
    return math.exp(-alpha_p * math.sqrt(dataset_size))


def convergence_budget(epsilon: float) -> int:
    """Refinement rounds needed for an epsilon-level target: ceil(log2(1/epsilon))."""
    if not 0 < epsilon < 1:
        raise InvalidInputError("epsilon must lie in (0, 1)")
    return max(1, math.ceil(math.log2(1.0 / epsilon) - 1e-12))


def repertoire_budget(dataset_size: int) -> int:
    """Rounds implied by repertoire size: ceil(log2(max(|D|, 2)))."""
    if dataset_size < 0:
        raise InvalidInputError("dataset_size must be nonnegative")
    return math.ceil(math.log2(max(dataset_size, 2)) - 1e-12)


def _as_distribution(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    if np.any(arr < 0):
        raise InvalidInputError(f"{name} has negative entries")
    return arr


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q) in nats; ``math.inf`` when p is not absolutely continuous w.r.t. q."""
    p_arr = _as_distribution(p, "p")
    q_arr = _as_distribution(q, "q")
    if p_arr.shape != q_arr.shape:
        raise InvalidInputError(f"dimension mismatch: {p_arr.shape[0]} vs {q_arr.shape[0]}")
    support = p_arr > 0
    if np.any(q_arr[support] == 0):
        return math.inf
    ps, qs = p_arr[support], q_arr[support]
    return max(0.0, float(np.sum(ps * np.log(ps / qs))))


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint table P(h, o, p) indexed ``[h, o, p]``."""

    table: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.table, dtype=float)
        if arr.ndim != 3 or 0 in arr.shape:
            raise InvalidInputError("joint table must be a non-empty 3-D array over (H, O, P)")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise InvalidInputError("joint probabilities must be finite and nonnegative")
        if abs(arr.sum() - 1.0) > PROB_TOL:
            raise InvalidInputError(f"joint probabilities sum to {arr.sum()!r}, not 1")
        object.__setattr__(self, "table", arr)

    @property
    def harm_alphabet_size(self) -> int:
        return self.table.shape[0]


def _xlog2x_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    mask = num > 0
    out[mask] = num[mask] * np.log2(num[mask] / den[mask])
    return out


def conditional_mutual_information(joint: DiscreteJoint) -> float:
    """I(H; O | P) in bits."""
    t = joint.table
    p_p = t.sum(axis=(0, 1))                     # P(p)
    p_hp = t.sum(axis=1)                         # P(h, p)
    p_op = t.sum(axis=0)                         # P(o, p)
    # sum of P(h,o,p) log2[ P(h,o,p) P(p) / (P(h,p) P(o,p)) ]
    den = p_hp[:, None, :] * p_op[None, :, :]
    terms = _xlog2x_ratio(t, den / np.where(p_p > 0, p_p, 1.0)[None, None, :])
    return max(0.0, float(terms.sum()))


def conditional_entropy(joint: DiscreteJoint) -> float:
    """H(H | O, P) in bits."""
    t = joint.table
    p_op = t.sum(axis=0)
    den = np.broadcast_to(p_op[None, :, :], t.shape)
    return max(0.0, -float(_xlog2x_ratio(t, den).sum()))


def conditional_entropy_check(joint: DiscreteJoint, delta: float) -> tuple[float, bool]:
    if delta < 0:
        raise InvalidInputError("delta must be nonnegative")
    value = conditional_entropy(joint)
    floor = math.log2(joint.harm_alphabet_size) - delta
    return value, value >= floor - PROB_TOL


@dataclass(frozen=True)
class TradeoffPoint:
    harm_prevention: float
    utility: float
    efficiency: float
    cost_inverse: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise InvalidInputError("trade-off coordinates must be finite")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.harm_prevention, self.utility, self.efficiency, self.cost_inverse)


def pareto_frontier(points: Sequence[TradeoffPoint]) -> list[TradeoffPoint]:
    """Non-dominated points in input order (higher is better on every axis)."""
    if not points:
        return []
    arr = np.array([p.as_tuple() for p in points], dtype=float)
    ge = np.all(arr[:, None, :] >= arr[None, :, :], axis=2)   # ge[j, i]: j >= i everywhere
    gt = np.any(arr[:, None, :] > arr[None, :, :], axis=2)
    dominated = np.any(ge & gt, axis=0)
    return [p for p, d in zip(points, dominated) if not d]


def bounds_report(
    dataset_size: int,
    alpha_p: float = 0.1,
    epsilon: float = 0.05,
) -> dict[str, float | int]:
    return {
        "dataset_size": dataset_size,
        "alpha": alpha_p,
        "epsilon": epsilon,
        "safety_bound": safety_bound(dataset_size, alpha_p),
        "convergence_budget": convergence_budget(epsilon),
        "repertoire_budget": repertoire_budget(dataset_size),
    }
