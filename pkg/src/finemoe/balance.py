"""Expert- and device-level auxiliary balance losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .moe import RoutingDecision
from .tensor import Tensor


@dataclass
class BalanceStats:
    """Per-routed-expert load ``f`` (constant) and mean affinity ``P`` (differentiable)."""

    f: np.ndarray
    P: Tensor
    T: int
    n_routed: int
    k_routed: int

    @classmethod
    def from_counts(cls, counts, s: Tensor, k_routed: int) -> "BalanceStats":
        counts = np.asarray(counts, dtype=float)
        T, n_routed = s.shape
        f = counts * n_routed / (k_routed * T) if k_routed and T else np.zeros(n_routed)
        P = tn.mean(s, axis=0)
        return cls(f=f, P=P, T=T, n_routed=n_routed, k_routed=k_routed)

    @classmethod
    def from_decision(cls, decision: RoutingDecision) -> "BalanceStats":
        return cls.from_counts(decision.counts(), decision.s, decision.k_routed)


def expert_balance_loss(stats: BalanceStats, alpha1: float) -> Tensor:
    """``alpha1 * sum_i f_i P_i``; gradient reaches the affinities through ``P`` only."""
    return tn.scale(tn.tsum(tn.mul(stats.P, stats.f)), alpha1)


def _check_partition(groups: Sequence[Sequence[int]], n_routed: int) -> None:
    flat = sorted(int(i) for g in groups for i in g)
    if flat != list(range(n_routed)) or any(len(g) == 0 for g in groups):
        raise ContractError(f"device grouping {list(map(list, groups))} is not a partition of {n_routed} experts")


def device_balance_loss(stats: BalanceStats, groups: Sequence[Sequence[int]], alpha2: float) -> Tensor:
    """``alpha2 * sum_d f'_d P'_d`` with ``f'`` the group mean of ``f`` and ``P'`` the group sum of ``P``."""
    _check_partition(groups, stats.n_routed)
    D = len(groups)
    # P' = A @ P where A is the 0/1 group-membership matrix
    member = np.zeros((D, stats.n_routed))
    for d, g in enumerate(groups):
        member[d, list(g)] = 1.0
    f_dev = member @ stats.f / member.sum(axis=1)
    P_dev = tn.reshape(tn.matmul(member, tn.reshape(stats.P, (stats.n_routed, 1))), (D,))
    return tn.scale(tn.tsum(tn.mul(P_dev, f_dev)), alpha2)


def load_dispersion(stats_or_f) -> dict:
    """Max/mean ratio and coefficient of variation of the per-expert load."""
    f = np.asarray(stats_or_f.f if isinstance(stats_or_f, BalanceStats) else stats_or_f, dtype=float)
    mu = f.mean() if f.size else 0.0
    if mu <= 0:
        return {"max_mean": 0.0, "cv": 0.0}
    return {"max_mean": float(f.max() / mu), "cv": float(f.std() / mu)}
