"""Fine-grained mixture-of-experts feed-forward layer.

Experts are numbered with the ``K_s`` shared experts first, followed by the
``m*N - K_s`` routed experts. Only routed experts own a router centroid and
take part in the softmax; shared experts fire for every token with unit
weight. Routed gate values are the raw affinities of the selected experts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError, RoutingError
from .tensor import Tensor


def _align_up(x: int, multiple: int) -> int:
    return -(-x // multiple) * multiple


@dataclass(frozen=True)
class MoEConfig:
    d: int
    N: int
    m: int = 1
    K: int = 2
    K_s: int = 0
    base_ffn_inner: int = 0
    expert_inner_override: int | None = None
    D: int = 1
    alpha1: float = 0.01
    alpha2: float = 0.0
    activation: str = "silu"
    renormalize_gates: bool = False
    device_groups: tuple[tuple[int, ...], ...] | None = None
    inner_align: int = 8

    def __post_init__(self):
        if self.device_groups is not None:
            object.__setattr__(self, "device_groups", tuple(tuple(int(i) for i in g) for g in self.device_groups))
        self.validate()

    @property
    def n_experts(self) -> int:
        return self.m * self.N

    @property
    def n_routed(self) -> int:
        return self.m * self.N - self.K_s

    @property
    def k_routed(self) -> int:
        return self.m * self.K - self.K_s

    @property
    def expert_inner(self) -> int:
        if self.expert_inner_override is not None:
            return self.expert_inner_override
        return _align_up(math.ceil(self.base_ffn_inner / self.m), self.inner_align)

    def validate(self) -> None:
        if self.d < 1 or self.N < 1 or self.m < 1 or self.K < 0 or self.K_s < 0:
            raise ConfigError("d, N, m must be >= 1 and K, K_s >= 0")
        if self.m * self.K < self.K_s:
            raise ConfigError(f"m*K >= K_s violated: m*K={self.m * self.K} < K_s={self.K_s}")
        if self.n_routed < 0:
            raise ConfigError(f"m*N - K_s >= 0 violated: m*N={self.n_experts}, K_s={self.K_s}")
        if self.k_routed > self.n_routed:
            raise ConfigError(
                f"N_r >= K_r violated: routed experts {self.n_routed} < activated routed {self.k_routed}")
        if self.expert_inner_override is None and self.base_ffn_inner < 1:
            raise ConfigError("base_ffn_inner must be >= 1 unless expert_inner_override is given")
        if self.expert_inner < 1:
            raise ConfigError("expert_inner must be >= 1")
        if self.activation not in tn.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("balance factors must be non-negative")
        if self.device_groups is not None:
            flat = sorted(i for g in self.device_groups for i in g)
            if flat != list(range(self.n_routed)) or any(len(g) == 0 for g in self.device_groups):
                raise ConfigError("device_groups must partition the routed experts into non-empty groups")
            if len(self.device_groups) != self.D:
                raise ConfigError(f"device_groups has {len(self.device_groups)} groups but D={self.D}")
        elif self.D < 1 or (self.D > 1 and self.n_routed % self.D != 0):
            raise ConfigError(f"D divides N_r violated: D={self.D}, N_r={self.n_routed}")

    def groups(self) -> tuple[tuple[int, ...], ...]:
        if self.device_groups is not None:
            return self.device_groups
        size = self.n_routed // self.D if self.D else 0
        return tuple(tuple(range(g * size, (g + 1) * size)) for g in range(self.D))


# ---------------------------------------------------------------- parameters

@dataclass
class FFNParams:
    w_in: Tensor
    w_gate: Tensor
    w_out: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w_in, self.w_gate, self.w_out]


@dataclass
class ExpertParams:
    shared: list[FFNParams]
    routed: list[FFNParams]

    def tensors(self) -> list[Tensor]:
        return [t for p in self.shared + self.routed for t in p.tensors()]


@dataclass
class Router:
    centroids: Tensor  # [N_r, d]

    @property
    def n_routed(self) -> int:
        return self.centroids.shape[0]


ParamFactory = Callable[[str, tuple[int, ...]], Tensor]


def init_ffn(make: ParamFactory, prefix: str, d: int, inner: int) -> FFNParams:
    return FFNParams(
        w_in=make(f"{prefix}.w_in", (d, inner)),
        w_gate=make(f"{prefix}.w_gate", (d, inner)),
        w_out=make(f"{prefix}.w_out", (inner, d)),
    )


def init_moe(cfg: MoEConfig, make: ParamFactory, prefix: str = "moe") -> tuple[ExpertParams, Router]:
    inner = cfg.expert_inner
    shared = [init_ffn(make, f"{prefix}.shared.{i}", cfg.d, inner) for i in range(cfg.K_s)]
    routed = [init_ffn(make, f"{prefix}.routed.{i}", cfg.d, inner) for i in range(cfg.n_routed)]
    router = Router(make(f"{prefix}.router", (cfg.n_routed, cfg.d)))
    return ExpertParams(shared, routed), router


# ---------------------------------------------------------------- routing

@dataclass
class RoutingDecision:
    s: Tensor
    selected: np.ndarray  # [T, K_r] routed indices, descending affinity
    g: Tensor
    mask: np.ndarray | None = None  # [T, N_r] bool, True = disabled
    k_routed: int = 0

    @property
    def selection_mask(self) -> np.ndarray:
        sel = np.zeros(self.s.shape, dtype=bool)
        if self.selected.size:
            np.put_along_axis(sel, self.selected, True, axis=1)
        return sel

    def counts(self) -> np.ndarray:
        """Number of tokens that selected each routed expert."""
        return np.bincount(self.selected.reshape(-1), minlength=self.s.shape[1]).astype(float)

    def nonzero_gates_per_token(self) -> np.ndarray:
        return np.count_nonzero(self.g.data, axis=1)


def compute_affinities(u: Tensor, router: Router) -> Tensor:
    """Token-to-expert affinities: softmax over routed experts of ``u @ e.T``."""
    if u.ndim != 2 or u.shape[1] != router.centroids.shape[1]:
        raise DimensionError(f"affinities: tokens {u.shape} vs centroids {router.centroids.shape}")
    return tn.softmax(tn.matmul(u, tn.transpose(router.centroids)), axis=1)


def _normalize_mask(mask, shape: tuple[int, int]) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        if mask.shape != shape:
            raise DimensionError(f"mask shape {mask.shape} != affinities shape {shape}")
        return mask
    out = np.zeros(shape, dtype=bool)
    idx = list(mask)
    if idx and isinstance(idx[0], (set, frozenset, list, tuple, np.ndarray)):
        for t, row in enumerate(idx):
            out[t, list(row)] = True
    elif idx:
        out[:, idx] = True
    return out


def route_topk(s, k_routed: int, mask=None, renormalize: bool = False) -> RoutingDecision:
    """Select the ``k_routed`` largest unmasked affinities per token.

    Ties go to the lowest expert index. ``mask`` may be a boolean [T, N_r]
    array, one index collection applied to every token, or a per-token list of
    index collections.
    """
    s = tn.as_tensor(s)
    T, n_routed = s.shape
    mask = _normalize_mask(mask, (T, n_routed))
    available = n_routed - (mask.sum(axis=1) if mask is not None else np.zeros(T, dtype=int))
    if k_routed < 0 or (T and k_routed > int(np.min(available))):
        raise RoutingError(
            f"cannot select {k_routed} experts: only {int(np.min(available)) if T else n_routed} unmasked")
    scores = s.data if mask is None else np.where(mask, -np.inf, s.data)
    # stable sort on the negated scores keeps the lower index first on ties
    order = np.argsort(-scores, axis=1, kind="stable")
    selected = order[:, :k_routed]
    sel = np.zeros((T, n_routed))
    if k_routed:
        np.put_along_axis(sel, selected, 1.0, axis=1)
    g = tn.mul(s, sel)
    if renormalize and k_routed:
        g = tn.div(g, tn.tsum(g, axis=1, keepdims=True))
    return RoutingDecision(s=s, selected=selected, g=g, mask=mask, k_routed=k_routed)


# ---------------------------------------------------------------- experts

def expert_ffn(u: Tensor, p: FFNParams, activation: str = "silu") -> Tensor:
    """Gated FFN: ``(act(u @ W_gate) * (u @ W_in)) @ W_out``."""
    if u.shape[-1] != p.w_in.shape[0] or p.w_gate.shape != p.w_in.shape or p.w_out.shape != p.w_in.shape[::-1]:
        raise DimensionError(
            f"expert_ffn: input {u.shape}, w_in {p.w_in.shape}, w_gate {p.w_gate.shape}, w_out {p.w_out.shape}")
    act = tn.ACTIVATIONS[activation]
    hidden = tn.mul(act(tn.matmul(u, p.w_gate)), tn.matmul(u, p.w_in))
    return tn.matmul(hidden, p.w_out)


@dataclass
class RouteOptions:
    """Inference-time overrides used by the specialization probes."""

    k_routed: int | None = None
    mask_top: int = 0
    disable_shared: bool = False


def moe_forward(
    u: Tensor,
    cfg: MoEConfig,
    params: ExpertParams,
    router: Router,
    mask=None,
    *,
    residual: Tensor | None = None,
    options: RouteOptions | None = None,
) -> tuple[Tensor, RoutingDecision | None]:
    """Shared experts + gate-weighted routed experts + residual.

    Only the experts a token selected are evaluated on that token. ``residual``
    defaults to ``u``; a pre-norm block passes the un-normalised stream.
    """
    opts = options or RouteOptions()
    if u.ndim != 2 or u.shape[1] != cfg.d:
        raise DimensionError(f"moe_forward: expected [T, {cfg.d}] input, got {u.shape}")
    T = u.shape[0]
    h = u if residual is None else residual
    if not opts.disable_shared:
        for p in params.shared:
            h = tn.add(h, expert_ffn(u, p, cfg.activation))

    k_routed = cfg.k_routed if opts.k_routed is None else opts.k_routed
    if opts.disable_shared and opts.k_routed is None:
        k_routed += cfg.K_s
    if cfg.n_routed == 0:
        return h, None

    s = compute_affinities(u, router)
    if opts.mask_top:
        top = np.argsort(-s.data, axis=1, kind="stable")[:, :opts.mask_top]
        extra = np.zeros(s.shape, dtype=bool)
        np.put_along_axis(extra, top, True, axis=1)
        base = _normalize_mask(mask, s.shape)
        mask = extra if base is None else (extra | base)
    decision = route_topk(s, k_routed, mask, renormalize=cfg.renormalize_gates)
    if k_routed == 0:
        return h, decision

    rows_all, contribs = [], []
    token_idx = np.repeat(np.arange(T), k_routed)
    flat_sel = decision.selected.reshape(-1)
    for i in np.unique(flat_sel):
        rows = token_idx[flat_sel == i]
        y = expert_ffn(tn.take(u, rows), params.routed[i], cfg.activation)
        gate = tn.reshape(tn.take(decision.g, (rows, np.full(rows.shape, i))), (rows.size, 1))
        contribs.append(tn.mul(y, gate))
        rows_all.append(rows)
    routed = tn.index_add((T, cfg.d), np.concatenate(rows_all), tn.concat(contribs, axis=0))
    return tn.add(h, routed), decision


# ---------------------------------------------------------------- accounting

def ffn_param_count(d: int, inner: int) -> int:
    return 3 * d * inner


def count_params(cfg: MoEConfig) -> dict:
    """Exact parameter counts of one MoE layer, derived from tensor shapes."""
    one = ffn_param_count(cfg.d, cfg.expert_inner)
    total_expert = (cfg.K_s + cfg.n_routed) * one
    activated_expert = (cfg.K_s + cfg.k_routed) * one
    router = cfg.n_routed * cfg.d
    standard = ffn_param_count(cfg.d, cfg.base_ffn_inner) if cfg.base_ffn_inner else None
    out = {
        "expert_size": one,
        "total_expert": total_expert,
        "activated_expert": activated_expert,
        "router": router,
        "totals": {"total": total_expert + router, "activated": activated_expert + router},
        "standard_ffn": standard,
    }
    return out


def combination_count(n_routed: int, k_activated: int) -> int:
    """Number of distinct expert subsets of size ``k_activated`` (exact)."""
    if not 0 <= k_activated <= n_routed:
        raise ValueError(f"combination_count needs 0 <= k <= n, got n={n_routed}, k={k_activated}")
    return math.comb(n_routed, k_activated)
