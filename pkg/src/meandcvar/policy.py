"""Shared-weight feedback policy and the self-financing wealth recursion.

Portfolios are expressed as proportions ``w`` of current wealth with the
risk-free asset at index 0, so ``1'w = 1`` always holds and a single network
(weights shared across dates) maps ``(V_n / V_0, n / N)`` to ``w_{n+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .market import MarketParams, ReturnBatch, simulate_returns
from .neural import DTYPE, Mlp, MlpSpec, softmax_project

# paper relative-constraint bounds, cash first
RC_LOWER = (-1.0, -1.0, -1.0, -1.0, -1.0)
RC_UPPER = (1000.0, 0.4, 0.3, 0.4, 1.0)

_KIND_ALIASES = {"LO": "long_only", "RC": "box", "NC": "unconstrained"}


@dataclass(frozen=True)
class ConstraintSet:
    """Admissible portfolio proportions.

    ``long_only`` is the simplex, ``box`` the capped simplex
    ``{1'w = 1, lower <= w <= upper}`` (the paper RC bounds when none are
    given), ``unconstrained`` the budget hyperplane with cash as the residual.
    """

    kind: str = "long_only"
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind, self.kind)
        if kind not in ("long_only", "box", "unconstrained"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.kind == "box" and self.lower is None and self.upper is None:
            object.__setattr__(self, "lower", RC_LOWER)
            object.__setattr__(self, "upper", RC_UPPER)
        if kind == "box":
            if self.lower is None or self.upper is None:
                raise ValueError("box constraints need lower and upper bounds")
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValueError("lower bound exceeds upper bound")
            if lo.sum() > 1 or hi.sum() < 1:
                raise ValueError("box does not intersect the budget hyperplane")
            object.__setattr__(self, "lower", tuple(lo))
            object.__setattr__(self, "upper", tuple(hi))

    @classmethod
    def from_label(cls, label: str, dim: int = 4) -> "ConstraintSet":
        """``LO``, ``NC`` or ``RC`` (the paper bounds, which need ``dim == 4``)."""
        label = label.upper()
        if label == "RC":
            if dim != len(RC_LOWER) - 1:
                raise ValueError("RC bounds are defined for four risky assets")
            return cls("box", RC_LOWER, RC_UPPER)
        return cls(label)

    @property
    def label(self) -> str:
        return {v: k for k, v in _KIND_ALIASES.items()}[self.kind]

    def project(self, raw: torch.Tensor) -> torch.Tensor:
        if self.kind == "long_only":
            return softmax_project(raw)
        if self.kind == "unconstrained":
            return residual_cash(raw)
        return capped_simplex_project(raw, self.lower, self.upper)


def residual_cash(raw: torch.Tensor) -> torch.Tensor:
    """Take the risky proportions from ``raw[..., 1:]``; cash absorbs the rest."""
    risky = raw[..., 1:]
    cash = 1.0 - risky.sum(dim=-1, keepdim=True)
    return torch.cat([cash, risky], dim=-1)


def capped_simplex_project(y: torch.Tensor, lower, upper, n_iter: int = 100,
                           total: float = 1.0) -> torch.Tensor:
    """Euclidean projection of each row of ``y`` onto ``{1'w = total, l <= w <= u}``.

    The solution is ``clip(y - tau, l, u)`` with ``tau`` fixing the budget.
    ``tau`` is located by bisection without tracking gradients and then
    reattached to the graph through its exact derivative
    ``d tau / d y_i = 1 / |free|`` on the unclipped coordinates.
    """
    lo = torch.as_tensor(lower, dtype=y.dtype)
    hi = torch.as_tensor(upper, dtype=y.dtype)
    with torch.no_grad():
        yd = y.detach()
        hi_b = torch.clamp(hi, max=1e12)
        a = (yd - hi_b).min(dim=-1, keepdim=True).values
        b = (yd - lo).max(dim=-1, keepdim=True).values
        for _ in range(n_iter):
            mid = 0.5 * (a + b)
            mass = torch.minimum(torch.maximum(yd - mid, lo), hi).sum(dim=-1, keepdim=True)
            a = torch.where(mass > total, mid, a)
            b = torch.where(mass > total, b, mid)
        tau = 0.5 * (a + b)
        shifted = yd - tau
        free = (shifted > lo) & (shifted < hi)
        n_free = free.sum(dim=-1, keepdim=True)
        clipped_sum = torch.where(free, 0.0, torch.minimum(torch.maximum(shifted, lo), hi)).sum(
            dim=-1, keepdim=True)
        free_sum = torch.where(free, yd, 0.0).sum(dim=-1, keepdim=True)
        exact = (free_sum + clipped_sum - total) / n_free.clamp(min=1)
        tau = torch.where(n_free > 0, exact, tau)
    free_y = torch.where(free, y, 0.0).sum(dim=-1, keepdim=True)
    tau = tau + (free_y - free_y.detach()) / n_free.clamp(min=1)
    return torch.minimum(torch.maximum(y - tau, lo), hi)


def make_features(V_n, n: int, N: int, V_0: float, log_prices=None) -> torch.Tensor:
    """Network input ``(V_n / V_0, n / N)``, optionally followed by log prices."""
    V_n = torch.as_tensor(V_n, dtype=DTYPE)
    scaled = (V_n / V_0).unsqueeze(-1)
    time = torch.full_like(scaled, n / N)
    parts = [scaled, time]
    if log_prices is not None:
        parts.append(torch.as_tensor(log_prices, dtype=DTYPE))
    return torch.cat(parts, dim=-1)


def wealth_update(V_n, weights, risky_returns, riskfree_return: float):
    """``V_{n+1} = V_n (w_0 R^0 + sum_i w_i R^i)``."""
    growth = weights[..., 0] * riskfree_return + (weights[..., 1:] * risky_returns).sum(dim=-1)
    return V_n * growth


class FinancialPolicy(nn.Module):
    """One MLP evaluated at every date, followed by the constraint projection."""

    def __init__(self, n_assets: int, constraint: ConstraintSet | None = None,
                 hidden_dims=(50, 50), layer_norm: bool = False,
                 asset_features: bool = False, V_0: float = 100.0, seed: int = 0):
        super().__init__()
        self.n_assets = n_assets
        self.constraint = constraint or ConstraintSet()
        if self.constraint.kind == "box" and len(self.constraint.lower) != n_assets + 1:
            raise ValueError("box bounds must have one entry per asset plus cash")
        self.asset_features = asset_features
        self.V_0 = V_0
        in_dim = 2 + (n_assets if asset_features else 0)
        self.net = Mlp(MlpSpec(in_dim, n_assets + 1, tuple(hidden_dims), "relu", layer_norm),
                       seed=seed)

    def forward(self, V_n, n: int, N: int, log_prices=None) -> torch.Tensor:
        x = make_features(V_n, n, N, self.V_0, log_prices if self.asset_features else None)
        return self.constraint.project(self.net(x))


@dataclass
class WealthPaths:
    """Rollout output. ``ruin_step`` is the date of the first ``V <= 0`` or -1."""

    wealth: torch.Tensor
    ruined: torch.Tensor
    ruin_step: torch.Tensor
    weights: torch.Tensor | None = None

    @property
    def terminal(self) -> torch.Tensor:
        return self.wealth[:, -1]

    def terminal_numpy(self) -> np.ndarray:
        return self.terminal.detach().numpy().copy()


def rollout(policy, returns: ReturnBatch | torch.Tensor, V_0: float = 100.0,
            riskfree: float | None = None, record_weights: bool = False) -> WealthPaths:
    """Simulate wealth under ``policy`` along each scenario path.

    A path whose wealth reaches zero or below is frozen at that value for the
    remaining dates, and no gradient flows through the frozen steps.

    Parameters
    ----------
    policy : callable
        ``policy(V_n, n, N, log_prices)`` returning ``(M, d + 1)`` proportions.
    returns : ReturnBatch or tensor
        Gross risky returns of shape ``(M, N, d)``; a bare tensor needs
        ``riskfree``.
    """
    if isinstance(returns, ReturnBatch):
        riskfree = returns.riskfree
        R = torch.as_tensor(returns.risky, dtype=DTYPE)
    else:
        R = torch.as_tensor(returns, dtype=DTYPE)
        if riskfree is None:
            raise ValueError("riskfree return required with a bare tensor")
    M, N, _ = R.shape
    V = torch.full((M,), float(V_0), dtype=DTYPE)
    alive = torch.ones(M, dtype=torch.bool)
    ruin_step = torch.full((M,), -1, dtype=torch.long)
    log_prices = torch.zeros(M, R.shape[2], dtype=DTYPE)
    wealth, weights = [V], []
    for n in range(N):
        w = policy(V, n, N, log_prices)
        if record_weights:
            weights.append(w)
        V_next = wealth_update(V, w, R[:, n], riskfree)
        V = torch.where(alive, V_next, V)
        newly = alive & (V <= 0)
        ruin_step = torch.where(newly, torch.full_like(ruin_step, n + 1), ruin_step)
        alive = alive & ~newly
        wealth.append(V)
        log_prices = log_prices + torch.log(R[:, n])
    return WealthPaths(
        wealth=torch.stack(wealth, dim=1),
        ruined=~alive,
        ruin_step=ruin_step,
        weights=torch.stack(weights, dim=1) if record_weights else None,
    )


def evaluate_policy(policy, returns: ReturnBatch, V_0: float = 100.0,
                    chunk: int = 20_000) -> np.ndarray:
    """Terminal wealth on a large scenario set without building a graph."""
    out = []
    with torch.no_grad():
        for start in range(0, returns.n_paths, chunk):
            part = returns.take(slice(start, start + chunk))
            out.append(rollout(policy, part, V_0).terminal_numpy())
    return np.concatenate(out)


@dataclass(frozen=True)
class MarketProblem:
    """Terminal-wealth training problem with fresh scenarios every epoch."""

    params: MarketParams
    paths_per_epoch: int = 100_000
    seed: int = 0
    V_0: float = 100.0

    def epoch_scenarios(self, epoch: int) -> ReturnBatch:
        return simulate_returns(self.params, self.paths_per_epoch, self.seed,
                                domain="train", stream=epoch)

    def utilities(self, policy, scenarios: ReturnBatch) -> torch.Tensor:
        return rollout(policy, scenarios, self.V_0).terminal
