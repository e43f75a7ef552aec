"""Recurrent underwriting policy for the multi-line insurance problem.

At each decision date ``s = 0..n_ctrl-1`` the policy chooses exposures
``alpha_s = (alpha^M, alpha^L, alpha^C)`` for the cohort written at ``s``.
It sees only results realised strictly before ``s``. The objective is the
discounted reward ``R = sum_j v^{j+1} sum_line Y_j``, which is linear in
the exposures. Training reuses the generic penalty trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..neural import DTYPE, GruCell, GruSpec, Mlp, MlpSpec, box_project
from ..penalty import TrainConfig, TrainResult, train
from ..risk import RiskReport, report_outcomes
from .engine import InsuranceModel, LobProfitCube, be_tables, simulate_cube

BOUNDS_KINDS = ("LO", "CSTB", "TDB")
CSTB_LOWER = (0.6, 0.9, 0.6)
CSTB_UPPER = (30.0, 10.0, 5.0)
TDB_LOWER = (
    (0.8, 0.8, 0.6),
    (0.6, 0.6, 0.4),
    (0.4, 0.4, 0.2),
    (0.2, 0.2, 0.0),
    (0.0, 0.0, 0.0),
)
TDB_UPPER = tuple((u, u, u) for u in (2.0, 4.0, 6.0, 8.0, 10.0))
IN_FORCE = {"IF00": (0.0, 0.0), "IF11": (1.0, 1.0)}


@dataclass(frozen=True)
class BoundsSchedule:
    """Per-date, per-line exposure box, arrays of shape ``(n_ctrl, 3)``."""

    kind: str
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 2 or lo.shape[1] != 3:
            raise ValueError("bounds must be (n_ctrl, 3) arrays of equal shape")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_label(cls, label: str, n_ctrl: int = 5) -> "BoundsSchedule":
        label = label.upper()
        if label == "LO":
            return cls(label, np.zeros((n_ctrl, 3)), np.full((n_ctrl, 3), np.inf))
        if label == "CSTB":
            return cls(label, np.tile(CSTB_LOWER, (n_ctrl, 1)), np.tile(CSTB_UPPER, (n_ctrl, 1)))
        if label == "TDB":
            if n_ctrl != len(TDB_LOWER):
                raise ValueError(f"TDB bounds are defined for {len(TDB_LOWER)} dates")
            return cls(label, np.array(TDB_LOWER), np.array(TDB_UPPER))
        raise ValueError(f"unknown bounds kind {label!r}")

    @property
    def n_ctrl(self) -> int:
        return self.lower.shape[0]

    def pair(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lower.copy(), self.upper.copy()


def bounds_at(schedule: BoundsSchedule, s: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= s < schedule.n_ctrl:
        raise IndexError(f"date {s} outside 0..{schedule.n_ctrl - 1}")
    return schedule.lower[s].copy(), schedule.upper[s].copy()


def inverse_box_project(alpha, lower, upper, margin: float = 1e-6) -> np.ndarray:
    """Raw input mapped by :func:`box_project` to (a clipped) ``alpha``."""
    alpha, lower, upper = (np.asarray(a, dtype=float) for a in (alpha, lower, upper))
    unbounded = np.isinf(upper)
    excess = np.maximum(alpha - lower, margin)
    out = np.where(unbounded, np.log(np.expm1(np.minimum(excess, 700.0))), 0.0)
    width = np.where(unbounded, 1.0, upper - lower)
    frac = np.clip((alpha - lower) / width, margin, 1 - margin)
    return np.where(unbounded, out, np.log(frac) - np.log1p(-frac))


# -------------------------------------------------------------- scenario sets


@dataclass
class InsuranceScenarios:
    """Reduced profit cube holding exactly what the rollout needs.

    ``partial[m, k, line, s]`` is the discounted result of cohort ``k`` per
    unit exposure realised at calendar dates ``< s`` (``s < n_ctrl``) and
    ``partial[..., n_ctrl]`` the full discounted total. ``survival[m, k,
    life line, s]`` is the surviving fraction of cohort ``k`` at date ``s``
    (zero for cohorts not yet written).
    """

    partial: np.ndarray
    survival: np.ndarray
    n_inforce: int
    n_ctrl: int
    alpha_if: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha_if = np.asarray(self.alpha_if, dtype=float).reshape(self.n_inforce, 3)
        M, n_coh, lines, cuts = self.partial.shape
        if n_coh != self.n_inforce + self.n_ctrl or lines != 3 or cuts != self.n_ctrl + 1:
            raise ValueError("partial sums do not match the cohort layout")
        if self.survival.shape != (M, n_coh, 2, self.n_ctrl):
            raise ValueError("survival fractions do not match the cohort layout")
        self._P = torch.as_tensor(self.partial, dtype=DTYPE)
        self._S = torch.as_tensor(self.survival, dtype=DTYPE)

    @property
    def n_paths(self) -> int:
        return self.partial.shape[0]

    @property
    def n_cohorts(self) -> int:
        return self.partial.shape[1]

    def take(self, index) -> "InsuranceScenarios":
        return InsuranceScenarios(self.partial[index], self.survival[index], self.n_inforce,
                                  self.n_ctrl, self.alpha_if, dict(self.meta))

    def with_inforce(self, alpha_if) -> "InsuranceScenarios":
        return InsuranceScenarios(self.partial, self.survival, self.n_inforce, self.n_ctrl,
                                  alpha_if, dict(self.meta))

    def inforce_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.alpha_if, dtype=DTYPE)

    def totals(self) -> torch.Tensor:
        """``(M, n_cohorts, 3)`` discounted totals per unit exposure."""
        return self._P[..., -1]

    def static_reward(self, alpha) -> torch.Tensor:
        """Reward of a deterministic ``(n_ctrl, 3)`` exposure profile (differentiable)."""
        alpha = torch.as_tensor(alpha, dtype=DTYPE)
        if alpha.shape != (self.n_ctrl, 3):
            raise ValueError(f"profile must have shape ({self.n_ctrl}, 3)")
        full = torch.cat([self.inforce_tensor(), alpha], dim=0)
        return (self.totals() * full).sum(dim=(1, 2))

    @classmethod
    def from_cube(cls, cube: LobProfitCube, alpha_if=None) -> "InsuranceScenarios":
        n_ctrl, n_inf = cube.n_ctrl, cube.n_inforce
        disc = cube.v ** (cube.cohort_calendar() + 1.0)
        realised = cube.cohort_calendar()
        vals = cube.X * disc[None, :, None, :]
        vals = np.where(realised[None, :, None, :] >= 0, vals, 0.0)
        partial = np.empty(cube.X.shape[:3] + (n_ctrl + 1,))
        for s in range(n_ctrl):
            mask = realised < s
            partial[..., s] = (vals * mask[None, :, None, :]).sum(axis=-1)
        partial[..., n_ctrl] = vals.sum(axis=-1)
        survival = np.zeros(cube.X.shape[:2] + (2, n_ctrl))
        for j in range(cube.n_cohorts):
            k = j - n_inf
            for s in range(n_ctrl):
                if k < s:
                    survival[:, j, :, s] = cube.survival[:, j, :, s - k]
        a_if = cube.alpha_if if alpha_if is None else alpha_if
        return cls(partial, survival, n_inf, n_ctrl, a_if, dict(cube.meta, factors=None))


def build_scenarios(model: InsuranceModel, n_paths: int, seed: int, stream: int = 0,
                    n_inforce: int = 1, n_ctrl: int = 5, alpha_if=None,
                    chunk_size: int = 20_000) -> InsuranceScenarios:
    """Simulate a large scenario set chunk by chunk without keeping the cube."""
    tables = be_tables(model)
    parts = []
    for c, start in enumerate(range(0, n_paths, chunk_size)):
        m = min(chunk_size, n_paths - start)
        cube = simulate_cube(model, m, seed, n_inforce, n_ctrl, stream=stream,
                             tables=tables, chunk=c)
        parts.append(InsuranceScenarios.from_cube(cube, np.zeros((n_inforce, 3))))
    a_if = np.zeros((n_inforce, 3)) if alpha_if is None else alpha_if
    return InsuranceScenarios(np.concatenate([p.partial for p in parts]),
                              np.concatenate([p.survival for p in parts]),
                              n_inforce, n_ctrl, a_if,
                              {"seed": seed, "stream": stream, "n_paths": n_paths})


def inforce_matrix(label_or_pair, n_inforce: int = 1) -> np.ndarray:
    """``(n_inforce, 3)`` legacy exposures; casualty in force is always zero."""
    pair = IN_FORCE[label_or_pair] if isinstance(label_or_pair, str) else label_or_pair
    return np.tile([pair[0], pair[1], 0.0], (n_inforce, 1))


# -------------------------------------------------------------------- policy


@dataclass(frozen=True)
class FeatureLayout:
    """``[s / n_ctrl, cum_reward / scale, alpha_{s-1} / scale (3),
    exposure_M (A), exposure_L (A), (mask (A))]``."""

    n_cohorts: int
    n_ctrl: int
    mask: bool = False
    scale: float = 10.0

    @property
    def dim(self) -> int:
        return 5 + (3 if self.mask else 2) * self.n_cohorts


def make_insurance_features(layout: FeatureLayout, s: int, cum_reward, prev_alpha,
                            exposures, active=None) -> torch.Tensor:
    """Assemble the feature vector at date ``s``.

    Parameters
    ----------
    cum_reward : (M,) discounted result realised before ``s``
    prev_alpha : (M, 3) previous decision (zeros at ``s = 0``)
    exposures : (M, A, 2) exposure times surviving fraction per cohort
    active : (M, A) cohort indicator, used only with ``layout.mask``
    """
    M = cum_reward.shape[0]
    parts = [torch.full((M, 1), s / layout.n_ctrl, dtype=DTYPE),
             (cum_reward / layout.scale).unsqueeze(-1),
             prev_alpha / layout.scale,
             exposures[..., 0] / layout.scale,
             exposures[..., 1] / layout.scale]
    if layout.mask:
        parts.append(active.to(DTYPE))
    return torch.cat(parts, dim=-1)


class InsurancePolicy(nn.Module):
    """GRU cell, residual MLP head, per-date offset and smooth box projection.

    The per-date offset ``date_bias`` lets the policy start exactly at a
    given deterministic profile (see :meth:`warm_start`). Inputs pass through
    a fixed per-date standardization, identity until
    :meth:`fit_feature_scaling` is called.
    """

    def __init__(self, n_cohorts: int, bounds: BoundsSchedule, hidden: int = 16,
                 head_dims=(32, 32), mask: bool = False, feature_scale: float = 10.0,
                 seed: int = 0):
        super().__init__()
        self.bounds = bounds
        self.layout = FeatureLayout(n_cohorts, bounds.n_ctrl, mask, feature_scale)
        self.cell = GruCell(GruSpec(self.layout.dim, hidden), seed=seed, stream=0)
        self.head = Mlp(MlpSpec(hidden, 3, tuple(head_dims), "relu", residual=True),
                        seed=seed, stream=1)
        self.date_bias = nn.Parameter(torch.zeros(bounds.n_ctrl, 3, dtype=DTYPE))
        self.register_buffer("feat_shift", torch.zeros(bounds.n_ctrl, self.layout.dim,
                                                       dtype=DTYPE))
        self.register_buffer("feat_scale", torch.ones(bounds.n_ctrl, self.layout.dim,
                                                      dtype=DTYPE))

    @property
    def n_ctrl(self) -> int:
        return self.bounds.n_ctrl

    def initial_state(self, batch: int) -> torch.Tensor:
        return self.cell.initial_state(batch)

    def step(self, h: torch.Tensor, x: torch.Tensor, s: int):
        h = self.cell(h, (x - self.feat_shift[s]) / self.feat_scale[s])
        raw = self.head(h) + self.date_bias[s]
        lower, upper = bounds_at(self.bounds, s)
        return h, box_project(raw, lower, upper)

    def warm_start(self, profile) -> None:
        """Zero the head's output layer and set the offsets so the policy emits ``profile``."""
        profile = np.asarray(profile, dtype=float).reshape(self.n_ctrl, 3)
        raw = inverse_box_project(profile, self.bounds.lower, self.bounds.upper)
        with torch.no_grad():
            self.head.weights[-1].zero_()
            self.head.biases[-1].zero_()
            self.date_bias.copy_(torch.as_tensor(raw, dtype=DTYPE))

    def fit_feature_scaling(self, scen: "InsuranceScenarios", n_paths: int = 20_000,
                            min_std: float = 1e-8) -> None:
        """Standardize each input per date using the current policy's own rollout.

        Features that are constant across paths at a date are left untouched.
        """
        trace: list[torch.Tensor] = []
        self.feat_shift.zero_()
        self.feat_scale.fill_(1.0)
        with torch.no_grad():
            rollout_insurance(self, scen.take(slice(0, n_paths)), trace)
            for s, x in enumerate(trace):
                mu, sd = x.mean(dim=0), x.std(dim=0)
                varying = sd > min_std
                self.feat_shift[s] = torch.where(varying, mu, torch.zeros_like(mu))
                self.feat_scale[s] = torch.where(varying, sd, torch.ones_like(sd))


@dataclass
class InsuranceRollout:
    reward: torch.Tensor
    decisions: torch.Tensor


def rollout_insurance(policy: InsurancePolicy, scen: InsuranceScenarios,
                      trace: list | None = None) -> InsuranceRollout:
    """Roll the policy forward over the decision dates.

    The features at ``s`` are built from ``partial[..., s]`` and
    ``survival[..., s]``, which only involve results up to calendar ``s - 1``.
    Raw feature tensors are appended to ``trace`` when one is given.
    """
    if scen.n_ctrl != policy.n_ctrl or scen.n_cohorts != policy.layout.n_cohorts:
        raise ValueError("policy and scenarios disagree on the cohort layout")
    M, n_inf = scen.n_paths, scen.n_inforce
    P, S = scen._P, scen._S
    alphas = [scen.inforce_tensor()[j].expand(M, 3) for j in range(n_inf)]
    h = policy.initial_state(M)
    prev = torch.zeros(M, 3, dtype=DTYPE)
    decisions = []
    for s in range(scen.n_ctrl):
        known = n_inf + s
        A = torch.stack(alphas, dim=1) if alphas else torch.zeros(M, 0, 3, dtype=DTYPE)
        cum = (A * P[:, :known, :, s]).sum(dim=(1, 2))
        exposures = torch.zeros(M, scen.n_cohorts, 2, dtype=DTYPE)
        if known:
            exposures = torch.cat([A[..., :2] * S[:, :known, :, s],
                                   exposures[:, known:]], dim=1)
        active = torch.zeros(M, scen.n_cohorts, dtype=DTYPE)
        active[:, :known] = 1.0
        x = make_insurance_features(policy.layout, s, cum, prev, exposures, active)
        if trace is not None:
            trace.append(x)
        h, a = policy.step(h, x, s)
        alphas.append(a)
        decisions.append(a)
        prev = a
    A = torch.stack(alphas, dim=1)
    reward = (A * P[..., -1]).sum(dim=(1, 2))
    return InsuranceRollout(reward, torch.stack(decisions, dim=1))


def evaluate_insurance_policy(policy: InsurancePolicy, scen: InsuranceScenarios,
                              chunk: int = 50_000) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, scen.n_paths, chunk):
            out.append(rollout_insurance(policy, scen.take(slice(start, start + chunk)))
                       .reward.numpy().copy())
    return np.concatenate(out)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class InsuranceProblem:
    """Fixed training sample, reused every epoch."""

    train_set: InsuranceScenarios
    K: float = 30.0
    kappa: float = 0.99

    def __post_init__(self):
        if not math.isfinite(self.K):
            raise ValueError("K must be finite")

    @property
    def n_ctrl(self) -> int:
        return self.train_set.n_ctrl

    def epoch_scenarios(self, epoch: int) -> InsuranceScenarios:
        return self.train_set

    def utilities(self, policy, scenarios: InsuranceScenarios) -> torch.Tensor:
        return rollout_insurance(policy, scenarios).reward


def default_insurance_config(**overrides) -> TrainConfig:
    """Penalty schedule for the insurance problem (frontier margin 0.3)."""
    base = dict(K=30.0, kappa=0.99, epochs=150, batch_size=25_000, delta=0.3,
                eta_inner_steps=5, eta_inner_lr=0.5, lr=3e-3, eta_lr=1e-2,
                lr_decay=0.98, lambda_init=3.0, lambda_cap=10.0, rho=0.01,
                full_batch_steps=3, full_batch_chunk=50_000)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class InsuranceTrainResult:
    policy: InsurancePolicy
    train: TrainResult
    report: RiskReport | None


def train_insurance(problem: InsuranceProblem, policy: InsurancePolicy,
                    config: TrainConfig | None = None,
                    eval_set: InsuranceScenarios | None = None) -> InsuranceTrainResult:
    """Penalty training against ``K - delta``; reports on ``eval_set`` if given."""
    cfg = config or default_insurance_config(K=problem.K, kappa=problem.kappa)
    result = train(policy, problem, cfg)
    report = None
    if eval_set is not None:
        R = evaluate_insurance_policy(policy, eval_set)
        report = report_outcomes(R, cfg.kappa, 0.0, cfg.K)
    return InsuranceTrainResult(policy, result, report)
