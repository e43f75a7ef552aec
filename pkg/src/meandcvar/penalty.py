"""Exact-penalty training of a policy under a DCVaR constraint.

The constraint ``DCVaR_kappa(U) <= K`` is handled through the auxiliary
function ``g(theta, eta) = eta + E[(-U - eta)_+] / (1 - kappa) + E[U]`` and
the penalized objective

    -E[U] + lambda1 (g - K)_+ + lambda2 (g - K)_+^2

whose duals grow along a moving average of the observed violation.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch

from . import seeding
from .neural import DTYPE, AdamW, clip_gradients
from .risk import empirical_var

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "phase", "mean_utility", "g_hat", "lambda1", "lambda2", "eta")
PHASES = ("warmup", "adaptive", "stabilization", "full_batch")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PenaltyState:
    lambda1: float = 0.5
    lambda2: float = 0.5
    rho1: float = 0.003
    rho2: float = 0.003
    ema_violation: float = 0.0
    ema_factor: float = 0.9
    lambda_cap: float = 50.0

    def __post_init__(self):
        if not (0 <= self.lambda1 <= self.lambda_cap and 0 <= self.lambda2 <= self.lambda_cap):
            raise ValueError("duals must lie in [0, lambda_cap]")
        if not 0 <= self.ema_factor < 1:
            raise ValueError("ema_factor must lie in [0, 1)")


@dataclass(frozen=True)
class PenaltyTerms:
    loss: torch.Tensor
    mean_u: float
    g_hat: float
    violation: float


def penalized_loss(utilities: torch.Tensor, eta, kappa: float, K: float,
                   lambda1: float, lambda2: float, centered: bool = True) -> PenaltyTerms:
    """Penalized objective on a batch of utilities.

    At the hinge kink ``g = K`` the zero subgradient is used, so feasible
    candidates are stationary in the penalty terms. ``centered=False``
    constrains the plain CVaR of the loss instead of its deviation.
    """
    if utilities.numel() == 0:
        raise ValueError("empty batch")
    eta = torch.as_tensor(eta, dtype=utilities.dtype)
    mean_u = utilities.mean()
    tail = torch.relu(-utilities - eta).mean() / (1.0 - kappa)
    g = eta + tail + mean_u if centered else eta + tail
    v = g - K
    hinge = torch.relu(v)
    loss = -mean_u
    if lambda1:
        loss = loss + lambda1 * hinge
    if lambda2:
        loss = loss + lambda2 * hinge ** 2
    return PenaltyTerms(loss, float(mean_u.detach()), float(g.detach()), float(v.detach()))


def dual_update(state: PenaltyState, violation: float) -> PenaltyState:
    """EMA the violation, then take projected steps on both duals."""
    v_bar = state.ema_factor * state.ema_violation + (1 - state.ema_factor) * violation
    lam1 = min(max(state.lambda1 + state.rho1 * v_bar, 0.0), state.lambda_cap)
    lam2 = min(max(state.lambda2 + state.rho2 * v_bar ** 2, 0.0), state.lambda_cap)
    return dataclasses.replace(state, lambda1=lam1, lambda2=lam2, ema_violation=v_bar)


def eta_subgradient(losses: np.ndarray, eta: float, kappa: float) -> float:
    """Minimum-norm subgradient of ``eta + E[(L - eta)_+]/(1-kappa)`` in ``eta``."""
    above = np.mean(losses > eta)
    at_or_above = np.mean(losses >= eta)
    right = 1.0 - above / (1.0 - kappa)
    left = 1.0 - at_or_above / (1.0 - kappa)
    if left <= 0.0 <= right:
        return 0.0
    return right if right < 0 else left


def eta_inner_steps(utilities, eta: float, kappa: float, n_steps: int, lr: float) -> float:
    """Subgradient descent on ``g`` in ``eta`` with the policy held fixed."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    losses = -np.asarray(utilities, dtype=np.float64)
    for _ in range(n_steps):
        eta = eta - lr * eta_subgradient(losses, eta, kappa)
    return float(eta)


class ScenarioSet(Protocol):
    n_paths: int

    def take(self, index): ...


class Problem(Protocol):
    """What the trainer needs from a control problem."""

    def epoch_scenarios(self, epoch: int) -> ScenarioSet: ...

    def utilities(self, policy, scenarios: ScenarioSet) -> torch.Tensor: ...


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule and penalty hyperparameters.

    ``phase_fractions`` are (warmup, adaptive, stabilization, full_batch);
    epochs left over after rounding go to stabilization.
    """

    K: float = 30.0
    kappa: float = 0.99
    epochs: int = 200
    batch_size: int = 5000
    phase_fractions: tuple[float, float, float, float] = (0.03, 0.70, 0.20, 0.07)
    delta: float = 0.0
    eta_inner_steps: int = 0
    eta_inner_lr: float = 0.05
    eta_init: float | None = None
    lr: float = 1e-3
    eta_lr: float = 1e-4
    weight_decay: float = 0.0
    lr_decay: float = 0.995
    clip_norm: float = 10.0
    full_batch_steps: int = 1
    full_batch_chunk: int = 20_000
    lambda_init: float = 0.5
    rho: float = 0.003
    lambda_cap: float = 50.0
    ema_factor: float = 0.9
    utility: str = "linear"
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.phase_fractions)
        if len(fr) != 4 or any(f < 0 for f in fr) or sum(fr) > 1 + 1e-12:
            raise ValueError("phase fractions must be four nonnegative numbers summing to <= 1")
        object.__setattr__(self, "phase_fractions", fr)
        if math.isnan(self.K) or self.K == -math.inf:
            raise ValueError("K must be a number (+inf allowed for no constraint)")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")
        if self.utility != "linear":
            raise ValueError(f"unsupported utility {self.utility!r}")

    @property
    def target(self) -> float:
        """Threshold actually trained against (tightened by ``delta``)."""
        return self.K - self.delta

    def phase_lengths(self) -> tuple[int, int, int, int]:
        warm, adapt, _, full = (round(f * self.epochs) for f in self.phase_fractions)
        warm = min(warm, self.epochs)
        adapt = min(adapt, self.epochs - warm)
        full = min(full, self.epochs - warm - adapt)
        return warm, adapt, self.epochs - warm - adapt - full, full

    def phase_of(self, epoch: int) -> str:
        bounds = np.cumsum(self.phase_lengths())
        return PHASES[int(np.searchsorted(bounds, epoch, side="right"))]

    def initial_state(self) -> PenaltyState:
        return PenaltyState(self.lambda_init, self.lambda_init, self.rho, self.rho,
                            0.0, self.ema_factor, self.lambda_cap)


@dataclass
class TrainResult:
    policy: torch.nn.Module
    eta: float
    state: PenaltyState
    history: list[dict] = field(default_factory=list)


def _full_batch_step(policy, problem, scen, eta: torch.Tensor, cfg: TrainConfig,
                     state: PenaltyState, opt: AdamW) -> PenaltyTerms:
    """One exact gradient step on the whole epoch sample, in chunks.

    The first pass evaluates the utilities without a graph to get the
    batch-level quantities. Because the loss depends on each utility only
    through averages, its gradient is ``sum_i c_i du_i / M`` with per-path
    coefficients known after the first pass; the second pass accumulates it
    chunk by chunk.
    """
    M = scen.n_paths
    chunks = [slice(s, s + cfg.full_batch_chunk) for s in range(0, M, cfg.full_batch_chunk)]
    with torch.no_grad():
        u_all = torch.cat([problem.utilities(policy, scen.take(c)) for c in chunks])
    if cfg.eta_inner_steps:
        eta.data.fill_(eta_inner_steps(u_all.numpy(), float(eta.detach()), cfg.kappa,
                                       cfg.eta_inner_steps, cfg.eta_inner_lr))
    terms = penalized_loss(u_all, eta.detach(), cfg.kappa, cfg.target, state.lambda1, state.lambda2)
    if not math.isfinite(float(terms.loss.detach())):
        raise TrainingDivergedError("non-finite loss")
    v = terms.violation
    slope = (state.lambda1 + 2 * state.lambda2 * v) if v > 0 else 0.0
    in_tail = (-u_all > eta.detach()).to(DTYPE)
    coef = (-1.0 + slope * (1.0 - in_tail / (1.0 - cfg.kappa))) / M
    opt.zero_grad()
    for c in chunks:
        u = problem.utilities(policy, scen.take(c))
        (coef[c] * u).sum().backward()
    eta.grad = torch.full_like(eta, slope * (1.0 - float(in_tail.mean()) / (1.0 - cfg.kappa)))
    clip_gradients(policy.parameters(), cfg.clip_norm)
    opt.step()
    return terms


def train(policy: torch.nn.Module, problem: Problem, config: TrainConfig) -> TrainResult:
    """Run the warmup / adaptive / stabilization / full-batch schedule.

    Duals move only during the adaptive phase. ``history`` holds one row per
    epoch with the minibatch-averaged mean utility and ``g`` estimate.
    """
    cfg = config
    state = cfg.initial_state()
    if cfg.epochs == 0:
        return TrainResult(policy, 0.0 if cfg.eta_init is None else cfg.eta_init, state, [])

    first = problem.epoch_scenarios(0)
    if cfg.eta_init is None:
        with torch.no_grad():
            u0 = problem.utilities(policy, first.take(slice(0, cfg.batch_size)))
        eta0 = empirical_var(-u0.numpy(), cfg.kappa)
    else:
        eta0 = cfg.eta_init
    eta = torch.nn.Parameter(torch.tensor(float(eta0), dtype=DTYPE))
    opt = AdamW([{"params": list(policy.parameters()), "lr": cfg.lr},
                 {"params": [eta], "lr": cfg.eta_lr}],
                weight_decay=cfg.weight_decay, decay_rate=cfg.lr_decay)
    # weight decay applies to the network only
    opt.opt.param_groups[1]["weight_decay"] = 0.0

    history = []
    for epoch in range(cfg.epochs):
        phase = cfg.phase_of(epoch)
        scen = first if epoch == 0 else problem.epoch_scenarios(epoch)
        mean_us, gs = [], []
        if phase == "full_batch":
            for _ in range(cfg.full_batch_steps):
                terms = _full_batch_step(policy, problem, scen, eta, cfg, state, opt)
                mean_us.append(terms.mean_u)
                gs.append(terms.g_hat)
        else:
            order = seeding.rng(cfg.seed, "train", 1, epoch).permutation(scen.n_paths)
            for start in range(0, scen.n_paths, cfg.batch_size):
                batch = scen.take(np.sort(order[start:start + cfg.batch_size]))
                u = problem.utilities(policy, batch)
                if cfg.eta_inner_steps:
                    eta.data.fill_(eta_inner_steps(u.detach().numpy(), float(eta.detach()), cfg.kappa,
                                                   cfg.eta_inner_steps, cfg.eta_inner_lr))
                terms = penalized_loss(u, eta, cfg.kappa, cfg.target, state.lambda1, state.lambda2)
                if not math.isfinite(float(terms.loss.detach())):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
                opt.zero_grad()
                terms.loss.backward()
                clip_gradients(policy.parameters(), cfg.clip_norm)
                opt.step()
                if phase == "adaptive" and math.isfinite(cfg.target):
                    state = dual_update(state, terms.violation)
                mean_us.append(terms.mean_u)
                gs.append(terms.g_hat)
        opt.decay()
        row = {
            "epoch": epoch,
            "phase": phase,
            "mean_utility": float(np.mean(mean_us)),
            "g_hat": float(np.mean(gs)),
            "lambda1": state.lambda1,
            "lambda2": state.lambda2,
            "eta": float(eta.detach()),
        }
        history.append(row)
        log.debug("epoch %d %s mean=%.4f g=%.4f", epoch, phase, row["mean_utility"], row["g_hat"])
    return TrainResult(policy, float(eta.detach()), state, history)


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"], row["phase"]]
                       + [f"{row[k]:.10f}" for k in HISTORY_COLUMNS[2:]])
