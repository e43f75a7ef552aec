"""Static benchmark strategies fitted by sample average approximation.

Each benchmark is a low-dimensional decision vector (portfolio weights or
underwriting exposures). It is fitted by projected subgradient steps on the same exact
penalty used for the neural policies, with the auxiliary quantile set to its
exact minimizer on the full sample at every step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from . import seeding
from .market import ReturnBatch
from .neural import DTYPE
from .penalty import penalized_loss
from .policy import ConstraintSet, capped_simplex_project
from .risk import RiskReport, empirical_var, report_outcomes

FINANCE_KINDS = ("buy_and_hold", "constant_mix")
INSURANCE_KINDS = ("constant_exposure", "fixed_time_profile")


class InfeasibleError(RuntimeError):
    pass


@dataclass
class StaticStrategy:
    """A fitted benchmark.

    ``decision`` holds portfolio weights ``(d + 1,)`` with cash first, or an
    exposure matrix ``(n_dates, n_lines)``; a constant exposure is stored with
    identical rows.
    """

    kind: str
    decision: np.ndarray
    constraint: object = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FINANCE_KINDS + INSURANCE_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        self.decision = np.asarray(self.decision, dtype=np.float64)


def _stop_index(V: torch.Tensor) -> torch.Tensor:
    """First date with ``V <= 0`` per path, or the last date if none."""
    hit = V <= 0
    first = torch.argmax(hit.to(torch.int8), dim=1)
    return torch.where(hit.any(dim=1), first, V.shape[1] - 1)


def _first_ruin_gather(V: torch.Tensor) -> torch.Tensor:
    """Terminal value of paths frozen at their first non-positive date.

    ``V`` has shape ``(M, N)`` holding ``V_1 .. V_N``.
    """
    return V.gather(1, _stop_index(V)[:, None]).squeeze(1)


def wealth_inputs(kind: str, returns: ReturnBatch) -> torch.Tensor:
    """Weight-independent tensor reused across evaluations of one strategy kind:
    cumulative price relatives for buy-and-hold, per-step returns for constant-mix."""
    R = torch.as_tensor(returns.risky, dtype=DTYPE)
    return torch.cumprod(R, dim=1) if kind == "buy_and_hold" else R


def finance_terminal_wealth(kind: str, weights: torch.Tensor, returns: ReturnBatch,
                            V_0: float = 100.0, inputs: torch.Tensor | None = None) -> torch.Tensor:
    """Terminal wealth of a static portfolio with the ruin-stop rule.

    Buy-and-hold buys ``w V_0`` worth of each asset at the start and holds the
    quantities; constant-mix restores the proportions ``w`` at every date.
    ``inputs`` is the optional precomputed :func:`wealth_inputs` tensor.
    """
    if kind not in FINANCE_KINDS:
        raise ValueError(f"{kind!r} is not a finance strategy")
    R = wealth_inputs(kind, returns) if inputs is None else inputs
    N = R.shape[1]
    w = weights.to(DTYPE)
    if w.shape[-1] != R.shape[2] + 1:
        raise ValueError("dimension mismatch between weights and scenarios")
    M, _, d = R.shape
    if kind == "buy_and_hold":
        cash = returns.riskfree ** torch.arange(1, N + 1, dtype=DTYPE)
        # locate each path's stopping date without a graph, then differentiate
        # only through the selected holdings
        with torch.no_grad():
            V = w[0] * cash + (R.reshape(M * N, d) @ w[1:]).reshape(M, N)
            stop = _stop_index(V)
        rows = torch.arange(M)
        return V_0 * (w[0] * cash[stop] + R[rows, stop] @ w[1:])
    step = w[0] * returns.riskfree + (R.reshape(M * N, d) @ w[1:]).reshape(M, N)
    return _first_ruin_gather(V_0 * torch.cumprod(step, dim=1))


def static_outcomes(strategy: StaticStrategy, scenarios, V_0: float = 100.0) -> np.ndarray:
    with torch.no_grad():
        d = torch.as_tensor(strategy.decision, dtype=DTYPE)
        if strategy.kind in FINANCE_KINDS:
            return finance_terminal_wealth(strategy.kind, d, scenarios, V_0).numpy()
        return scenarios.static_reward(d).numpy()


def evaluate_static(strategy: StaticStrategy, scenarios, kappa: float = 0.99,
                    K: float | None = None, V_0: float = 100.0) -> RiskReport:
    initial = V_0 if strategy.kind in FINANCE_KINDS else 0.0
    return report_outcomes(static_outcomes(strategy, scenarios, V_0), kappa, initial, K)


class _Admissible:
    """Free decision coordinates, their projection and the full decision.

    Portfolios are optimized over the risky weights with cash as the
    residual, so the budget never has to be enforced by the optimizer; the
    cash bounds become a band on the risky total. A constant exposure is a
    single row repeated over the dates and must fit every date's box.
    """

    def __init__(self, kind: str, constraint, shape):
        self.kind = kind
        self.shape = shape
        if kind in FINANCE_KINDS:
            cs = constraint if isinstance(constraint, ConstraintSet) else ConstraintSet(constraint)
            n = shape[0]
            if cs.kind == "long_only":
                lower, upper = np.zeros(n), np.ones(n)
            elif cs.kind == "box":
                lower, upper = np.asarray(cs.lower), np.asarray(cs.upper)
            else:
                lower, upper = np.full(n, -np.inf), np.full(n, np.inf)
            self.lower, self.upper = lower[1:], upper[1:]
            # 1 - upper_cash <= sum(risky) <= 1 - lower_cash
            self.band = (1.0 - upper[0], 1.0 - lower[0])
        else:
            lower, upper = (np.asarray(b, dtype=np.float64) for b in constraint)
            if kind == "constant_exposure":
                lower, upper = lower.max(axis=0), upper.min(axis=0)
                if np.any(lower > upper):
                    raise InfeasibleError("infeasible: date-wise boxes do not intersect")
            self.lower, self.upper = lower, upper

    def project(self, x: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.lower, dtype=DTYPE)
        hi = torch.as_tensor(self.upper, dtype=DTYPE)
        z = torch.minimum(torch.maximum(x, lo), hi)
        if self.kind in FINANCE_KINDS:
            s_lo, s_hi = self.band
            if float(z.sum()) > s_hi:
                z = capped_simplex_project(x, lo, hi, total=s_hi)
            elif float(z.sum()) < s_lo:
                z = capped_simplex_project(x, lo, hi, total=s_lo)
        return z

    def decision(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind in FINANCE_KINDS:
            return torch.cat([(1.0 - x.sum()).reshape(1), x])
        if self.kind == "constant_exposure":
            return x.expand(self.shape)
        return x

    def random_point(self, gen: np.random.Generator) -> np.ndarray:
        lo, hi = self.lower, self.upper
        if self.kind in FINANCE_KINDS:
            if np.all(np.isfinite(hi)) and np.all(lo >= 0):
                x = gen.dirichlet(np.ones(lo.size + 1))[1:]
            else:
                x = gen.normal(0.3, 0.5, lo.size)
        else:
            finite_hi = np.where(np.isfinite(hi), hi, lo + 3.0)
            x = gen.uniform(lo, finite_hi)
        return self.project(torch.as_tensor(x, dtype=DTYPE)).numpy()


def _outcome_fn(kind, scenarios, V_0):
    if kind in FINANCE_KINDS:
        inputs = wealth_inputs(kind, scenarios)
        return lambda d: finance_terminal_wealth(kind, d, scenarios, V_0, inputs)
    return scenarios.static_reward


@dataclass
class _Candidate:
    x: torch.Tensor
    mean: float
    g: float


def _descend(x0, outcome, adm, K, kappa, steps, lr, lam1, lam2, risk, feas_tol):
    """Projected subgradient steps of length ``lr_t`` along ``-grad / |grad|``.

    The step length decays geometrically to ``lr / 1000``. Plain (not
    per-coordinate adaptive) steps keep the relative size of the gradient
    components, which matters once the iterate sits on a face of the
    admissible set. Returns the final iterate and the best feasible one.
    """
    x = torch.as_tensor(x0, dtype=DTYPE).clone().requires_grad_()
    decay = (1e-3) ** (1.0 / max(steps, 1))
    best = None
    for step in range(steps + 1):
        u = outcome(adm.decision(x))
        eta = empirical_var(-u.detach().numpy(), kappa)
        # eta at the exact minimizer makes g_hat the exact sample risk value
        terms = penalized_loss(u, eta, kappa, K, lam1, lam2, centered=(risk == "dcvar"))
        if terms.g_hat <= K + feas_tol and (best is None or terms.mean_u > best.mean):
            best = _Candidate(x.detach().clone(), terms.mean_u, terms.g_hat)
        if step == steps:
            break
        (grad,) = torch.autograd.grad(terms.loss, x)
        norm = float(grad.norm())
        with torch.no_grad():
            if norm > 0:
                x -= lr * decay ** step * grad / norm
            x.copy_(adm.project(x))
    last = _Candidate(x.detach().clone(), terms.mean_u, terms.g_hat)
    return last, best


def saa_optimize(kind: str, scenarios, K: float, kappa: float = 0.99, constraint=None,
                 seed: int = 0, n_starts: int = 8, start_steps: int = 150,
                 refine_steps: int = 600, lr: float = 0.2, lambda1: float = 20.0,
                 lambda2: float = 1.0, feas_tol: float = 0.02, risk: str = "dcvar",
                 V_0: float = 100.0, initial=None) -> StaticStrategy:
    """Maximize the sample mean subject to the sample risk constraint.

    Parameters
    ----------
    kind : str
        ``buy_and_hold`` or ``constant_mix`` (``scenarios`` a ReturnBatch and
        ``constraint`` a ConstraintSet or label), or ``constant_exposure`` /
        ``fixed_time_profile`` (``scenarios`` must offer ``static_reward`` and
        ``constraint`` is a ``(lower, upper)`` pair of date-by-line arrays).
    risk : str
        ``dcvar`` constrains CVaR of the centered loss, ``cvar`` the raw CVaR.
    lambda1, lambda2 : float
        Fixed penalty weights; exactness needs ``lambda1`` above the
        constraint's Lagrange multiplier.
    initial : array, optional
        Extra starting point tried alongside the random ones.

    Each start gets a short run, the best (feasible first, then by mean) is
    refined, and the returned strategy is the best feasible candidate seen.
    """
    if risk not in ("dcvar", "cvar"):
        raise ValueError("risk must be 'dcvar' or 'cvar'")
    if kind in FINANCE_KINDS:
        shape = (scenarios.dim + 1,)
        constraint = constraint if constraint is not None else ConstraintSet()
        if isinstance(constraint, str):
            constraint = ConstraintSet.from_label(constraint, scenarios.dim)
    elif kind in INSURANCE_KINDS:
        shape = tuple(np.shape(constraint[0]))
    else:
        raise ValueError(f"unknown strategy kind {kind!r}")
    adm = _Admissible(kind, constraint, shape)
    outcome = _outcome_fn(kind, scenarios, V_0)
    gen = seeding.rng(seed, "saa")
    starts = [adm.random_point(gen) for _ in range(n_starts)]
    if initial is not None:
        init = torch.as_tensor(initial, dtype=DTYPE)
        if kind in FINANCE_KINDS:
            init = init[1:]
        elif kind == "constant_exposure" and init.ndim == 2:
            init = init[0]
        starts.insert(0, adm.project(init).numpy())

    def run(x0, steps, rate):
        return _descend(x0, outcome, adm, K, kappa, steps, rate, lambda1, lambda2, risk, feas_tol)

    def key(c):
        return (c.g <= K + feas_tol, c.mean if c.g <= K + feas_tol else -c.g)

    pool = []
    for x0 in starts:
        last, best = run(x0, start_steps, lr)
        pool += [last] + ([best] if best is not None else [])
    lead = max(pool, key=key)
    last, best = run(lead.x.numpy(), refine_steps, lr / 4)
    pool += [last] + ([best] if best is not None else [])
    winner = max(pool, key=key)
    if not winner.g <= K + feas_tol:
        raise InfeasibleError(f"infeasible: best constraint value {winner.g:.4f} > {K}")
    decision = adm.decision(winner.x).detach().numpy().copy()
    return StaticStrategy(kind, decision, constraint,
                          {"mean": winner.mean, "constraint_value": winner.g,
                           "K": K, "kappa": kappa})


def write_strategy_csv(strategies: dict[str, StaticStrategy], path) -> None:
    """Long-format dump: ``name, kind, date, component, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "kind", "date", "component", "value"])
        for name, s in strategies.items():
            dec = np.atleast_2d(s.decision)
            for t, row in enumerate(dec):
                for j, v in enumerate(row):
                    w.writerow([name, s.kind, t, j, f"{v:.10f}"])
