"""Empirical VaR / CVaR / DCVaR kernels and the Rockafellar-Uryasev lift.

Conventions
-----------
All functions act on *losses* ``L = -U(outcome)``. The quantile is the
left-continuous generalized inverse of the empirical CDF, and the CVaR
tail splits the atom sitting at the quantile fractionally, so that

    min_eta  eta + E[(L - eta)_+] / (1 - kappa)  ==  CVaR_kappa(L)

holds exactly on any discrete sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# slack on cumulative-weight comparisons (weights come from float sums)
_CUM_TOL = 1e-12


class EmptySampleError(ValueError):
    pass


@dataclass(frozen=True)
class LossSample:
    """Realized losses with optional probability weights (uniform if omitted)."""

    values: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size == 0:
            raise EmptySampleError("empty sample")
        object.__setattr__(self, "values", values)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
            if w.shape != values.shape:
                raise ValueError("weights and values differ in length")
            if np.any(w <= 0):
                raise ValueError("weights must be strictly positive")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must sum to 1")
            object.__setattr__(self, "weights", w)

    @classmethod
    def from_outcomes(cls, outcomes, weights=None) -> "LossSample":
        """Losses of a sample of outcomes (utility values): ``L = -outcome``."""
        return cls(-np.asarray(outcomes, dtype=np.float64), weights)

    def __len__(self) -> int:
        return self.values.size

    @property
    def probs(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.values.size, 1.0 / self.values.size)
        return self.weights

    def mean(self) -> float:
        if self.weights is None:
            return float(self.values.mean())
        return float(self.values @ self.weights)

    def std(self) -> float:
        m = self.mean()
        var = float(self.probs @ (self.values - m) ** 2)
        return math.sqrt(max(var, 0.0))

    def sorted(self) -> tuple[np.ndarray, np.ndarray]:
        """Values in ascending order with their cumulative weights."""
        order = np.argsort(self.values, kind="stable")
        return self.values[order], np.cumsum(self.probs[order])


@dataclass(frozen=True)
class RiskLevel:
    kappa: float

    def __post_init__(self):
        if not (0.0 < self.kappa < 1.0):
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")


def _as_sample(sample) -> LossSample:
    return sample if isinstance(sample, LossSample) else LossSample(sample)


def _as_level(level) -> RiskLevel:
    return level if isinstance(level, RiskLevel) else RiskLevel(float(level))


def empirical_var(sample, level) -> float:
    """Smallest loss ``M`` with ``P(L <= M) >= kappa``."""
    sample, kappa = _as_sample(sample), _as_level(level).kappa
    if sample.weights is None:
        # equal weights: the answer is an order statistic, no full sort needed
        n = sample.values.size
        k = min(max(math.ceil(n * kappa - 1e-9) - 1, 0), n - 1)
        return float(np.partition(sample.values, k)[k])
    xs, cum = sample.sorted()
    idx = int(np.searchsorted(cum, kappa - _CUM_TOL, side="left"))
    return float(xs[min(idx, xs.size - 1)])


def empirical_cvar(sample, level) -> float:
    """Average of ``VaR_k`` over ``k`` in ``(kappa, 1)``, integrated exactly.

    Each sorted atom contributes the part of its probability mass that lies
    above ``kappa``; the atom straddling ``kappa`` contributes fractionally.
    """
    sample, kappa = _as_sample(sample), _as_level(level).kappa
    xs, cum = sample.sorted()
    prev = np.concatenate(([0.0], cum[:-1]))
    # probability mass of each atom lying in (kappa, 1]
    tail_mass = np.clip(cum - np.maximum(prev, kappa), 0.0, None)
    tail_mass = np.minimum(tail_mass, cum - prev)
    total = tail_mass.sum()
    if total <= 0.0:
        # kappa within rounding of 1: the tail is the largest atom
        return float(xs[-1])
    return float(tail_mass @ xs / total)


def empirical_dcvar(sample, level) -> float:
    """``CVaR_kappa(L) - E[L]`` (CVaR of the centered loss)."""
    sample = _as_sample(sample)
    return empirical_cvar(sample, level) - sample.mean()


def dcvar_aux(sample, eta: float, level) -> float:
    """Auxiliary function ``eta + E[(L - eta)_+]/(1 - kappa) - E[L]``.

    Its minimum over ``eta`` is the DCVaR; this is the form differentiated
    during training.
    """
    sample, kappa = _as_sample(sample), _as_level(level).kappa
    excess = np.maximum(sample.values - eta, 0.0)
    return float(eta + (sample.probs @ excess) / (1.0 - kappa) - sample.mean())


def minimize_eta(sample, level) -> tuple[float, float]:
    """Smallest minimizer of :func:`dcvar_aux` in ``eta`` and the minimum value.

    The function is convex and piecewise linear with kinks at the sample
    points; its right derivative at a point ``x`` is ``1 - P(L > x)/(1-kappa)``.
    The smallest minimizer is the first sample point where that derivative
    becomes nonnegative.
    """
    sample, kappa = _as_sample(sample), _as_level(level).kappa
    xs, cum = sample.sorted()
    right_slope = 1.0 - (1.0 - cum) / (1.0 - kappa)
    idx = int(np.argmax(right_slope >= -_CUM_TOL / (1.0 - kappa)))
    eta_star = float(xs[idx])
    return eta_star, dcvar_aux(sample, eta_star, kappa)


def calibrated_threshold(K: float, mean_utility: float) -> float:
    """DCVaR threshold matching a CVaR threshold ``K`` at an active optimum."""
    return K + mean_utility


@dataclass(frozen=True)
class RiskReport:
    """Summary of a terminal-outcome sample.

    ``mean`` and ``std`` refer to the outcome (wealth or reward); the risk
    columns refer to the loss ``-outcome``. ``dcvar_k`` is recomputed at the
    re-minimized ``eta`` rather than read off a trained auxiliary variable.
    ``sharpe`` is ``(mean - initial_value) / std`` and NaN when ``std == 0``.
    """

    mean: float
    std: float
    var_k: float
    cvar_k: float
    dcvar_k: float
    sharpe: float
    constraint_gap: float
    kappa: float = 0.99
    n: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def sharpe_ratio(mean: float, std: float, initial_value: float) -> float:
    if std <= 0.0:
        return float("nan")
    return (mean - initial_value) / std


def build_risk_report(sample, level, initial_value: float = 0.0,
                      K: float | None = None) -> RiskReport:
    sample, level = _as_sample(sample), _as_level(level)
    mean_outcome = -sample.mean()
    std = sample.std()
    # an exactly constant sample can still show float noise in the variance
    if std <= 1e-12 * max(1.0, abs(mean_outcome)):
        std = 0.0
    var_k = empirical_var(sample, level)
    cvar_k = empirical_cvar(sample, level)
    dcvar_k = cvar_k - sample.mean()
    gap = float("nan") if K is None else dcvar_k - K
    return RiskReport(
        mean=mean_outcome,
        std=std,
        var_k=var_k,
        cvar_k=cvar_k,
        dcvar_k=dcvar_k,
        sharpe=sharpe_ratio(mean_outcome, std, initial_value),
        constraint_gap=gap,
        kappa=level.kappa,
        n=len(sample),
    )


def report_outcomes(outcomes, kappa: float = 0.99, initial_value: float = 0.0,
                    K: float | None = None) -> RiskReport:
    """Shorthand for a report on an outcome (not loss) array."""
    return build_risk_report(LossSample.from_outcomes(outcomes), kappa,
                             initial_value, K)
