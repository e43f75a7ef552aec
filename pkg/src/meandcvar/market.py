"""Multidimensional Black-Scholes scenario generation.

Gross returns are drawn from the exact lognormal transition, so there is no
time-discretization bias whatever the number of rebalancing dates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import seeding

# paths per independent random stream; fixing it makes path i identical
# whatever the batch size or the order in which blocks are generated
BLOCK_SIZE = 4096

PAPER_MU = (0.09, 0.15, 0.21, 0.12)
PAPER_VOLS = (0.08, 0.12, 0.15, 0.08)
PAPER_CORR = (
    (1.0, 0.2, -0.3, 0.0),
    (0.2, 1.0, 0.15, -0.2),
    (-0.3, 0.15, 1.0, 0.3),
    (0.0, -0.2, 0.3, 1.0),
)


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass(frozen=True)
class MarketParams:
    mu: tuple[float, ...] = PAPER_MU
    vols: tuple[float, ...] = PAPER_VOLS
    corr: tuple[tuple[float, ...], ...] = PAPER_CORR
    rate: float = 0.02
    horizon_years: float = 1.0
    n_steps: int = 4

    def __post_init__(self):
        d = len(self.mu)
        corr = np.asarray(self.corr, dtype=float)
        if len(self.vols) != d or corr.shape != (d, d):
            raise ValueError("dimension mismatch between mu, vols and corr")
        if np.any(np.asarray(self.vols) < 0):
            raise ValueError("volatilities must be nonnegative")
        if not np.allclose(corr, corr.T, atol=1e-12) or not np.allclose(np.diag(corr), 1.0):
            raise ValueError("corr must be symmetric with unit diagonal")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.mu)

    @property
    def dt(self) -> float:
        return self.horizon_years / self.n_steps

    @property
    def riskfree(self) -> float:
        return math.exp(self.rate * self.dt)


def build_covariance(vols, corr) -> np.ndarray:
    """``D rho D`` with ``D = diag(vols)``."""
    vols = np.asarray(vols, dtype=float)
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (vols.size, vols.size):
        raise ValueError(f"dimension mismatch: {vols.size} vols, corr {corr.shape}")
    gamma = vols[:, None] * corr * vols[None, :]
    return 0.5 * (gamma + gamma.T)


def cholesky(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    try:
        return np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix not positive definite") from exc


def _chol_psd(gamma: np.ndarray) -> np.ndarray:
    # zero-volatility assets make the covariance singular; factor the
    # nonzero block only
    active = np.diag(gamma) > 0
    L = np.zeros_like(gamma)
    if active.any():
        L[np.ix_(active, active)] = cholesky(gamma[np.ix_(active, active)])
    return L


@dataclass
class ReturnBatch:
    """Per-period gross returns of the risky assets plus the risk-free step.

    ``risky`` has shape ``(n_paths, n_steps, d)``.
    """

    risky: np.ndarray
    riskfree: float
    dt: float
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.risky.shape[0]

    @property
    def n_steps(self) -> int:
        return self.risky.shape[1]

    @property
    def dim(self) -> int:
        return self.risky.shape[2]

    def take(self, index) -> "ReturnBatch":
        return ReturnBatch(self.risky[index], self.riskfree, self.dt, self.seed, self.meta)

    def prices(self) -> np.ndarray:
        """Risky price paths ``X_n / X_0`` including the initial date, shape (M, N+1, d)."""
        ones = np.ones((self.n_paths, 1, self.dim))
        return np.concatenate([ones, np.cumprod(self.risky, axis=1)], axis=1)


def simulate_returns(params: MarketParams, n_paths: int, seed: int,
                     domain: str = "market", stream: int = 0) -> ReturnBatch:
    """Exact lognormal gross returns ``exp((mu - Gamma_ii/2) dt + sqrt(dt) (L Z)_i)``.

    ``domain``/``stream`` select an independent family of streams for the same
    master seed (e.g. training epochs vs. the evaluation set).
    """
    if n_paths <= 0:
        raise ValueError("n_paths must be positive")
    gamma = build_covariance(params.vols, params.corr)
    L = _chol_psd(gamma)
    dt, N, d = params.dt, params.n_steps, params.dim
    drift = (np.asarray(params.mu) - 0.5 * np.diag(gamma)) * dt
    out = np.empty((n_paths, N, d))
    for b, start in enumerate(range(0, n_paths, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, n_paths)
        gen = seeding.rng(seed, domain, stream, b)
        z = gen.standard_normal((BLOCK_SIZE, N, d))[: stop - start]
        out[start:stop] = np.exp(drift + math.sqrt(dt) * z @ L.T)
    return ReturnBatch(out, params.riskfree, dt, seed,
                       {"domain": domain, "stream": stream})


def write_returns_csv(batch: ReturnBatch, path) -> None:
    """Long-format dump: ``path, step, asset, gross_return``.

    Asset 0 is the risk-free asset; risky assets are numbered from 1.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "asset", "gross_return"])
        for m in range(batch.n_paths):
            for n in range(batch.n_steps):
                w.writerow([m, n + 1, 0, repr(batch.riskfree)])
                for i in range(batch.dim):
                    w.writerow([m, n + 1, i + 1, repr(float(batch.risky[m, n, i]))])


def read_returns_csv(path, dt: float) -> ReturnBatch:
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    rows = np.atleast_2d(rows)
    M = int(rows[:, 0].max()) + 1
    N = int(rows[:, 1].max())
    d = int(rows[:, 2].max())
    risky = np.empty((M, N, d))
    riskfree = float(rows[rows[:, 2] == 0, 3][0])
    sel = rows[rows[:, 2] > 0]
    risky[sel[:, 0].astype(int), sel[:, 1].astype(int) - 1, sel[:, 2].astype(int) - 1] = sel[:, 3]
    return ReturnBatch(risky, riskfree, dt)


def save_returns(batch: ReturnBatch, path) -> None:
    np.savez_compressed(path, risky=batch.risky, riskfree=batch.riskfree, dt=batch.dt,
                        seed=-1 if batch.seed is None else batch.seed)


def load_returns(path) -> ReturnBatch:
    with np.load(path) as z:
        seed = int(z["seed"])
        return ReturnBatch(z["risky"], float(z["riskfree"]), float(z["dt"]),
                           None if seed < 0 else seed)
