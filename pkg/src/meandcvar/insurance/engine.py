"""Stochastic Gompertz-Makeham life portfolios and a Gamma casualty line.

Conventions
-----------
* Time is measured in whole years. ``Z`` is the systematic mortality factor,
  simulated with a full-truncation Euler scheme; consumers read ``Z^+``.
* A cohort underwritten at calendar ``a`` has development years
  ``d = 0, ..., T - 1``. The cash flow ``CF_{a,d}`` covers ``[a+d, a+d+1)``
  and is settled (and discounted) at ``a + d + 1``.
* For the annuity, the payment made at the end of year ``d + 1`` to the
  ``N_{d+1}`` survivors is booked in development year ``d`` and the single
  premium in development year ``0``. :func:`contract_cashflows` can also
  return the payment-date timeline.
* Profits ``X_{a,d}`` exist for ``d = 1, ..., T``; ``X_{a,d}`` is realised
  at calendar ``a + d``.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .. import seeding

BLOCK_SIZE = 4096
LINES = ("M", "L", "C")
CONTRACT_KINDS = ("mortality_term", "longevity_annuity")
# per-unit targets after normalization: discounted benefits and premiums
UNIT_BENEFIT = 10.0


@dataclass(frozen=True)
class GompertzMakehamParams:
    """Baseline force of mortality ``a + beta * exp(c * x)``."""

    a: float = 5e-4
    beta: float = 7e-5
    c: float = 0.09

    def __post_init__(self):
        if self.a <= 0 or self.beta < 0 or self.c <= 0:
            raise ValueError("Gompertz-Makeham parameters must be positive")


@dataclass(frozen=True)
class CirParams:
    """Square-root factor ``dZ = (g - b Z) dt + sigma sqrt(Z) dB``.

    ``rho`` is the correlation of this factor's innovations with the other
    life line's factor.
    """

    g: float = 0.3
    b: float = 0.3
    sigma: float = 0.2
    z0: float = 1.0
    rho: float = 0.25

    def __post_init__(self):
        if self.g <= 0 or self.b <= 0 or self.sigma < 0 or self.z0 <= 0:
            raise ValueError("CIR parameters must be positive")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must be <= 1")


@dataclass(frozen=True)
class ContractSpec:
    """Homogeneous cohort of identical contracts.

    ``benefit`` is the death benefit ``C`` (term cover) or the annual annuity
    ``R``. ``premium`` is the loaded premium ``(1 + loading) * pure_premium``.
    """

    kind: str
    age: float = 65.0
    cohort_size: float = 1.0
    benefit: float = 1.0
    pure_premium: float | None = None
    loading: float = 0.10
    horizon: int = 20
    rate: float = 0.02

    def __post_init__(self):
        if self.kind not in CONTRACT_KINDS:
            raise ValueError(f"unknown contract kind {self.kind!r}")
        if self.cohort_size <= 0 or self.benefit <= 0:
            raise ValueError("cohort size and benefit must be positive")
        if self.horizon < 1 or self.rate < 0 or self.loading < 0:
            raise ValueError("horizon >= 1, rate >= 0 and loading >= 0 required")

    @property
    def v(self) -> float:
        return 1.0 / (1.0 + self.rate)

    @property
    def premium(self) -> float:
        if self.pure_premium is None:
            raise ValueError("premium not calibrated; call fair_premium first")
        return (1.0 + self.loading) * self.pure_premium


@dataclass(frozen=True)
class CasualtyParams:
    """Annual claims ``S ~ Gamma(shape alpha, rate beta)``, premium ``(1+theta) alpha/beta``."""

    alpha: float = 5.0
    beta: float = 1.0
    theta: float = 0.10

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.theta < 0:
            raise ValueError("casualty parameters must be positive (theta >= 0)")

    @property
    def mean_claim(self) -> float:
        return self.alpha / self.beta


@dataclass(frozen=True)
class InsuranceModel:
    """Everything needed to simulate the three lines of business.

    ``scheme`` selects the one-step factor transform used by the best
    estimate recursion: ``euler`` matches the simulated scheme, ``cir``
    uses the exact square-root transition.
    """

    gm: GompertzMakehamParams = GompertzMakehamParams()
    cir_M: CirParams = CirParams()
    cir_L: CirParams = CirParams()
    mortality: ContractSpec = ContractSpec("mortality_term")
    longevity: ContractSpec = ContractSpec("longevity_annuity")
    casualty: CasualtyParams = CasualtyParams()
    scheme: str = "euler"

    def __post_init__(self):
        if self.scheme not in ("euler", "cir"):
            raise ValueError(f"unknown transform scheme {self.scheme!r}")
        if self.mortality.kind != "mortality_term" or self.longevity.kind != "longevity_annuity":
            raise ValueError("mortality/longevity slots hold the wrong contract kinds")
        if self.mortality.horizon != self.longevity.horizon:
            raise ValueError("both life contracts must share the horizon")
        if self.mortality.rate != self.longevity.rate:
            raise ValueError("both life contracts must share the discount rate")

    @property
    def horizon(self) -> int:
        return self.mortality.horizon

    @property
    def v(self) -> float:
        return self.mortality.v

    def contract(self, line: str) -> ContractSpec:
        return {"M": self.mortality, "L": self.longevity}[line]

    def cir(self, line: str) -> CirParams:
        return {"M": self.cir_M, "L": self.cir_L}[line]


# ---------------------------------------------------------------- mortality


def gm_intensity(x, params: GompertzMakehamParams):
    """``mu_0(x) = a + beta * exp(c x)``."""
    return params.a + params.beta * np.exp(params.c * np.asarray(x, dtype=float))


def integrated_intensity(x, params: GompertzMakehamParams):
    """``K_x``, the integral of ``mu_0`` over ``[x, x + 1]``."""
    x = np.asarray(x, dtype=float)
    return params.a + params.beta / params.c * (np.exp(params.c * (x + 1)) - np.exp(params.c * x))


def death_prob(x, z, params: GompertzMakehamParams):
    """One-year death probability ``1 - exp(-z^+ K_x)`` under a frozen factor."""
    z = np.maximum(np.asarray(z, dtype=float), 0.0)
    return -np.expm1(-z * integrated_intensity(x, params))


def simulate_factors(cir_M: CirParams, cir_L: CirParams, horizon: int, n_paths: int,
                     seed: int, stream: int = 0, domain: str = "factors",
                     chunk: int = 0) -> np.ndarray:
    """Correlated full-truncation Euler paths on a yearly grid.

    Returns raw (possibly negative) states of shape ``(n_paths, horizon + 1, 2)``
    with ``[..., 0]`` the mortality factor and ``[..., 1]`` the longevity one.
    ``chunk`` keys an independent family of blocks, for generating a large
    set piece by piece.
    """
    if cir_M.rho != cir_L.rho:
        raise ValueError("the two factors must agree on rho")
    if n_paths <= 0 or horizon < 0:
        raise ValueError("n_paths > 0 and horizon >= 0 required")
    rho = cir_M.rho
    g = np.array([cir_M.g, cir_L.g])
    b = np.array([cir_M.b, cir_L.b])
    s = np.array([cir_M.sigma, cir_L.sigma])
    out = np.empty((n_paths, horizon + 1, 2))
    out[:, 0] = (cir_M.z0, cir_L.z0)
    for blk, start in enumerate(range(0, n_paths, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, n_paths)
        xi = seeding.rng(seed, domain, stream, chunk, blk).standard_normal((BLOCK_SIZE, horizon, 2))
        xi = xi[: stop - start]
        eps = np.empty_like(xi)
        eps[..., 0] = xi[..., 0]
        eps[..., 1] = rho * xi[..., 0] + math.sqrt(max(1.0 - rho * rho, 0.0)) * xi[..., 1]
        z = out[start:stop]
        for t in range(horizon):
            zp = np.maximum(z[:, t], 0.0)
            z[:, t + 1] = z[:, t] + (g - b * zp) + s * np.sqrt(zp) * eps[:, t]
    return out


def survivor_path(N0, x0: float, z_path, params: GompertzMakehamParams):
    """Large-portfolio survivors ``N_{t+1} = N_t (1 - q_t)`` along factor paths.

    Parameters
    ----------
    z_path : array (..., T)
        Factor value in force during each year ``t`` of the contract.

    Returns
    -------
    N : array (..., T + 1)
    deaths : array (..., T)
        Expected deaths ``N_t q_t``.
    """
    z = np.asarray(z_path, dtype=float)
    T = z.shape[-1]
    q = death_prob(x0 + np.arange(T), z, params)
    N = np.empty(z.shape[:-1] + (T + 1,))
    N[..., 0] = N0
    N[..., 1:] = N0 * np.cumprod(1.0 - q, axis=-1)
    return N, N[..., :-1] * q


def contract_cashflows(contract: ContractSpec, N, deaths, timeline: str = "development",
                       premium: float | None = None) -> np.ndarray:
    """Net cash flows of a cohort given its survivor path.

    ``timeline="development"`` returns ``CF_{a,d}``, ``d = 0..T-1``, as
    defined in the module docstring. ``timeline="payment"`` returns the
    flows at their payment dates ``t = 0..T``: term cover ``P N_t - C D_t``
    (zero at ``T``), annuity ``P N_0`` at ``t = 0`` and ``-R N_t`` afterwards.
    """
    N = np.asarray(N, dtype=float)
    deaths = np.asarray(deaths, dtype=float)
    T = contract.horizon
    if N.shape[-1] < T + 1 or deaths.shape[-1] < T:
        raise ValueError("survivor path shorter than the contract horizon")
    N, deaths = N[..., : T + 1], deaths[..., :T]
    P = contract.premium if premium is None else premium
    C = contract.benefit
    if timeline == "development":
        if contract.kind == "mortality_term":
            return P * N[..., :T] - C * deaths
        cf = -C * N[..., 1:]
        cf[..., 0] += P * N[..., 0]
        return cf
    if timeline == "payment":
        cf = np.zeros(N.shape[:-1] + (T + 1,))
        if contract.kind == "mortality_term":
            cf[..., :T] = P * N[..., :T] - C * deaths
        else:
            cf[..., 0] = P * N[..., 0]
            cf[..., 1:] = -C * N[..., 1:]
        return cf
    raise ValueError(f"unknown timeline {timeline!r}")


def discount_vector(contract: ContractSpec) -> np.ndarray:
    """``v^{d+1}`` for ``d = 0..T-1``."""
    return contract.v ** np.arange(1, contract.horizon + 1)


def apv_components(contract: ContractSpec, N, deaths) -> tuple[np.ndarray, np.ndarray]:
    """Per-path discounted premium base (premium = 1) and discounted benefits."""
    disc = discount_vector(contract)
    unit = contract_cashflows(contract, N, deaths, premium=1.0)
    none = contract_cashflows(contract, N, deaths, premium=0.0)
    benefits = -(none * disc).sum(axis=-1)
    base = ((unit - none) * disc).sum(axis=-1)
    return base, benefits


def _line_factor_paths(model_gm, contract: ContractSpec, cir: CirParams, n_paths: int,
                       seed: int, stream: int):
    z = simulate_factors(cir, cir, contract.horizon, n_paths, seed,
                         stream=stream, domain="pricing")[:, :-1, 0]
    return survivor_path(contract.cohort_size, contract.age, z, model_gm)


@dataclass(frozen=True)
class PremiumEstimate:
    pure_premium: float
    apv_se: float
    n_mc: int


def fair_premium(contract: ContractSpec, gm: GompertzMakehamParams, cir: CirParams,
                 n_mc: int = 100_000, seed: int = 0, stream: int = 0) -> PremiumEstimate:
    """Pure premium setting the Monte Carlo APV to zero.

    It is the ratio of mean discounted benefits to the mean discounted
    premium base. ``apv_se`` is the standard error of the APV estimator at
    that premium.
    """
    N, D = _line_factor_paths(gm, contract, cir, n_mc, seed, stream)
    base, benefits = apv_components(contract, N, D)
    if not base.mean() > 0:
        raise ValueError("zero expected premium base")
    P = float(benefits.mean() / base.mean())
    apv = P * base - benefits
    return PremiumEstimate(P, float(apv.std(ddof=1) / math.sqrt(n_mc)), n_mc)


def normalize_exposures(model: InsuranceModel, n_mc: int = 100_000, seed: int = 0,
                        unit_benefit: float = UNIT_BENEFIT) -> tuple[InsuranceModel, dict]:
    """Calibrate premiums and rescale so one unit has discounted benefits ``unit_benefit``.

    Life cohorts get a size such that expected discounted benefits equal
    ``unit_benefit`` (premiums are then ``(1 + loading)`` times that). The
    casualty rate is rescaled so the mean annual claim is ``unit_benefit``.

    Returns the calibrated model and the scale factors applied per line.
    """
    scales, contracts = {}, {}
    for i, line in enumerate(("M", "L")):
        c = model.contract(line)
        est = fair_premium(c, model.gm, model.cir(line), n_mc, seed, stream=i)
        N, D = _line_factor_paths(model.gm, c, model.cir(line), n_mc, seed, stream=i)
        _, benefits = apv_components(c, N, D)
        scale = unit_benefit / float(benefits.mean())
        scales[line] = scale
        contracts[line] = dataclasses.replace(c, cohort_size=c.cohort_size * scale,
                                              pure_premium=est.pure_premium)
    cas = model.casualty
    scales["C"] = unit_benefit / cas.mean_claim
    casualty = dataclasses.replace(cas, beta=cas.alpha / unit_benefit)
    calibrated = dataclasses.replace(model, mortality=contracts["M"], longevity=contracts["L"],
                                     casualty=casualty)
    return calibrated, scales


# ------------------------------------------------------------ best estimates


@dataclass(frozen=True)
class AffineBeTable:
    """``f_{h,x}(z) = E[exp(-sum_{k<h} K_{x+k} Z_k) | Z_0 = z] = exp(A - B z)``.

    ``A[h, k]`` and ``B[h, k]`` refer to age ``age0 + k``.
    """

    age0: float
    A: np.ndarray
    B: np.ndarray
    scheme: str = "euler"

    def __post_init__(self):
        if self.A.shape != self.B.shape:
            raise ValueError("A and B shapes differ")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("non-finite coefficients")

    @property
    def h_max(self) -> int:
        return self.A.shape[0] - 1

    @property
    def n_ages(self) -> int:
        return self.A.shape[1]

    def survival(self, h: int, k: int, z):
        if not (0 <= h <= self.h_max and 0 <= k < self.n_ages):
            raise IndexError(f"(h={h}, age index {k}) outside the table")
        z = np.maximum(np.asarray(z, dtype=float), 0.0)
        return np.exp(self.A[h, k] - self.B[h, k] * z)


def affine_be_coeffs(gm: GompertzMakehamParams, cir: CirParams, age0: float, h_max: int,
                     n_ages: int | None = None, scheme: str = "euler") -> AffineBeTable:
    """Backward recursion for the exponential-affine survival expectations.

    With ``(A', B')`` the coefficients for ``h - 1`` at the next age,
    ``euler``: ``B = K_x + B'(1 - b) - B'^2 sigma^2 / 2``, ``A = A' - B' g``
    (the Gaussian Euler step for ``z >= 0``);
    ``cir``: the exact one-year square-root transform.
    """
    if h_max < 0:
        raise ValueError("h_max must be >= 0")
    n_ages = h_max + 1 if n_ages is None else n_ages
    width = n_ages + h_max
    Kx = integrated_intensity(age0 + np.arange(width), gm)
    A = np.zeros((h_max + 1, width))
    B = np.zeros((h_max + 1, width))
    g, b, s2 = cir.g, cir.b, cir.sigma ** 2
    e = math.exp(-b)
    gamma = s2 * (1.0 - e) / (2.0 * b)
    for h in range(1, h_max + 1):
        Ap, Bp = A[h - 1, 1:], B[h - 1, 1:]
        if scheme == "euler":
            B[h, :-1] = Kx[:-1] + Bp * (1.0 - b) - 0.5 * Bp ** 2 * s2
            A[h, :-1] = Ap - Bp * g
        elif scheme == "cir":
            B[h, :-1] = Kx[:-1] + Bp * e / (1.0 + Bp * gamma)
            A[h, :-1] = Ap - (2.0 * g / s2) * np.log1p(Bp * gamma) if s2 > 0 else Ap - Bp * g * (1 - e) / b
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        if np.any(B[h, : width - h] < 0):
            raise ValueError("affine recursion unstable for these parameters")
    return AffineBeTable(float(age0), A[:, :n_ages].copy(), B[:, :n_ages].copy(), scheme)


def be_weights(contract: ContractSpec, d: int) -> np.ndarray:
    """Weights ``w_h`` with ``BE_{a,d} = N_d sum_h w_h f_{h, x+d}(Z_{a+d})``.

    Covers ``h = 0..T-d``. For ``d >= T`` the result is empty.
    """
    T, v = contract.horizon, contract.v
    if d >= T:
        return np.zeros(0)
    w = np.zeros(T - d + 1)
    P, C = contract.premium, contract.benefit
    h = np.arange(T - d + 1)
    if contract.kind == "mortality_term":
        # CF_i = (P - C) N_i + C N_{i+1}, discounted v^{i-d+1}
        w[:-1] += (P - C) * v ** (h[:-1] + 1)
        w[1:] += C * v ** h[1:]
    else:
        w[1:] -= C * v ** h[1:]
    return w


def best_estimate(contract: ContractSpec, d: int, N_d, z, table: AffineBeTable):
    """``BE_{a,d}``: discounted conditional expectation of ``CF_{a,i}``, ``i >= d``.

    ``N_d`` are the survivors at the start of development year ``d`` and
    ``z`` the factor at calendar ``a + d``. The annuity premium is only part
    of ``BE_{a,0}``.
    """
    if d < 0:
        raise IndexError("development year must be >= 0")
    N_d = np.asarray(N_d, dtype=float)
    if d >= contract.horizon:
        return np.zeros(np.broadcast_shapes(N_d.shape, np.shape(z)))
    w = be_weights(contract, d)
    if len(w) - 1 > table.h_max or d >= table.n_ages:
        raise IndexError("development horizon outside the best-estimate table")
    z = np.maximum(np.asarray(z, dtype=float), 0.0)
    A, B = table.A[: len(w), d], table.B[: len(w), d]
    surv = np.exp(A - B * z[..., None])
    be = N_d * (surv @ w)
    if contract.kind == "longevity_annuity" and d == 0:
        be = be + contract.v * contract.premium * contract.cohort_size
    return be


def annual_profits(contract: ContractSpec, z_path, table: AffineBeTable,
                   gm: GompertzMakehamParams) -> np.ndarray:
    """``X_{a,d}`` for ``d = 1..T`` along each factor path.

    ``X_{a,1} = CF_{a,0} + BE_{a,1}`` and
    ``X_{a,d} = CF_{a,d-1} + BE_{a,d} - BE_{a,d-1} / v`` for ``d >= 2``.

    Parameters
    ----------
    z_path : array (..., T)
        Factor during each development year of the cohort.
    """
    z = np.asarray(z_path, dtype=float)
    T = contract.horizon
    N, D = survivor_path(contract.cohort_size, contract.age, z[..., :T], gm)
    cf = contract_cashflows(contract, N, D)
    be = np.zeros(z.shape[:-1] + (T + 1,))
    for d in range(1, T):
        be[..., d] = best_estimate(contract, d, N[..., d], z[..., d], table)
    X = cf + be[..., 1:]
    X[..., 1:] -= be[..., 1:T] / contract.v
    return X


def casualty_profits(params: CasualtyParams, horizon: int, n_paths: int, seed: int,
                     stream: int = 0, chunk: int = 0) -> np.ndarray:
    """I.i.d. yearly results ``(1 + theta) alpha / beta - S``, shape ``(n_paths, horizon)``."""
    if n_paths <= 0 or horizon < 1:
        raise ValueError("n_paths > 0 and horizon >= 1 required")
    out = np.empty((n_paths, horizon))
    premium = (1.0 + params.theta) * params.mean_claim
    for blk, start in enumerate(range(0, n_paths, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, n_paths)
        S = seeding.rng(seed, "casualty", stream, chunk, blk).gamma(
            params.alpha, 1.0 / params.beta, (BLOCK_SIZE, horizon))
        out[start:stop] = premium - S[: stop - start]
    return out


# ---------------------------------------------------------------- profit cube


@dataclass
class LobProfitCube:
    """Annual profits per scenario, underwriting cohort and line.

    Cohorts are indexed relative to the evaluation date: ``-n_inforce..-1``
    are in force, ``0..n_ctrl-1`` are written by the controls. ``X`` has
    shape ``(M, n_cohorts, 3, T)`` with ``X[..., d - 1] = X_{k,d}``.
    ``survival`` holds ``N_{k,d} / N_{k,0}`` for the life lines, shape
    ``(M, n_cohorts, 2, T + 1)``. ``alpha_if`` is ``(n_inforce, 3)``.
    """

    X: np.ndarray
    survival: np.ndarray
    n_inforce: int
    n_ctrl: int
    v: float
    alpha_if: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 4 or self.X.shape[1] != self.n_inforce + self.n_ctrl or self.X.shape[2] != 3:
            raise ValueError("cube shape does not match (M, n_inforce + n_ctrl, 3, T)")
        if self.alpha_if is None:
            self.alpha_if = np.zeros((self.n_inforce, 3))
        self.alpha_if = np.asarray(self.alpha_if, dtype=float).reshape(self.n_inforce, 3)
        if not np.all(np.isfinite(self.X)):
            raise ValueError("non-finite profits in cube")

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def horizon(self) -> int:
        return self.X.shape[3]

    @property
    def n_cohorts(self) -> int:
        return self.X.shape[1]

    @property
    def n_calendar(self) -> int:
        """Number of calendar years ``j = 0..n_ctrl - 1 + T`` carrying profits."""
        return self.n_ctrl + self.horizon

    def cohort_calendar(self) -> np.ndarray:
        """``cal[k, d-1]``: calendar index at which ``X_{k,d}`` is realised."""
        k = np.arange(-self.n_inforce, self.n_ctrl)[:, None]
        return k + np.arange(1, self.horizon + 1)[None, :]

    def take(self, index) -> "LobProfitCube":
        return LobProfitCube(self.X[index], self.survival[index], self.n_inforce, self.n_ctrl,
                             self.v, self.alpha_if.copy(), dict(self.meta))

    def exposures(self, controls) -> np.ndarray:
        """Full ``(M, n_cohorts, 3)`` exposure array from in-force and controls."""
        a = np.asarray(controls, dtype=float)
        if a.shape[-2:] != (self.n_ctrl, 3) or a.ndim not in (2, 3):
            raise ValueError(f"controls must have shape (..., {self.n_ctrl}, 3), got {a.shape}")
        if a.ndim == 3 and a.shape[0] != self.n_paths:
            raise ValueError("per-scenario controls must match the cube's scenarios")
        a = np.broadcast_to(a, (self.n_paths, self.n_ctrl, 3))
        inf = np.broadcast_to(self.alpha_if, (self.n_paths, self.n_inforce, 3))
        return np.concatenate([inf, a], axis=1)


def simulate_cube(model: InsuranceModel, n_paths: int, seed: int, n_inforce: int = 1,
                  n_ctrl: int = 5, stream: int = 0, alpha_if=None,
                  tables: dict | None = None, chunk: int = 0) -> LobProfitCube:
    """Simulate factors and claims and build the profit cube.

    The mortality line reads the first factor, the longevity line the
    second; the casualty cohort ``k`` has one development year with result
    realised at calendar ``k + 1``. Premiums must be calibrated.
    """
    if n_inforce < 0 or n_ctrl < 1:
        raise ValueError("n_inforce >= 0 and n_ctrl >= 1 required")
    T = model.horizon
    n_coh = n_inforce + n_ctrl
    years = n_coh - 1 + T
    Z = simulate_factors(model.cir_M, model.cir_L, years, n_paths, seed, stream=stream, chunk=chunk)
    tables = tables or be_tables(model)
    X = np.zeros((n_paths, n_coh, 3, T))
    surv = np.zeros((n_paths, n_coh, 2, T + 1))
    for li, line in enumerate(("M", "L")):
        c = model.contract(line)
        for j in range(n_coh):
            z = Z[:, j: j + T, li]
            X[:, j, li] = annual_profits(c, z, tables[line], model.gm)
            N, _ = survivor_path(1.0, c.age, z, model.gm)
            surv[:, j, li] = N
    X[:, :, 2, 0] = casualty_profits(model.casualty, n_coh, n_paths, seed, stream=stream, chunk=chunk)
    meta = {"seed": seed, "stream": stream, "chunk": chunk, "factors": Z}
    return LobProfitCube(X, surv, n_inforce, n_ctrl, model.v, alpha_if, meta)


def be_tables(model: InsuranceModel) -> dict:
    """One immutable table per life line, covering the whole contract horizon."""
    T = model.horizon
    return {line: affine_be_coeffs(model.gm, model.cir(line), model.contract(line).age, T,
                                   n_ages=T + 1, scheme=model.scheme)
            for line in ("M", "L")}


def aggregate_lob(cube: LobProfitCube, controls) -> np.ndarray:
    """Calendar results ``Y[m, line, j]`` for ``j = 0..n_ctrl - 1 + T``.

    ``Y_j = sum_k alpha_k X_{k, j - k}`` over in-force and controlled cohorts.
    """
    alpha = cube.exposures(controls)
    Y = np.zeros((cube.n_paths, 3, cube.n_calendar))
    cal = cube.cohort_calendar()
    for j in range(cube.n_cohorts):
        contrib = alpha[:, j, :, None] * cube.X[:, j]
        # results booked before the evaluation date are not part of the reward
        keep = cal[j] >= 0
        Y[:, :, cal[j][keep]] += contrib[..., keep]
    return Y


def discounted_reward(cube: LobProfitCube, controls) -> np.ndarray:
    """``R = sum_line sum_j v^{j+1} Y_j`` per scenario."""
    Y = aggregate_lob(cube, controls)
    disc = cube.v ** np.arange(1, cube.n_calendar + 1)
    return (Y * disc).sum(axis=(1, 2))


def write_cube_csv(cube: LobProfitCube, path) -> None:
    """Long format ``scenario,line,uw_year,dev_year,value`` (uw_year relative)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "line", "uw_year", "dev_year", "value"])
        for m in range(cube.n_paths):
            for j in range(cube.n_cohorts):
                for li, line in enumerate(LINES):
                    for d in range(cube.horizon):
                        w.writerow([m, line, j - cube.n_inforce, d + 1, repr(float(cube.X[m, j, li, d]))])


def read_cube_csv(path, n_inforce: int, n_ctrl: int, v: float) -> LobProfitCube:
    """Inverse of :func:`write_cube_csv`; survival fractions are not stored and come back as NaN."""
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["scenario", "line", "uw_year", "dev_year", "value"]:
            raise ValueError(f"unexpected header {header}")
        rows = [(int(m), LINES.index(l), int(k), int(d), float(x)) for m, l, k, d, x in r]
    M = max(row[0] for row in rows) + 1
    T = max(row[3] for row in rows)
    X = np.zeros((M, n_inforce + n_ctrl, 3, T))
    for m, li, k, d, x in rows:
        X[m, k + n_inforce, li, d - 1] = x
    surv = np.full((M, n_inforce + n_ctrl, 2, T + 1), np.nan)
    return LobProfitCube(X, surv, n_inforce, n_ctrl, v)
