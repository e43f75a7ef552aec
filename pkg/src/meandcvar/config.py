"""Validated experiment configuration.

Configs are YAML documents checked against a strict schema: unknown keys
are rejected and every default is materialised in the resolved config that
each run records in its manifest.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .market import PAPER_CORR, PAPER_MU, PAPER_VOLS, MarketParams
from .penalty import TrainConfig


class ConfigError(ValueError):
    """Schema violation; the message names the offending field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Seeds(_Strict):
    scenario: int = 0
    init: int = 0
    eval: int = 0


class MarketSection(_Strict):
    mu: tuple[float, ...] = PAPER_MU
    vols: tuple[float, ...] = PAPER_VOLS
    corr: tuple[tuple[float, ...], ...] = PAPER_CORR
    rate: float = 0.02
    horizon_years: float = 1.0

    def params(self, n_steps: int) -> MarketParams:
        return MarketParams(self.mu, self.vols, self.corr, self.rate, self.horizon_years, n_steps)


class TrainingSection(_Strict):
    """Penalty-training schedule; mirrors :class:`meandcvar.penalty.TrainConfig`."""

    epochs: int = Field(200, ge=0)
    batch_size: int = Field(5000, ge=1)
    phase_fractions: tuple[float, float, float, float] = (0.03, 0.70, 0.20, 0.07)
    delta: float = Field(0.0, ge=0)
    eta_inner_steps: int = Field(0, ge=0)
    eta_inner_lr: float = 0.05
    lr: float = Field(1e-3, gt=0)
    eta_lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    lr_decay: float = Field(0.995, gt=0, le=1)
    clip_norm: float = Field(10.0, gt=0)
    full_batch_steps: int = Field(1, ge=0)
    full_batch_chunk: int = Field(20_000, ge=1)
    lambda_init: float = Field(0.5, ge=0)
    rho: float = Field(0.003, ge=0)
    lambda_cap: float = Field(50.0, gt=0)
    ema_factor: float = Field(0.9, ge=0, lt=1)

    def train_config(self, K: float, kappa: float, seed: int) -> TrainConfig:
        return TrainConfig(K=K, kappa=kappa, seed=seed, **self.model_dump())


class SaaSection(_Strict):
    n_starts: int = Field(8, ge=1)
    start_steps: int = Field(150, ge=0)
    refine_steps: int = Field(600, ge=0)
    lr: float = Field(0.2, gt=0)
    lambda1: float = Field(20.0, ge=0)
    lambda2: float = Field(1.0, ge=0)
    feas_tol: float = Field(0.02, ge=0)
    # random starts added to a warm start from the previous horizon's fit
    warm_n_starts: int = Field(1, ge=0)

    def solver_kwargs(self, warm: bool = False) -> dict:
        kw = self.model_dump(exclude={"warm_n_starts"})
        if warm:
            kw["n_starts"] = self.warm_n_starts
        return kw


class PolicySection(_Strict):
    hidden_dims: tuple[int, ...] = (50, 50)
    layer_norm: bool = False
    asset_features: bool = False


class FinanceSection(_Strict):
    K: float = 30.0
    kappa: float = Field(0.99, gt=0, lt=1)
    V_0: float = Field(100.0, gt=0)
    constraints: tuple[Literal["LO", "RC", "NC"], ...] = ("LO",)
    n_steps: tuple[int, ...] = (4,)
    baselines: tuple[Literal["buy_and_hold", "constant_mix"], ...] = ("buy_and_hold", "constant_mix")
    train_nn: bool = False
    saa_paths: int = Field(100_000, ge=1)
    train_paths: int = Field(100_000, ge=1)
    eval_paths: int = Field(100_000, ge=1)
    market: MarketSection = MarketSection()
    training: TrainingSection = TrainingSection()
    saa: SaaSection = SaaSection()
    policy: PolicySection = PolicySection()


class GompertzSection(_Strict):
    a: float = Field(5e-4, gt=0)
    beta: float = Field(7e-5, ge=0)
    c: float = Field(0.09, gt=0)


class CirSection(_Strict):
    g: float = Field(0.3, gt=0)
    b: float = Field(0.3, gt=0)
    sigma: float = Field(0.2, ge=0)
    z0: float = Field(1.0, gt=0)


class ContractSection(_Strict):
    age: float = Field(65.0, ge=0)
    horizon: int = Field(20, ge=1)
    loading: float = Field(0.10, ge=0)


class CasualtySection(_Strict):
    alpha: float = Field(5.0, gt=0)
    beta: float = Field(1.0, gt=0)
    theta: float = Field(0.10, ge=0)


def _insurance_training() -> TrainingSection:
    return TrainingSection(epochs=100, batch_size=10_000, delta=0.3, eta_inner_steps=5,
                           eta_inner_lr=0.5, lr=1e-2, eta_lr=1e-2, lr_decay=0.97,
                           lambda_init=3.0, lambda_cap=10.0, rho=0.01, full_batch_steps=3,
                           full_batch_chunk=50_000)


class InsurancePolicySection(_Strict):
    hidden: int = Field(16, ge=1)
    head_dims: tuple[int, ...] = (32, 32)
    mask: bool = False
    feature_scale: float = Field(10.0, gt=0)


class InsuranceSection(_Strict):
    K: float = 30.0
    kappa: float = Field(0.99, gt=0, lt=1)
    rate: float = Field(0.02, ge=0)
    rho: float = Field(0.25, ge=-1, le=1)
    scheme: Literal["euler", "cir"] = "euler"
    n_inforce: int = Field(1, ge=0)
    n_ctrl: int = Field(5, ge=1)
    in_force: tuple[Literal["IF00", "IF11"], ...] = ("IF00",)
    bounds: tuple[Literal["LO", "CSTB", "TDB"], ...] = ("LO",)
    baselines: tuple[Literal["constant_exposure", "fixed_time_profile"], ...] = (
        "constant_exposure", "fixed_time_profile")
    train_nn: bool = True
    recalibrate: bool = True
    pricing_paths: int = Field(100_000, ge=1)
    train_paths: int = Field(50_000, ge=1)
    eval_paths: int = Field(100_000, ge=1)
    gompertz: GompertzSection = GompertzSection()
    cir_M: CirSection = CirSection()
    cir_L: CirSection = CirSection()
    mortality: ContractSection = ContractSection()
    longevity: ContractSection = ContractSection()
    casualty: CasualtySection = CasualtySection()
    training: TrainingSection = Field(default_factory=_insurance_training)
    saa: SaaSection = SaaSection(n_starts=4, start_steps=100, refine_steps=300, lr=2.0)
    policy: InsurancePolicySection = InsurancePolicySection()


class ExperimentConfig(_Strict):
    kind: Literal["finance", "insurance"]
    seeds: Seeds = Seeds()
    output_dir: str = "results"
    finance: FinanceSection | None = None
    insurance: InsuranceSection | None = None

    @model_validator(mode="after")
    def _fill_section(self):
        if self.kind == "finance" and self.finance is None:
            object.__setattr__(self, "finance", FinanceSection())
        if self.kind == "insurance" and self.insurance is None:
            object.__setattr__(self, "insurance", InsuranceSection())
        return self

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config: " + "; ".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("invalid config: top level must be a mapping")
    return parse_config(data)


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, paths: int | None = None,
                   out: str | None = None) -> ExperimentConfig:
    """Apply the command-line overrides and re-validate."""
    data = cfg.resolved()
    if seed is not None:
        data["seeds"] = {"scenario": seed, "init": seed, "eval": seed}
    if out is not None:
        data["output_dir"] = out
    if paths is not None:
        sect = data[cfg.kind]
        keys = ("saa_paths", "train_paths", "eval_paths") if cfg.kind == "finance" else (
            "train_paths", "eval_paths")
        for k in keys:
            sect[k] = paths
    return parse_config(data)
