"""End-to-end experiment drivers behind the command line.

Each driver takes a validated :class:`ExperimentConfig`, runs the requested
baselines and neural policies on seeded scenario sets and writes
``results.csv``, ``quantiles.csv``, ``strategies.csv`` and ``manifest.json``
to the configured output directory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .baselines import InfeasibleError, StaticStrategy, evaluate_static, saa_optimize, \
    static_outcomes, write_strategy_csv
from .config import ExperimentConfig, InsuranceSection
from .insurance.control import BoundsSchedule, InsurancePolicy, InsuranceProblem, \
    InsuranceScenarios, build_scenarios, evaluate_insurance_policy, inforce_matrix, \
    train_insurance
from .insurance.engine import CasualtyParams, CirParams, ContractSpec, GompertzMakehamParams, \
    InsuranceModel, normalize_exposures
from .market import simulate_returns
from .penalty import train, write_history_csv
from .policy import ConstraintSet, FinancialPolicy, MarketProblem, evaluate_policy
from .reporting import FINANCE_COLUMNS, INSURANCE_COLUMNS, write_manifest, \
    write_quantiles_csv, write_table_csv
from .risk import RiskReport, report_outcomes

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    rows: list[dict]
    outcomes: dict[str, np.ndarray] = field(default_factory=dict)
    strategies: dict[str, StaticStrategy] = field(default_factory=dict)
    histories: dict[str, list[dict]] = field(default_factory=dict)
    policies: dict[str, torch.nn.Module] = field(default_factory=dict)
    out_dir: Path | None = None


def _settings(section) -> dict:
    return section.model_dump()


# ------------------------------------------------------------------ finance
def _finance_row(label: str, strategy: str, N: int, rep: RiskReport) -> dict:
    return {"constraint_type": label, "strategy": strategy, "N": N, "mean": rep.mean,
            "constraint_value": rep.dcvar_k, "std": rep.std, "sharpe": rep.sharpe}


def run_finance(cfg: ExperimentConfig) -> ExperimentResult:
    """Baselines are fitted on the SAA set; every reported row is out of sample."""
    fin, seeds = cfg.finance, cfg.seeds
    res = ExperimentResult([])
    # static decisions have the same shape for every N, so each horizon
    # warm-starts from the previous one
    previous: dict = {}
    for N in fin.n_steps:
        params = fin.market.params(N)
        saa_set = simulate_returns(params, fin.saa_paths, seeds.scenario, domain="market")
        eval_set = simulate_returns(params, fin.eval_paths, seeds.eval, domain="eval")
        for label in fin.constraints:
            cons = ConstraintSet.from_label(label, params.dim)
            for kind in fin.baselines:
                name = f"{label}/{kind}/N{N}"
                log.info("fitting %s", name)
                init = previous.get((label, kind))
                try:
                    s = saa_optimize(kind, saa_set, fin.K, fin.kappa, cons, seed=seeds.init,
                                     V_0=fin.V_0, initial=init,
                                     **fin.saa.solver_kwargs(warm=init is not None))
                except InfeasibleError as err:
                    log.warning("%s: %s", name, err)
                    continue
                previous[(label, kind)] = s.decision
                res.strategies[name] = s
                rep = evaluate_static(s, eval_set, fin.kappa, fin.K, fin.V_0)
                res.rows.append(_finance_row(label, kind, N, rep))
                res.outcomes[name] = static_outcomes(s, eval_set, fin.V_0)
            if fin.train_nn:
                name = f"{label}/nn/N{N}"
                log.info("training %s", name)
                pol = FinancialPolicy(params.dim, cons, V_0=fin.V_0, seed=seeds.init,
                                      **_settings(fin.policy))
                prob = MarketProblem(params, fin.train_paths, seeds.scenario, fin.V_0)
                tr = train(pol, prob, fin.training.train_config(fin.K, fin.kappa, seeds.init))
                res.histories[name] = tr.history
                res.policies[name] = pol
                V = evaluate_policy(pol, eval_set, fin.V_0)
                rep = report_outcomes(V, fin.kappa, fin.V_0, fin.K)
                res.rows.append(_finance_row(label, "nn", N, rep))
                res.outcomes[name] = V
    return res


# ---------------------------------------------------------------- insurance
def build_insurance_model(ins: InsuranceSection) -> InsuranceModel:
    """Uncalibrated model from the config; premiums are set by normalization."""
    gm = GompertzMakehamParams(**ins.gompertz.model_dump())
    cir_M = CirParams(rho=ins.rho, **ins.cir_M.model_dump())
    cir_L = CirParams(rho=ins.rho, **ins.cir_L.model_dump())
    mort = ContractSpec("mortality_term", rate=ins.rate, **ins.mortality.model_dump())
    longv = ContractSpec("longevity_annuity", rate=ins.rate, **ins.longevity.model_dump())
    cas = CasualtyParams(**ins.casualty.model_dump())
    return InsuranceModel(gm, cir_M, cir_L, mort, longv, cas, ins.scheme)


@dataclass
class InsuranceCell:
    """Fitted strategies for one (in-force, bounds) configuration."""

    in_force: str
    bounds: str
    strategies: dict[str, StaticStrategy] = field(default_factory=dict)
    policy: InsurancePolicy | None = None
    history: list[dict] = field(default_factory=list)
    nn_train_dcvar: float | None = None


def _saa_insurance(kind, scen, K, ins, sched, seed, initial=None):
    return saa_optimize(kind, scen, K, ins.kappa, sched.pair(), seed=seed, V_0=0.0,
                        initial=initial, **ins.saa.solver_kwargs())


def fit_insurance_cell(ins: InsuranceSection, train_set: InsuranceScenarios, in_force: str,
                       bounds: str, init_seed: int) -> InsuranceCell:
    """Const at the tightened threshold, NN warm-started from it, then FT.

    With ``recalibrate`` the static baselines are refitted at the constraint
    level the trained network actually reaches on the training set, so all
    three are compared at equal in-sample risk.
    """
    cell = InsuranceCell(in_force, bounds)
    sched = BoundsSchedule.from_label(bounds, ins.n_ctrl)
    K_fit = ins.K - ins.training.delta
    const = _saa_insurance("constant_exposure", train_set, K_fit, ins, sched, init_seed)
    if ins.train_nn:
        pol = InsurancePolicy(train_set.n_cohorts, sched, seed=init_seed,
                              **_settings(ins.policy))
        pol.warm_start(const.decision)
        cfg = ins.training.train_config(ins.K, ins.kappa, init_seed)
        tr = train_insurance(InsuranceProblem(train_set, ins.K, ins.kappa), pol, cfg)
        cell.policy, cell.history = pol, tr.train.history
        R = evaluate_insurance_policy(pol, train_set)
        cell.nn_train_dcvar = report_outcomes(R, ins.kappa).dcvar_k
        if ins.recalibrate:
            K_fit = min(ins.K, cell.nn_train_dcvar)
            const = _saa_insurance("constant_exposure", train_set, K_fit, ins, sched,
                                   init_seed, initial=const.decision)
    if "constant_exposure" in ins.baselines:
        cell.strategies["Const"] = const
    if "fixed_time_profile" in ins.baselines:
        cell.strategies["FT"] = _saa_insurance("fixed_time_profile", train_set, K_fit, ins,
                                               sched, init_seed, initial=const.decision)
    return cell


def _insurance_row(IF, bounds, policy, which, rep: RiskReport) -> dict:
    return {"IF": IF, "bounds": bounds, "policy": policy, "set": which, "mean": rep.mean,
            "std": rep.std, "dcvar": rep.dcvar_k, "var99": rep.var_k}


def insurance_sets(cfg: ExperimentConfig, model: InsuranceModel):
    ins, seeds = cfg.insurance, cfg.seeds
    train_set = build_scenarios(model, ins.train_paths, seeds.scenario, stream=0,
                                n_inforce=ins.n_inforce, n_ctrl=ins.n_ctrl)
    eval_set = build_scenarios(model, ins.eval_paths, seeds.eval, stream=1,
                               n_inforce=ins.n_inforce, n_ctrl=ins.n_ctrl)
    return train_set, eval_set


def run_insurance(cfg: ExperimentConfig) -> ExperimentResult:
    ins, seeds = cfg.insurance, cfg.seeds
    model, _ = normalize_exposures(build_insurance_model(ins), ins.pricing_paths,
                                   seeds.scenario)
    base_train, base_eval = insurance_sets(cfg, model)
    res = ExperimentResult([])
    for IF in ins.in_force:
        a_if = inforce_matrix(IF, ins.n_inforce)
        train_set, eval_set = base_train.with_inforce(a_if), base_eval.with_inforce(a_if)
        for bounds in ins.bounds:
            log.info("fitting %s/%s", IF, bounds)
            try:
                cell = fit_insurance_cell(ins, train_set, IF, bounds, seeds.init)
            except InfeasibleError as err:
                log.warning("%s/%s: %s", IF, bounds, err)
                continue
            for name, s in cell.strategies.items():
                key = f"{IF}/{bounds}/{name}"
                res.strategies[key] = s
                for which, scen in (("train", train_set), ("eval", eval_set)):
                    rep = evaluate_static(s, scen, ins.kappa, ins.K)
                    res.rows.append(_insurance_row(IF, bounds, name, which, rep))
                res.outcomes[key] = static_outcomes(s, eval_set)
            if cell.policy is not None:
                key = f"{IF}/{bounds}/NN"
                res.policies[key], res.histories[key] = cell.policy, cell.history
                for which, scen in (("train", train_set), ("eval", eval_set)):
                    R = evaluate_insurance_policy(cell.policy, scen)
                    res.rows.append(_insurance_row(IF, bounds, "NN", which,
                                                   report_outcomes(R, ins.kappa, 0.0, ins.K)))
                    if which == "eval":
                        res.outcomes[key] = R
    return res


# ------------------------------------------------------------------- output
def write_outputs(cfg: ExperimentConfig, res: ExperimentResult, out_dir=None) -> Path:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = FINANCE_COLUMNS if cfg.kind == "finance" else INSURANCE_COLUMNS
    write_table_csv(res.rows, columns, out / "results.csv")
    write_quantiles_csv(res.outcomes, out / "quantiles.csv")
    write_strategy_csv(res.strategies, out / "strategies.csv")
    files = ["results.csv", "quantiles.csv", "strategies.csv"]
    for i, (name, hist) in enumerate(res.histories.items()):
        fname = f"history_{i}.csv"
        write_history_csv(hist, out / fname)
        files.append(fname)
    write_manifest(out / "manifest.json", cfg.resolved(), cfg.digest(),
                   cfg.seeds.model_dump(), files,
                   {"histories": {f"history_{i}.csv": n for i, n in enumerate(res.histories)}})
    res.out_dir = out
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> ExperimentResult:
    """Dispatch on ``cfg.kind`` and (optionally) write the result files."""
    res = run_finance(cfg) if cfg.kind == "finance" else run_insurance(cfg)
    if write:
        write_outputs(cfg, res, out_dir)
    return res


def replace_section(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with fields of its active section replaced."""
    sect = getattr(cfg, cfg.kind).model_copy(update=changes)
    return cfg.model_copy(update={cfg.kind: sect})


__all__ = ["ExperimentResult", "InsuranceCell", "build_insurance_model", "fit_insurance_cell",
           "insurance_sets", "run_experiment", "run_finance", "run_insurance", "write_outputs",
           "replace_section"]
