"""Acceptance suite: one group of checks per numbered criterion.

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints
one PASS/FAIL line per criterion (see ``conftest.py``). Several groups train
networks or solve SAA problems on 10^5 scenarios and take minutes.
"""

import math
import time

import numpy as np
import pytest
import torch
from scipy import stats

from oracles import nested_survival_curve

from meandcvar.baselines import evaluate_static, saa_optimize, static_outcomes
from meandcvar.config import SaaSection, parse_config
from meandcvar.experiments import fit_insurance_cell, run_experiment
from meandcvar.insurance.control import (
    BoundsSchedule,
    InsurancePolicy,
    build_scenarios,
    evaluate_insurance_policy,
    inforce_matrix,
    rollout_insurance,
)
from meandcvar.insurance.engine import (
    CasualtyParams,
    CirParams,
    ContractSpec,
    GompertzMakehamParams,
    InsuranceModel,
    affine_be_coeffs,
    annual_profits,
    apv_components,
    casualty_profits,
    fair_premium,
    normalize_exposures,
    simulate_cube,
    simulate_factors,
    survivor_path,
)
from meandcvar.market import MarketParams, simulate_returns
from meandcvar.neural import DTYPE, grad_check
from meandcvar.penalty import TrainConfig, penalized_loss, train
from meandcvar.policy import ConstraintSet, FinancialPolicy, MarketProblem, evaluate_policy, \
    rollout
from meandcvar.risk import (
    LossSample,
    dcvar_aux,
    empirical_cvar,
    empirical_dcvar,
    empirical_var,
    minimize_eta,
    report_outcomes,
)

M = 100_000
KAPPA = 0.99
K = 30.0

# mean, constraint value, std, Sharpe per (constraint, strategy, N)
TABLE1 = {
    ("LO", "buy_and_hold", 4): (120.31, 29.97, 12.83, 1.583),
    ("LO", "buy_and_hold", 12): (120.32, 30.17, 12.82, 1.585),
    ("LO", "buy_and_hold", 52): (120.30, 30.11, 12.79, 1.587),
    ("LO", "constant_mix", 4): (120.31, 29.98, 12.84, 1.582),
    ("LO", "constant_mix", 12): (120.30, 30.09, 12.78, 1.588),
    ("LO", "constant_mix", 52): (120.24, 30.09, 12.78, 1.584),
    ("LO", "rnn", 4): (122.03, 29.98, 17.48, 1.260),
    ("LO", "rnn", 12): (122.51, 30.08, 18.42, 1.222),
    ("LO", "rnn", 52): (122.66, 29.99, 18.55, 1.222),
    ("RC", "buy_and_hold", 4): (126.05, 30.02, 12.57, 2.072),
    ("RC", "buy_and_hold", 12): (126.13, 30.16, 12.68, 2.061),
    ("RC", "buy_and_hold", 52): (126.13, 30.12, 12.71, 2.056),
    ("RC", "constant_mix", 4): (125.98, 29.93, 12.53, 2.073),
    ("RC", "constant_mix", 12): (126.05, 30.05, 12.63, 2.063),
    ("RC", "constant_mix", 52): (125.92, 29.84, 12.58, 2.060),
    ("RC", "rnn", 4): (126.61, 29.94, 13.97, 1.905),
    ("RC", "rnn", 12): (127.43, 30.01, 14.98, 1.831),
    ("RC", "rnn", 52): (127.75, 30.02, 15.61, 1.778),
    ("NC", "buy_and_hold", 4): (126.52, 30.06, 12.50, 2.122),
    ("NC", "buy_and_hold", 12): (126.65, 30.12, 12.65, 2.107),
    ("NC", "buy_and_hold", 52): (126.69, 30.14, 12.71, 2.100),
    ("NC", "constant_mix", 4): (126.39, 29.92, 12.43, 2.123),
    ("NC", "constant_mix", 12): (126.50, 29.94, 12.56, 2.110),
    ("NC", "constant_mix", 52): (126.63, 30.08, 12.68, 2.100),
    ("NC", "rnn", 4): (129.70, 30.07, 21.09, 1.408),
    ("NC", "rnn", 12): (134.06, 30.08, 19.13, 1.780),
    ("NC", "rnn", 52): (136.06, 29.43, 21.47, 1.680),
}


def _losses(gen, n):
    kind = gen.integers(3)
    if kind == 0:
        return gen.standard_normal(n) * gen.uniform(0.1, 10)
    if kind == 1:
        return gen.integers(-5, 6, n).astype(float)  # heavy ties
    return gen.standard_t(3, n)


# ---------------------------------------------------------------- 1 kernels
@pytest.mark.criterion(1)
def test_c1_kernel_exactness():
    t0 = time.perf_counter()
    s = LossSample(np.arange(1.0, 101.0))
    assert empirical_var(s, 0.95) == 95.0
    assert empirical_cvar(s, 0.95) == pytest.approx(98.0, abs=1e-12)
    assert empirical_dcvar(s, 0.95) == pytest.approx(47.5, abs=1e-12)
    # RU minimum over the whole support equals CVaR - mean
    ru = min(dcvar_aux(s, eta, 0.95) for eta in s.values)
    assert ru == pytest.approx(empirical_cvar(s, 0.95) - s.values.mean(), abs=1e-12)
    assert minimize_eta(s, 0.95) == (pytest.approx(95.0), pytest.approx(47.5, abs=1e-12))
    z = np.random.default_rng(0).standard_normal(1_000_000)
    analytic = stats.norm.pdf(stats.norm.ppf(0.99)) / 0.01
    assert analytic == pytest.approx(2.665, abs=1e-3)
    assert empirical_cvar(LossSample(z), 0.99) == pytest.approx(analytic, rel=0.01)
    assert time.perf_counter() - t0 < 5.0


# -------------------------------------------------------------- 2 RU identity
@pytest.mark.criterion(2)
def test_c2_ru_equivalence_randomized():
    gen = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        x = _losses(gen, int(gen.integers(1, 400)))
        kappa = float(gen.uniform(0.01, 0.995))
        _, d = minimize_eta(LossSample(x), kappa)
        worst = max(worst, abs(d - empirical_dcvar(LossSample(x), kappa)))
    assert worst <= 1e-10


# ---------------------------------------------------------- 3 deviation axioms
@pytest.mark.criterion(3)
def test_c3_translation_and_homogeneity():
    gen = np.random.default_rng(3)
    for _ in range(1000):
        x = _losses(gen, int(gen.integers(1, 300)))
        kappa = float(gen.uniform(0.05, 0.99))
        base = empirical_dcvar(LossSample(x), kappa)
        c = float(gen.uniform(-50, 50))
        a = float(gen.uniform(0.1, 20))
        assert abs(empirical_dcvar(LossSample(x + c), kappa) - base) <= 1e-10
        assert abs(empirical_dcvar(LossSample(a * x), kappa) - a * base) <= 1e-10


# ------------------------------------------------------------ 4 SAA benchmarks
_SAA_CACHE: dict = {}


def _market_sets(N):
    key = ("sets", N)
    if key not in _SAA_CACHE:
        p = MarketParams(n_steps=N)
        _SAA_CACHE[key] = (simulate_returns(p, M, seed=1, domain="market"),
                           simulate_returns(p, M, seed=1, domain="eval"))
    return _SAA_CACHE[key]


def _saa(label, kind, N):
    key = (label, kind, N)
    if key not in _SAA_CACHE:
        train_set, eval_set = _market_sets(N)
        # same warm start across horizons as the experiment runner
        prev = {12: 4, 52: 12}.get(N)
        kw = {} if prev is None else {"initial": _saa(label, kind, prev)[0].decision,
                                      "n_starts": SaaSection().warm_n_starts}
        s = saa_optimize(kind, train_set, K, KAPPA, ConstraintSet.from_label(label), seed=1,
                         **kw)
        _SAA_CACHE[key] = (s, evaluate_static(s, eval_set, KAPPA, K))
    return _SAA_CACHE[key]


@pytest.mark.criterion(4)
@pytest.mark.parametrize("N", [4, 12, 52])
@pytest.mark.parametrize("label", ["LO", "RC", "NC"])
def test_c4_table_benchmarks(label, N):
    bad = []
    for kind in ("buy_and_hold", "constant_mix"):
        _, rep = _saa(label, kind, N)
        mean, cons = TABLE1[(label, kind, N)][:2]
        print(f"{label} {kind} N={N}: mean {rep.mean:.2f} (paper {mean}), "
              f"constraint {rep.dcvar_k:.2f} (paper {cons})")
        if abs(rep.mean - mean) > 1.0 or abs(rep.dcvar_k - cons) > 0.5:
            bad.append((kind, round(rep.mean, 2), round(rep.dcvar_k, 2)))
    assert not bad


# ------------------------------------------------------------------ 5 NN vs CM
@pytest.mark.criterion(5)
def test_c5_nn_beats_constant_mix_nc4():
    p = MarketParams(n_steps=4)
    pol = FinancialPolicy(4, ConstraintSet.from_label("NC"), seed=1)
    cfg = TrainConfig(K=K, kappa=KAPPA, epochs=400, batch_size=5000, lr=1e-3, lr_decay=0.997,
                      eta_inner_steps=5, eta_inner_lr=0.05, seed=1)
    train(pol, MarketProblem(p, 50_000, seed=1), cfg)
    _, eval_set = _market_sets(4)
    rep = report_outcomes(evaluate_policy(pol, eval_set), KAPPA, 100.0, K)
    _, cm = _saa("NC", "constant_mix", 4)
    print(f"NN mean {rep.mean:.2f} DCVaR {rep.dcvar_k:.2f}; CM mean {cm.mean:.2f}")
    assert 29.0 <= rep.dcvar_k <= 30.5
    assert rep.mean >= cm.mean + 1.5


# ------------------------------------------------------------------ 6 Sharpe
@pytest.mark.criterion(6)
def test_c6_sharpe_convention_reproduces_table():
    for key, (mean, _, std, sharpe) in TABLE1.items():
        assert round((mean - 100.0) / std, 3) == pytest.approx(sharpe, abs=1e-9), key


# -------------------------------------------------------------- 7 Theorem 1
@pytest.mark.criterion(7)
def test_c7_cvar_and_calibrated_dcvar_agree():
    p = MarketParams(mu=(0.09, 0.15), vols=(0.08, 0.12), corr=((1.0, 0.2), (0.2, 1.0)),
                     n_steps=1)
    scen = simulate_returns(p, M, seed=7)
    lo = ConstraintSet.from_label("LO", 2)
    K_cvar = -95.0  # worst-1% average terminal wealth of at least 95
    s_cvar = saa_optimize("buy_and_hold", scen, K_cvar, KAPPA, lo, seed=7, risk="cvar")
    V = static_outcomes(s_cvar, scen)
    assert empirical_cvar(LossSample(-V), KAPPA) <= K_cvar + 0.05
    K_tilde = K_cvar + V.mean()
    s_dcvar = saa_optimize("buy_and_hold", scen, K_tilde, KAPPA, lo, seed=7)
    W = static_outcomes(s_dcvar, scen)
    print(f"CVaR objective {V.mean():.4f}, DCVaR objective {W.mean():.4f}, K~ {K_tilde:.3f}")
    assert W.mean() == pytest.approx(V.mean(), rel=0.01)


# -------------------------------------------------------------- 8 gradients
@pytest.mark.criterion(8)
def test_c8_financial_pipeline_gradients():
    scen = simulate_returns(MarketParams(n_steps=3), 64, seed=8)
    pol = FinancialPolicy(4, ConstraintSet.from_label("LO"), hidden_dims=(6, 6), seed=8)
    eta = torch.tensor(-95.0, dtype=DTYPE, requires_grad=True)

    def loss():
        return penalized_loss(rollout(pol, scen).terminal, eta, 0.9, 5.0, 2.0, 1.5).loss

    assert grad_check(loss, list(pol.parameters()) + [eta], epsilon=1e-6) < 1e-4


@pytest.mark.criterion(8)
def test_c8_insurance_pipeline_gradients():
    model, _ = normalize_exposures(InsuranceModel(), n_mc=5000, seed=8)
    scen = build_scenarios(model, 100, seed=8, alpha_if=inforce_matrix("IF11"))
    pol = InsurancePolicy(scen.n_cohorts, BoundsSchedule.from_label("CSTB"), hidden=5,
                          head_dims=(6, 6), seed=8)
    eta = torch.tensor(-20.0, dtype=DTYPE, requires_grad=True)

    def loss():
        return penalized_loss(rollout_insurance(pol, scen).reward, eta, 0.9, 1.0, 3.0, 2.0).loss

    assert grad_check(loss, list(pol.parameters()) + [eta], epsilon=1e-6) < 1e-4


# ------------------------------------------------------------ 9 affine BE
@pytest.mark.criterion(9)
def test_c9_affine_survival_vs_nested_mc():
    t0 = time.perf_counter()
    gm, cir = GompertzMakehamParams(), CirParams()
    table = affine_be_coeffs(gm, cir, 65.0, 10)
    misses = []
    for iz, z in enumerate((0.5, 1.0, 2.0)):
        means, ses = nested_survival_curve(cir, gm, 65.0, 10, z, 100_000, seed=90 + iz)
        for h in range(1, 11):
            # h = 1 has no randomness (Z_0 = z), so only rounding separates the two
            tol = 3 * ses[h - 1] + 1e-12
            if abs(float(table.survival(h, 0, z)) - means[h - 1]) > tol:
                misses.append((h, z))
    assert not misses
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------- 10 actuarial identities
@pytest.mark.criterion(10)
@pytest.mark.parametrize("kind", ["mortality_term", "longevity_annuity"])
def test_c10_fair_premium_apv(kind):
    gm, cir = GompertzMakehamParams(), CirParams()
    c = ContractSpec(kind)
    est = fair_premium(c, gm, cir, n_mc=M, seed=10)
    z = simulate_factors(cir, cir, c.horizon, M, seed=11)[:, :-1, 0]
    N, D = survivor_path(1.0, c.age, z, gm)
    base, ben = apv_components(c, N, D)
    apv = est.pure_premium * base - ben
    assert abs(apv.mean()) <= 3 * apv.std(ddof=1) / math.sqrt(M)


@pytest.mark.criterion(10)
def test_c10_profits_vanish_without_factor_noise():
    gm = GompertzMakehamParams()
    det = CirParams(sigma=0.0)
    model, _ = normalize_exposures(InsuranceModel(cir_M=det, cir_L=det), n_mc=1000, seed=10)
    for line in "ML":
        c = model.contract(line)
        table = affine_be_coeffs(gm, det, c.age, c.horizon, n_ages=c.horizon + 1)
        X = annual_profits(c, np.ones((4, c.horizon)), table, gm)
        np.testing.assert_allclose(X[:, 1:], 0.0, atol=1e-11)


@pytest.mark.criterion(10)
def test_c10_profits_are_centred():
    model, _ = normalize_exposures(InsuranceModel(), n_mc=50_000, seed=10)
    cube = simulate_cube(model, M, seed=12, n_inforce=0, n_ctrl=1)
    misses = []
    for li in range(2):
        for d in range(2, model.horizon + 1):
            x = cube.X[:, 0, li, d - 1]
            if abs(x.mean()) > 3 * x.std(ddof=1) / math.sqrt(len(x)) + 1e-12:
                misses.append((li, d))
    assert not misses


@pytest.mark.criterion(10)
def test_c10_casualty_mean():
    Y = casualty_profits(CasualtyParams(5.0, 1.0, 0.10), 1, M, seed=13)[:, 0]
    assert abs(Y.mean() - 0.5) <= 4 * Y.std(ddof=1) / math.sqrt(len(Y))


# ------------------------------------------------------------ 11 insurance
@pytest.fixture(scope="module")
def insurance_sets():
    model, _ = normalize_exposures(InsuranceModel(), n_mc=M, seed=0)
    train_set = build_scenarios(model, 50_000, seed=0, stream=0)
    eval_set = build_scenarios(model, M, seed=0, stream=1)
    return train_set, eval_set


def _static_dcvar(scen, profile):
    R = scen.static_reward(np.tile(profile, (scen.n_ctrl, 1))).numpy()
    return report_outcomes(R, KAPPA).dcvar_k


@pytest.mark.criterion(11)
def test_c11a_longevity_inforce_least_risky(insurance_sets):
    train_set, _ = insurance_sets
    d = {}
    for comp in ((0, 1), (1, 0), (1, 1)):
        d[comp] = _static_dcvar(train_set.with_inforce(inforce_matrix(comp)), (0.0, 0.0, 0.0))
    print("in-force-only DCVaR", d)
    assert d[(0, 1)] < min(d[(1, 0)], d[(1, 1)])


@pytest.mark.criterion(11)
def test_c11b_casualty_only_profile_riskiest(insurance_sets):
    train_set, _ = insurance_sets
    profiles = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 1, 1)]
    d = {p: _static_dcvar(train_set, p) for p in profiles}
    print("new-business DCVaR", d)
    assert d[(0, 0, 1)] == max(d.values())


_CELLS: dict = {}


def _cell(insurance_sets, IF, bounds):
    if (IF, bounds) not in _CELLS:
        train_set, eval_set = insurance_sets
        a_if = inforce_matrix(IF)
        tr, ev = train_set.with_inforce(a_if), eval_set.with_inforce(a_if)
        ins = parse_config({"kind": "insurance"}).insurance
        cell = fit_insurance_cell(ins, tr, IF, bounds, init_seed=0)
        out = {name: report_outcomes(static_outcomes(s, ev), KAPPA)
               for name, s in cell.strategies.items()}
        out["NN"] = report_outcomes(evaluate_insurance_policy(cell.policy, ev), KAPPA)
        for name, r in out.items():
            print(f"{IF}/{bounds} {name}: mean {r.mean:.3f} std {r.std:.3f} "
                  f"DCVaR {r.dcvar_k:.3f} VaR {r.var_k:.3f}")
        _CELLS[(IF, bounds)] = out
    return _CELLS[(IF, bounds)]


CELLS = [("IF00", "LO"), ("IF00", "CSTB"), ("IF11", "LO"), ("IF11", "CSTB"), ("IF00", "TDB")]


@pytest.mark.criterion(11)
@pytest.mark.parametrize("IF, bounds", CELLS)
def test_c11c_policy_ordering(insurance_sets, IF, bounds):
    r = _cell(insurance_sets, IF, bounds)
    nn, ft, const = r["NN"].mean, r["FT"].mean, r["Const"].mean
    if bounds == "TDB":
        assert abs(nn - ft) <= 0.02 * abs(ft)
    else:
        assert nn >= ft - 0.02 * abs(ft)
        assert ft >= const - 0.02 * abs(const)


@pytest.mark.criterion(11)
@pytest.mark.parametrize("IF, bounds", CELLS)
def test_c11d_eval_dcvar_within_limit(insurance_sets, IF, bounds):
    r = _cell(insurance_sets, IF, bounds)
    assert all(rep.dcvar_k <= 30.5 for rep in r.values()), {k: v.dcvar_k for k, v in r.items()}


# ------------------------------------------------------------ 12 determinism
@pytest.mark.criterion(12)
@pytest.mark.parametrize("kind", ["finance", "insurance"])
def test_c12_rerun_byte_identical(tmp_path, kind):
    if kind == "finance":
        data = {"kind": "finance", "seeds": {"scenario": 5, "init": 5, "eval": 5},
                "finance": {"constraints": ["LO", "NC"], "saa_paths": 20_000,
                            "eval_paths": 20_000, "train_paths": 5000, "train_nn": True,
                            "training": {"epochs": 5, "batch_size": 2500}}}
    else:
        data = {"kind": "insurance", "seeds": {"scenario": 5, "init": 5, "eval": 5},
                "insurance": {"pricing_paths": 10_000, "train_paths": 5000, "eval_paths": 5000,
                              "in_force": ["IF00", "IF11"], "bounds": ["CSTB"],
                              "training": {"epochs": 3, "batch_size": 2500}}}
    cfg = parse_config(data)
    a = run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert a.rows
    for f in sorted((tmp_path / "a").glob("*.csv")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
