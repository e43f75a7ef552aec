import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meandcvar.insurance.control import (
    BoundsSchedule,
    FeatureLayout,
    InsurancePolicy,
    InsuranceProblem,
    InsuranceScenarios,
    bounds_at,
    build_scenarios,
    default_insurance_config,
    evaluate_insurance_policy,
    inforce_matrix,
    inverse_box_project,
    make_insurance_features,
    rollout_insurance,
    train_insurance,
)
from meandcvar.insurance.engine import InsuranceModel, discounted_reward, normalize_exposures, simulate_cube
from meandcvar.neural import DTYPE, box_project, grad_check
from meandcvar.penalty import penalized_loss


@pytest.fixture(scope="module")
def model():
    return normalize_exposures(InsuranceModel(), n_mc=20_000, seed=1)[0]


@pytest.fixture(scope="module")
def cube(model):
    return simulate_cube(model, 400, seed=5, n_inforce=1, n_ctrl=5)


@pytest.fixture(scope="module")
def scen(cube):
    return InsuranceScenarios.from_cube(cube, inforce_matrix("IF11"))


# -------------------------------------------------------------------- bounds


def test_bounds_examples():
    cstb = BoundsSchedule.from_label("CSTB")
    for s in range(5):
        lo, hi = bounds_at(cstb, s)
        assert (lo[0], hi[0]) == (0.6, 30.0)
        np.testing.assert_array_equal(lo, [0.6, 0.9, 0.6])
        np.testing.assert_array_equal(hi, [30.0, 10.0, 5.0])
    tdb = BoundsSchedule.from_label("TDB")
    np.testing.assert_array_equal(bounds_at(tdb, 0)[0], [0.8, 0.8, 0.6])
    np.testing.assert_array_equal(bounds_at(tdb, 0)[1], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(bounds_at(tdb, 4)[0], [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(bounds_at(tdb, 4)[1], [10.0, 10.0, 10.0])
    lo, hi = bounds_at(BoundsSchedule.from_label("LO"), 2)
    np.testing.assert_array_equal(lo, 0.0)
    assert np.all(np.isinf(hi))


def test_bounds_errors():
    with pytest.raises(IndexError):
        bounds_at(BoundsSchedule.from_label("LO"), 5)
    with pytest.raises(ValueError, match="TDB"):
        BoundsSchedule.from_label("TDB", n_ctrl=3)
    with pytest.raises(ValueError, match="unknown bounds"):
        BoundsSchedule.from_label("XX")
    with pytest.raises(ValueError, match="lower bound exceeds"):
        BoundsSchedule("custom", np.ones((2, 3)), np.zeros((2, 3)))


@given(st.floats(0.001, 0.999), st.floats(-5, 5), st.floats(0.1, 20), st.floats(1e-3, 40))
def test_inverse_box_roundtrip(frac, lo, width, excess):
    a = lo + frac * width
    raw = inverse_box_project([a], [lo], [lo + width])
    back = box_project(torch.tensor(raw, dtype=DTYPE), [lo], [lo + width])
    assert float(back[0]) == pytest.approx(a, rel=1e-7, abs=1e-7)
    raw = inverse_box_project([lo + excess], [lo], [np.inf])
    back = box_project(torch.tensor(raw, dtype=DTYPE), [lo], [np.inf])
    assert float(back[0]) == pytest.approx(lo + excess, rel=1e-7, abs=1e-7)


# ------------------------------------------------------------------ features


def test_feature_dimensions():
    for A in (1, 6, 9):
        assert FeatureLayout(A, 5).dim == 5 + 2 * A
        assert FeatureLayout(A, 5, mask=True).dim == 5 + 3 * A
    pol = InsurancePolicy(6, BoundsSchedule.from_label("LO"))
    assert pol.cell.weight_ih.shape[1] == 17


def test_features_initial_date():
    lay = FeatureLayout(6, 5)
    x = make_insurance_features(lay, 0, torch.zeros(4, dtype=DTYPE), torch.zeros(4, 3, dtype=DTYPE),
                                torch.zeros(4, 6, 2, dtype=DTYPE))
    assert x.shape == (4, 17)
    np.testing.assert_array_equal(x[:, 2:5].numpy(), 0.0)
    np.testing.assert_array_equal(x[:, 5:].numpy(), 0.0)


def test_scenario_layout(scen):
    # nothing is realised before the first decision and no new cohort exists yet
    np.testing.assert_array_equal(scen.partial[..., 0], 0.0)
    np.testing.assert_array_equal(scen.survival[:, 1:, :, 0], 0.0)
    assert np.all(scen.survival[:, 0, :, 0] > 0.9)
    # the cohort written at s = 2 is visible from s = 3 on
    assert np.all(scen.survival[:, 3, :, 3] > 0) and np.all(scen.survival[:, 3, :, 2] == 0)


def test_inforce_matrix():
    np.testing.assert_array_equal(inforce_matrix("IF11", 2), [[1, 1, 0], [1, 1, 0]])
    np.testing.assert_array_equal(inforce_matrix("IF00"), [[0, 0, 0]])


# ------------------------------------------------------------------- rewards


def test_static_reward_matches_calendar_route(cube, scen):
    rng = np.random.default_rng(0)
    prof = rng.uniform(0, 3, (5, 3))
    c = cube.take(slice(None))
    c.alpha_if = inforce_matrix("IF11")
    np.testing.assert_allclose(scen.static_reward(prof).numpy(), discounted_reward(c, prof),
                               rtol=1e-12, atol=1e-10)


def test_static_reward_zero_and_linear(cube):
    s00 = InsuranceScenarios.from_cube(cube, inforce_matrix("IF00"))
    np.testing.assert_array_equal(s00.static_reward(np.zeros((5, 3))).numpy(), 0.0)
    prof = np.tile([1.0, 1.0, 0.0], (5, 1))
    np.testing.assert_allclose(s00.static_reward(2 * prof).numpy(),
                               2 * s00.static_reward(prof).numpy(), rtol=1e-13)
    with pytest.raises(ValueError, match="profile must have shape"):
        s00.static_reward(np.zeros((4, 3)))


def test_warm_start_reproduces_profile(scen):
    prof = np.array([[1.0, 2.0, 0.5], [3.0, 1.0, 0.2], [0.7, 0.7, 0.7], [4.0, 0.1, 2.0], [1, 1, 1]])
    pol = InsurancePolicy(scen.n_cohorts, BoundsSchedule.from_label("LO"), seed=3)
    pol.warm_start(prof)
    with torch.no_grad():
        out = rollout_insurance(pol, scen)
    np.testing.assert_allclose(out.decisions.numpy(), np.broadcast_to(prof, (scen.n_paths, 5, 3)),
                               rtol=1e-6)
    np.testing.assert_allclose(out.reward.numpy(), scen.static_reward(prof).numpy(), rtol=1e-6)


def test_zero_exposure_policy(cube):
    s00 = InsuranceScenarios.from_cube(cube, inforce_matrix("IF00"))
    pol = InsurancePolicy(s00.n_cohorts, BoundsSchedule.from_label("LO"))
    pol.warm_start(np.zeros((5, 3)))
    with torch.no_grad():
        R = rollout_insurance(pol, s00).reward.numpy()
    assert np.max(np.abs(R)) < 1e-3


@pytest.mark.parametrize("label", ["LO", "CSTB", "TDB"])
def test_decisions_strictly_inside_bounds(scen, label):
    sched = BoundsSchedule.from_label(label)
    pol = InsurancePolicy(scen.n_cohorts, sched, seed=7)
    with torch.no_grad():
        d = rollout_insurance(pol, scen).decisions.numpy()
    assert np.all(d > sched.lower) and np.all(d < sched.upper)


def test_rollout_predictable(model):
    """Changing results realised at calendar >= s leaves alpha_0..alpha_s unchanged."""
    cube = simulate_cube(model, 64, seed=9, n_inforce=1, n_ctrl=5)
    base = InsuranceScenarios.from_cube(cube, inforce_matrix("IF11"))
    pol = InsurancePolicy(base.n_cohorts, BoundsSchedule.from_label("LO"), seed=2)
    with torch.no_grad():
        ref = rollout_insurance(pol, base).decisions.numpy()
    cal = cube.cohort_calendar()
    rng = np.random.default_rng(1)
    for s in range(5):
        noisy = cube.take(slice(None))
        future = (cal >= s)[None, :, None, :]
        noisy.X = np.where(future, noisy.X + rng.normal(0, 5, noisy.X.shape), noisy.X)
        # survival at development d of cohort k is known at calendar k + d - 1
        k = np.arange(-1, 5)[:, None]
        d = np.arange(noisy.survival.shape[-1])[None, :]
        fut_s = (k + d - 1 >= s)[None, :, None, :] & (d > 0)[None, :, None, :]
        noisy.survival = np.where(fut_s, noisy.survival * 0.5, noisy.survival)
        other = InsuranceScenarios.from_cube(noisy, inforce_matrix("IF11"))
        with torch.no_grad():
            out = rollout_insurance(pol, other).decisions.numpy()
        np.testing.assert_array_equal(out[:, : s + 1], ref[:, : s + 1])
        if s < 4:
            assert not np.allclose(out[:, s + 1:], ref[:, s + 1:])


def test_rollout_layout_mismatch(scen):
    pol = InsurancePolicy(scen.n_cohorts + 1, BoundsSchedule.from_label("LO"))
    with pytest.raises(ValueError, match="cohort layout"):
        rollout_insurance(pol, scen)


def test_evaluate_chunking(scen):
    pol = InsurancePolicy(scen.n_cohorts, BoundsSchedule.from_label("CSTB"), seed=4)
    full = evaluate_insurance_policy(pol, scen, chunk=10_000)
    parts = evaluate_insurance_policy(pol, scen, chunk=37)
    np.testing.assert_allclose(full, parts, rtol=1e-13)


def test_build_scenarios_chunk_invariant(model):
    a = build_scenarios(model, 50, seed=3, chunk_size=50)
    b = build_scenarios(model, 50, seed=3, chunk_size=50)
    np.testing.assert_array_equal(a.partial, b.partial)
    c = build_scenarios(model, 50, seed=3, stream=1, chunk_size=50)
    assert not np.array_equal(a.partial, c.partial)
    d = build_scenarios(model, 60, seed=3, chunk_size=25)
    assert d.n_paths == 60 and np.all(np.isfinite(d.partial))


# ------------------------------------------------------------------ training


def test_insurance_pipeline_grad_check(scen):
    small = scen.take(slice(0, 120))
    pol = InsurancePolicy(small.n_cohorts, BoundsSchedule.from_label("CSTB"), hidden=6,
                          head_dims=(8, 8), seed=11)
    eta = torch.tensor(-20.0, dtype=DTYPE, requires_grad=True)

    def loss():
        R = rollout_insurance(pol, small).reward
        return penalized_loss(R, eta, 0.9, 1.0, 3.0, 2.0).loss

    params = list(pol.parameters()) + [eta]
    assert grad_check(loss, params, epsilon=1e-6) < 1e-4


def test_zero_epochs_returns_initial(scen):
    pol = InsurancePolicy(scen.n_cohorts, BoundsSchedule.from_label("LO"), seed=1)
    before = [p.detach().clone() for p in pol.parameters()]
    res = train_insurance(InsuranceProblem(scen), pol, default_insurance_config(epochs=0))
    assert res.policy is pol
    for a, b in zip(before, pol.parameters()):
        torch.testing.assert_close(a, b.detach())


def test_problem_requires_finite_K(scen):
    with pytest.raises(ValueError):
        InsuranceProblem(scen, K=float("inf"))


def test_short_training_improves_and_reports(model):
    tr = build_scenarios(model, 4000, seed=2, stream=0)
    ev = build_scenarios(model, 4000, seed=2, stream=1)
    pol = InsurancePolicy(tr.n_cohorts, BoundsSchedule.from_label("LO"), seed=0)
    prof = np.tile([1.0, 1.0, 0.5], (5, 1))
    pol.warm_start(prof)
    start = float(tr.static_reward(prof).mean())
    cfg = default_insurance_config(epochs=12, batch_size=2000, full_batch_steps=1, lr=1e-2,
                                   K=30.0, delta=0.3)
    res = train_insurance(InsuranceProblem(tr), pol, cfg, ev)
    assert res.report.n == 4000
    assert res.train.history[-1]["mean_utility"] > start
