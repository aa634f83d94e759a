import json
import warnings

import numpy as np
import pytest

from dmgda import certificates
from dmgda.algorithm import AlgoConfig, FeasibilityWarning, run
from dmgda.problems import Sin2PL, make_plquadratic, make_sin2pl
from dmgda.topology import build_mixing
from dmgda.verify import (
    REGISTERED_CHECKS, TrajectoryRecorder, VerificationReport, check_consensus_recursions,
    check_lemma1_constant, check_problem_certificates, check_stationarity_oracle, check_tracking,
    verify_run,
)


def trajectory(prob, W, cfg, x0, y0):
    rec = TrajectoryRecorder()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FeasibilityWarning)
        run(cfg, prob, W, x0, y0, observers=[rec])
    return rec.states


def hetero_init(m, d, p, seed=0):
    rng = np.random.default_rng(seed)
    return 3 * rng.standard_normal((m, d)), 3 * rng.standard_normal((m, p))


# -- tracking -----------------------------------------------------------------

def test_tracking_passes_on_valid_run():
    prob = make_plquadratic(5, 3, 2, sigma=1.0, seed=0)
    states = trajectory(prob, build_mixing("path", 5), AlgoConfig(T=200, gamma=0.02, lam=0.1),
                        np.ones(3), np.zeros(2))
    res = check_tracking(states)
    assert res.passed and res.worst <= 1e-10


def test_tracking_detects_and_locates_perturbation():
    prob = make_sin2pl(4, 2, seed=0)
    states = trajectory(prob, build_mixing("ring", 4), AlgoConfig(T=50, gamma=0.05, lam=0.1),
                        np.ones(2), np.zeros(2))
    states[17].w_y[2, 1] += 1e-3
    res = check_tracking(states)
    assert not res.passed
    assert res.location == {"t": 17, "block": "y"}


def test_single_node_tracking_deviation_is_exactly_zero():
    prob = make_sin2pl(1, 3, seed=0)
    states = trajectory(prob, None, AlgoConfig(T=100, gamma=0.05, lam=0.1), np.ones(3), np.zeros(3))
    assert check_tracking(states).worst == 0.0


# -- consensus recursions -------------------------------------------------------

def test_recursions_trivial_for_symmetric_noiseless_run():
    base = make_sin2pl(1, 2, sigma=0.0, seed=0)
    prob = Sin2PL(np.tile(base.D, (4, 1, 1)), np.tile(base.c, (4, 1)), base.P)
    cfg = AlgoConfig(T=100, gamma=0.05, lam=0.1)
    states = trajectory(prob, build_mixing("ring", 4), cfg, np.ones(2), np.zeros(2))
    res = check_consensus_recursions(states, build_mixing("ring", 4), cfg.resolve(prob.constants))
    assert res.passed


def test_recursions_hold_with_positive_slack_on_heterogeneous_ring():
    prob = make_sin2pl(4, 2, 3, sigma=1.0, seed=1)
    W = build_mixing("ring", 4)
    cfg = AlgoConfig(T=300, gamma=0.05, lam=0.1, seed=2)
    states = trajectory(prob, W, cfg, *hetero_init(4, 2, 3))
    res = check_consensus_recursions(states, W, cfg.resolve(prob.constants))
    assert res.passed and res.worst > 0
    assert "nu_measured=0.333333" in res.detail


@pytest.mark.parametrize("family,m", [("ring", 8), ("ring", 16), ("path", 16)])
def test_recursions_with_understated_nu_are_violated(family, m):
    prob = make_sin2pl(m, 2, sigma=0.0, seed=0)
    W = build_mixing(family, m)
    cfg = AlgoConfig(T=200, gamma=1e-3, lam=1e-3, schedule_mode="constant")
    states = trajectory(prob, W, cfg, *hetero_init(m, 2, 2))
    assert check_consensus_recursions(states, W, cfg).passed
    res = check_consensus_recursions(states, W, cfg, nu=W.nu / 2)
    assert not res.passed and res.worst < 0
    assert res.location["inequality"] in ("contraction", "displacement")
    assert "parameterization" in res.detail


def test_recursions_require_resolved_config():
    with pytest.raises(ValueError):
        check_consensus_recursions([], None, AlgoConfig())


def test_recursions_use_recorded_tilde_or_recompute():
    prob = make_plquadratic(3, 2, 2, seed=0)
    W = build_mixing("ring", 3)
    cfg = AlgoConfig(T=40, gamma=0.02, lam=0.1).resolve(prob.constants)
    states = trajectory(prob, W, cfg, *hetero_init(3, 2, 2))
    with_tilde = check_consensus_recursions(states, W, cfg)
    for s in states:
        s.x_tilde = s.y_tilde = None
    without = check_consensus_recursions(states, W, cfg)
    assert with_tilde.worst == pytest.approx(without.worst, rel=1e-9, abs=1e-14)


# -- problem certificates -------------------------------------------------------

def test_sin2pl_defaults_pass_every_certificate():
    res = check_problem_certificates(make_sin2pl(8, 4, seed=0), n_samples=1000)
    assert res.passed, [c.to_dict() for c in res.children if not c.passed]
    names = {c.name for c in res.children}
    assert {"finite_difference", "smoothness", "unbiasedness", "pl", "phi_pl_constant"} <= names


def test_plquadratic_certificates_pass():
    res = check_problem_certificates(make_plquadratic(6, 4, 3, seed=1), n_samples=500)
    assert res.passed, [c.to_dict() for c in res.children if not c.passed]
    assert {"error_bound", "quadratic_growth"} <= {c.name for c in res.children}


def test_understated_smoothness_constant_fails():
    prob = make_plquadratic(4, 3, 3, seed=0)
    weak = prob.with_constants(L_f=prob.constants.L_f / 2)
    res = certificates.smoothness(weak, 1000)
    assert not res.passed and res.worst > 1.0
    assert certificates.smoothness(prob, 1000).passed


def test_overstated_pl_constant_fails():
    prob = make_plquadratic(4, 3, 3, seed=0)
    checks = certificates.dual_conditions(prob.with_constants(mu=4 * prob.constants.mu * 4), 300)
    assert not next(c for c in checks if c.name == "pl").passed


def test_noiseless_unbiasedness_has_zero_deviation():
    res = certificates.unbiasedness(make_sin2pl(3, 2, sigma=0.0, seed=0), n_samples=1000)
    assert res.passed and res.worst == 0.0


def test_phi_constant_grid():
    assert certificates.phi_pl_ratio_min() == pytest.approx(0.17553, abs=1e-4)
    assert certificates.phi_pl_constant().passed


def test_finite_difference_flags_wrong_gradient():
    prob = make_sin2pl(2, 2, seed=0)

    class Broken(type(prob)):
        def node_gradients(self, X, Y, nodes=None):
            gx, gy = super().node_gradients(X, Y, nodes)
            return gx * 1.01, gy

    broken = Broken(prob.D, prob.c, prob.P)
    res = certificates.finite_difference(broken, 50)
    assert not res.passed and res.location is not None


# -- smoothness of the primal objective ------------------------------------------

def test_primal_smoothness_ratio_on_sin2pl():
    prob = make_sin2pl(8, 4, seed=0)
    res = check_lemma1_constant(prob, 500)
    bound = np.linalg.norm(prob.D_bar, 2) / prob.constants.L
    assert res.passed and res.worst <= bound * (1 + 1e-9)
    assert res.worst >= 0.5 * bound


def test_primal_smoothness_single_quadratic():
    prob = Sin2PL([[[2.0]]], [[0.0]], [[1.0]])
    res = check_lemma1_constant(prob, 100)
    assert res.passed
    assert res.worst == pytest.approx(2.0 / prob.constants.L)


def test_primal_smoothness_understated_constant_fails():
    prob = make_plquadratic(4, 3, 3, seed=2)
    true_norm = np.linalg.norm(prob.H_F, 2)
    assert not check_lemma1_constant(prob, 200, L=true_norm / 4).passed
    assert check_lemma1_constant(prob, 200, L=true_norm * 1.001).passed


def test_stationarity_oracle_check():
    prob = make_plquadratic(3, 3, 2, seed=0)
    assert check_stationarity_oracle(prob, np.array([0.5, -1.0, 2.0])).passed


# -- report --------------------------------------------------------------------

def test_full_report_round_trips_to_json():
    prob = make_sin2pl(4, 2, seed=0)
    W = build_mixing("ring", 4)
    cfg = AlgoConfig(T=60, gamma=0.05, lam=0.1)
    states = trajectory(prob, W, cfg, np.ones(2), np.zeros(2))
    report = verify_run(states, prob, W, cfg, n_samples=200, warnings=["note"])
    assert set(report.results) == set(REGISTERED_CHECKS)
    assert report.passed
    doc = json.loads(report.to_json())
    assert doc["passed"] is True and doc["warnings"] == ["note"]
    text = report.to_text()
    assert text.rstrip().endswith("overall: PASS") and "[WARN] note" in text
    with pytest.raises(ValueError):
        report.add(report.results["tracking"])


def test_report_fails_when_any_check_fails():
    report = VerificationReport()
    report.add(certificates.CheckResult("a", True, 0.0))
    report.add(certificates.CheckResult("b", False, 1.0))
    assert not report.passed
