import math

import numpy as np
import pytest

from halfspace_be.spectral_symbols import ModelParams, eta_point
from halfspace_be import coefficient_assembly as ca, profile_evaluator as pe, oracle_bvp as ob
from halfspace_be.errors import SingularDiscretization


def P(beta=1.0, dim=2):
    return ModelParams(a=1, beta=beta, theta=math.pi / 3, r=1, dim=dim)


def closed_form(params, lam, xi, d, prof):
    am = ca.assemble_amplitudes(params, lam, xi, d)
    cf = pe.eval_profile(am, prof.x)
    cfh = pe.eval_profile(am, prof.x_half)
    return cf["u"][0], cf["Q"][0], cfh["p"][0]


def test_zero_data_zero_profile():
    prof = ob.oracle_mode_solve(P(), 4j, [1.0], np.zeros(2), np.zeros((2, 2)), n=256)
    assert np.all(prof.u == 0) and np.all(prof.Q == 0) and np.all(prof.p_half == 0)


def test_single_mode_against_closed_form():
    rng = np.random.default_rng(5)
    d = ca.BoundaryModeData.random(2, rng)
    prof = ob.oracle_mode_solve(P(), 4j, [1.0], d.h_hat, d.H_hat, n=4096)
    u, Q, p = closed_form(P(), 4j, [1.0], d, prof)
    assert ob.relative_l2(prof, u, Q, p) < 1e-5
    assert abs(prof.richardson["order"] - 2.0) < 0.1
    # the self-reported error tracks the true one
    err = ob.relative_l2(prof, u, Q)
    assert 0.1 < prof.richardson["est_rel_error"] / err < 10


def test_three_dimensional_mode():
    rng = np.random.default_rng(8)
    Pm = P(0.5, dim=3)
    d = ca.BoundaryModeData.random(3, rng)
    lam, xi = 2.0 + 3.0j, [0.6, -0.8]
    prof = ob.oracle_mode_solve(Pm, lam, xi, d.h_hat, d.H_hat, n=2048)
    u, Q, p = closed_form(Pm, lam, xi, d, prof)
    assert ob.relative_l2(prof, u, Q, p) < 1e-4


def test_oracle_traceless_symmetric():
    rng = np.random.default_rng(1)
    d = ca.BoundaryModeData.random(2, rng)
    prof = ob.oracle_mode_solve(P(), 3.0, [0.5], d.h_hat, d.H_hat, n=512, richardson=False)
    assert np.abs(prof.Q - np.swapaxes(prof.Q, 0, 1)).max() == 0
    assert np.abs(np.trace(prof.Q)).max() < 1e-12 * np.abs(prof.Q).max()


@pytest.mark.parametrize("lam", [4j, 1.0, 10.0 + 10.0j])
def test_uniqueness_probe_nonsingular(lam):
    Pm = P()
    if lam == 1.0:
        lam = eta_point(Pm)
    rep = ob.oracle_uniqueness_probe(Pm, lam, [1.0], n=512)
    assert rep["normalized"] > 1e-8 and rep["rate_min"] > 0


def test_decay_rates_positive_in_sector():
    for lam in (4j, 1.0, -0.5 + 3j):
        assert min(r.real for r in ob.decay_rates(P(), lam, [0.7])) > 0


def test_bad_inputs():
    z2, z22 = np.zeros(2), np.zeros((2, 2))
    with pytest.raises(ValueError):
        ob.oracle_mode_solve(P(), 4j, [1.0], z2, z22, n=32)
    with pytest.raises(SingularDiscretization):
        ob.oracle_mode_solve(P(), 4j, [1.0], z2, z22, X_max=1.0, n=256)
    with pytest.raises(SingularDiscretization):
        ob.oracle_mode_solve(P(), -10.0, [0.1], z2, z22, n=256)
