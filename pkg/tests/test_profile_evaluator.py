import math

import mpmath as mp
import numpy as np
import pytest

from halfspace_be.spectral_symbols import ModelParams
from halfspace_be import coefficient_assembly as ca
from halfspace_be import profile_evaluator as pe


def test_eval_M_examples():
    assert pe.eval_M(2.0, 1.0, 0.0) == 0
    assert pe.eval_M(1.0, 1.0, 1.0) == pytest.approx(-math.exp(-1), rel=1e-15)
    assert pe.eval_M(2.0, 1.0, 1.0) == pytest.approx(math.exp(-2) - math.exp(-1), rel=1e-15)


def test_eval_M_against_mpmath():
    mp.mp.dps = 40
    rng = np.random.default_rng(3)
    g1 = rng.uniform(0.1, 5, 300) + 1j * rng.uniform(-3, 3, 300)
    d = np.concatenate([10.0 ** rng.uniform(-12, 0, 200), np.zeros(100)]) * np.exp(1j * rng.uniform(0, 6, 300))
    g2 = g1 + d
    t = rng.uniform(0, 8, 300)
    got = pe.eval_M(g1, g2, t)
    for a, b, x, v in zip(g1, g2, t, got):
        A, B, X = mp.mpc(a), mp.mpc(b), mp.mpf(x)
        ref = -X * mp.exp(-A * X) if A == B else (mp.exp(-A * X) - mp.exp(-B * X)) / (A - B)
        assert abs(v - complex(ref)) <= 1e-12 * abs(complex(ref)) + 1e-300


def test_eval_M_backends_agree():
    rng = np.random.default_rng(0)
    g1 = rng.uniform(0.5, 3, 1000) + 1j * rng.normal(size=1000)
    g2 = g1 + rng.choice([0, 1e-7, 0.5], 1000)
    t = rng.uniform(0, 5, 1000)
    assert np.allclose(pe._eval_M_numba(g1, g2, t), pe._eval_M_numpy(g1, g2, t), rtol=1e-14, atol=0)


@pytest.fixture(params=[(1.0, 2), (0.5, 3), (0.0, 2)])
def mode(request):
    beta, N = request.param
    P = ModelParams(a=1, beta=beta, dim=N)
    rng = np.random.default_rng(5)
    xi = np.zeros(N - 1)
    xi[0] = 1.3
    d = ca.BoundaryModeData.random(N, rng)
    return P, ca.assemble_amplitudes(P, 2 + 3j, xi, d, force_regular=beta == 0), d


def test_zero_amplitudes_zero_profile():
    P = ModelParams(a=1, beta=1)
    am = ca.assemble_amplitudes(P, 4j, [1.0], ca.BoundaryModeData.zeros(2))
    prof = pe.eval_profile(am, np.linspace(0, 5, 7), order=2)
    assert all(not np.any(v) for v in prof.values())


def test_boundary_traces(mode):
    P, am, d = mode
    prof = pe.eval_profile(am, np.array([0.0]), order=1)
    assert np.allclose(prof["u"][0][:, 0], d.h_hat, atol=1e-12)
    assert np.allclose(prof["Q"][1][..., 0], d.H_hat, atol=1e-12)


def test_derivatives_match_central_differences(mode):
    _, am, _ = mode
    x0 = np.array([0.7])
    errs = []
    for h in (1e-2, 1e-3):
        pr = pe.eval_profile(am, np.array([x0[0] - h, x0[0], x0[0] + h]), order=3)
        for k in range(3):
            fd = (pr["u"][k][..., 2] - pr["u"][k][..., 0]) / (2 * h)
            errs.append(np.max(np.abs(fd - pr["u"][k + 1][..., 1])))
    e = np.array(errs).reshape(2, 3).max(axis=1)
    assert np.log10(e[0] / e[1]) == pytest.approx(2.0, abs=0.2)


def test_volhevic_form_matches(mode):
    _, am, _ = mode
    x = np.linspace(0, 6, 50)
    a = pe.eval_profile(am, x, order=2)
    b = pe.eval_profile(am, x, order=2, form="volhevic")
    assert np.max(np.abs(a["u"] - b["u"])) < 1e-12 * np.max(np.abs(a["u"]))


def test_residuals_small_and_divergence_free(mode):
    P, am, d = mode
    r = pe.mode_residual(P, am, d)
    assert max(r.values()) < 1e-9


def test_perturbed_C_is_detected():
    P = ModelParams(a=1, beta=1)
    d = ca.BoundaryModeData.random(2, np.random.default_rng(2))
    am = ca.assemble_amplitudes(P, 2 + 3j, [1.0], d)
    am.C = am.C * 1.01
    assert pe.mode_residual(P, am, d)["momentum"] > 1e-4


def test_Q_symmetric_traceless(mode):
    _, am, _ = mode
    Q = pe.eval_profile(am, np.linspace(0, 4, 20))["Q"][0]
    assert np.max(np.abs(Q - np.swapaxes(Q, 0, 1))) < 1e-13
    assert np.max(np.abs(np.trace(Q))) < 1e-13


@pytest.mark.xfail(strict=True, reason="the gap is the solution's own O(|lam-eta|) dependence "
                   "on lam, ~2e-4 relative for Q and p at eps=1e-3 (see the scaling test below)")
def test_degenerate_consistency_1e4_at_1e3():
    P = ModelParams(a=1, beta=math.sqrt(2))
    eta = 1.0
    d = ca.BoundaryModeData.random(2, np.random.default_rng(4))
    reg = ca.assemble_amplitudes(P, eta * (1 + 1e-3), [0.8], d, force_regular=True)
    til = ca.assemble_amplitudes_degenerate(P, [0.8], d)
    x = pe.default_x_grid(til)
    a = pe.eval_profile(reg, x)
    b = pe.eval_profile(til, x)
    for k in ("u", "Q", "p"):
        assert np.max(np.abs(a[k] - b[k])) < 1e-4 * np.max(np.abs(b[k]))


def test_degenerate_consistency_scaling():
    """Regular vs tilde profiles differ by the first-order lam-derivative:
    the gap shrinks 10x per decade of |lam-eta| and the two-sided mean
    matches the tilde profile at O(eps^2)."""
    P = ModelParams(a=1, beta=math.sqrt(2))
    d = ca.BoundaryModeData.random(2, np.random.default_rng(4))
    til = ca.assemble_amplitudes_degenerate(P, [0.8], d)
    x = pe.default_x_grid(til)
    b = pe.eval_profile(til, x)

    def gap(lam_values):
        profs = [pe.eval_profile(ca.assemble_amplitudes(P, l, [0.8], d, force_regular=True), x)
                 for l in lam_values]
        return max(np.max(np.abs(sum(p[k] for p in profs) / len(profs) - b[k])) / np.max(np.abs(b[k]))
                   for k in ("u", "Q", "p"))

    g3, g4 = gap([1 + 1e-3]), gap([1 + 1e-4])
    assert g3 / g4 == pytest.approx(10, rel=0.05)
    assert gap([1 + 1e-3, 1 - 1e-3]) < 1e-6
    assert gap([1 + 1e-3j, 1 - 1e-3j]) < 1e-6
