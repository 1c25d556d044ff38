import math

import numpy as np
import pytest
import sympy

from halfspace_be.spectral_symbols import ModelParams
from halfspace_be import spectral_symbols as ss
from halfspace_be import coefficient_assembly as ca
from halfspace_be.errors import DegenerateLambda, BetaZero

SQ2 = math.sqrt(2)


def P(beta=1.0, dim=2):
    return ModelParams(a=1, beta=beta, dim=dim)


def test_calC_naive_vs_rearranged():
    v1 = ca.eval_calC(P(), 2 + 2j, [1.0])
    v2 = ca.eval_calC_naive(P(), 2 + 2j, [1.0])
    assert abs(v1 - v2) < 1e-8 * abs(v2)


def test_calC_dual_formula_random_modes():
    rng = np.random.default_rng(0)
    for _ in range(200):
        lam = 10 ** rng.uniform(0.1, 3) * np.exp(1j * rng.uniform(-2, 2))
        xi = [10 ** rng.uniform(-1, 1)]
        v1, v2 = ca.eval_calC(P(), lam, xi), ca.eval_calC_naive(P(), lam, xi)
        assert abs(v1 - v2) < 1e-8 * abs(v2)


def test_calC_degenerate_guard():
    with pytest.raises(DegenerateLambda):
        ca.eval_calC(P(SQ2), 1.0, [1.0])


def test_calA_decoupled_example():
    # beta = 0, lam = 2, xi' = 0: B^3 (L1 + L2) with B = L1 = sqrt 3, L2 = sqrt 2
    v = ca.eval_calA(P(0.0), 2.0, [0.0])
    assert v == pytest.approx(3 * math.sqrt(3) * (math.sqrt(3) + math.sqrt(2)), rel=1e-14)


def test_calA_dual_formula():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        lam = 10 ** rng.uniform(0.1, 4) * np.exp(1j * rng.uniform(-2, 2))
        xi = [10 ** rng.uniform(-2, 2)]
        a, b = ca.eval_calA(P(), lam, xi), ca.eval_calA(P(), lam, xi, defining=True)
        assert abs(a - b) < 1e-10 * abs(b)


def test_calA_rearrangement_symbolic():
    B, A, L1, L2 = sympy.symbols("B A L1 L2")
    rearr = B * (B ** 2 - A ** 2) * (L1 + L2) - A ** 2 * (B - L1) * (B - L2)
    defining = B ** 3 * (L1 + L2) - A ** 2 * B ** 2 - A ** 2 * L1 * L2
    assert sympy.expand(rearr - defining) == 0


def test_calA_tilde_positive_real():
    for A in (0.1, 1.0, 5.0):
        v = ca.eval_calA_tilde(P(SQ2), [A])
        assert abs(np.imag(v)) < 1e-12 * abs(v) and np.real(v) > 0


def test_zero_data_zero_amplitudes():
    for am in (ca.assemble_amplitudes(P(), 4j, [1.0], ca.BoundaryModeData.zeros(2)),
               ca.assemble_amplitudes_degenerate(P(SQ2), [1.0], ca.BoundaryModeData.zeros(2))):
        for k in ("C", "D", "A0", "A1", "A2", "Ajk", "P", "Q1", "Q2"):
            assert not np.any(getattr(am, k))


@pytest.mark.parametrize("N", [2, 3, 4])
def test_relation_residuals(N):
    rng = np.random.default_rng(N)
    d = ca.BoundaryModeData.random(N, rng)
    xi = np.zeros(N - 1)
    xi[0] = 1.0
    am = ca.assemble_amplitudes(P(1.0, N), 4j, xi, d)
    res = ca.relation_residuals(P(1.0, N), am, d)
    # E_printed is the E relation without the factor i on sum xi_j H_kj: it
    # must fail, the version with i must hold
    assert res.pop("E_printed") > 1e-2
    res.pop("_scale")
    assert max(res.values()) < 1e-10
    assert abs(ca.closed_form_C(P(1.0, N), am, d) - am.C) < 1e-8 * abs(am.C)


def test_amplitudes_symmetric_traceless():
    d = ca.BoundaryModeData.random(3, np.random.default_rng(7))
    am = ca.assemble_amplitudes(P(1.0, 3), 3 + 1j, [0.6, -0.8], d)
    for k in ("Ajk", "P", "Q1", "Q2"):
        M = getattr(am, k)
        assert np.max(np.abs(M - M.T)) < 1e-12 * (1 + np.max(np.abs(M)))
    assert abs(np.trace(am.Ajk)) < 1e-12 * np.max(np.abs(am.Ajk))


@pytest.mark.parametrize("N", [2, 3])
def test_det_crosscheck(N):
    xi = np.zeros(N - 1)
    xi[0] = 1.0
    r = ca.det_crosscheck(P(1.0, N), 4j, xi)
    assert abs(r["det_numeric"]) > 0
    assert abs(r["det_numeric"] - r["det_formula"]) < 1e-8 * abs(r["det_formula"])


def test_tilde_relations_and_calC_tilde():
    d = ca.BoundaryModeData.random(2, np.random.default_rng(3))
    am = ca.assemble_amplitudes_degenerate(P(SQ2), [0.7], d)
    assert max(ca.tilde_relation_residuals(P(SQ2), am, d).values()) < 1e-10
    A = np.linspace(0, 50, 2001)[1:, None]
    assert np.min(np.abs(ca.eval_calC_degenerate(P(SQ2), A))) > 0
    with pytest.raises(BetaZero):
        ca.assemble_amplitudes_degenerate(P(0.0), [0.7], d)


def test_E_decomposition_only_HNN():
    N = 3
    H = np.zeros((N, N), complex)
    H[2, 2] = 1.0 + 0.5j
    H[0, 0] = H[1, 1] = -0.5 * H[2, 2]      # traceless
    d = ca.BoundaryModeData(np.zeros(N), H)
    lam, xi = 2 + 1j, [0.4, 0.9]
    am = ca.assemble_amplitudes(P(1.0, N), lam, xi, d)
    E = ca.apply_E_decomposition(P(1.0, N), lam, xi, d)
    assert np.allclose(E, am.E, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("N", [2, 3])
def test_E_decomposition_full(N):
    rng = np.random.default_rng(11)
    for _ in range(10):
        d = ca.BoundaryModeData.random(N, rng)
        lam = 10 ** rng.uniform(0, 3) * np.exp(1j * rng.uniform(-2, 2))
        xi = rng.normal(size=N - 1)
        am = ca.assemble_amplitudes(P(1.0, N), lam, xi, d)
        E = ca.apply_E_decomposition(P(1.0, N), lam, xi, d)
        assert np.max(np.abs(E - am.E)) < 1e-8 * np.max(np.abs(am.E))


def test_normalized_forms():
    # calC = beta (lam+a)/lam F_a and calA = (lam+a)^2 G_a at the physical t
    Pm = P(1.0)
    lam, A = 3 + 5j, 1.7
    t = ca.physical_t(Pm, lam, A)
    zt = ss.normalized_roots(Pm, lam)[:2]
    F = ca.F_a_from_t(Pm, lam, t, zt)
    G = ca.G_a_from_t(Pm, lam, t, zt)
    assert ca.eval_calC(Pm, lam, [A]) == pytest.approx(Pm.beta * (lam + 1) / lam * F, rel=1e-12)
    assert ca.eval_calA(Pm, lam, [A]) == pytest.approx((lam + 1) ** 2 * G, rel=1e-12)


def test_batch_matches_single():
    rng = np.random.default_rng(9)
    lam = np.array([2 + 1j, 10j, 1.0 + 1e-6, 50.0])
    xi = rng.normal(size=(4, 1))
    h = np.stack([ca.BoundaryModeData.random(2, rng).h_hat for _ in range(4)])
    H = np.stack([ca.BoundaryModeData.random(2, rng).H_hat for _ in range(4)])
    groups = ca.assemble_batch(P(SQ2), lam, xi, ca.BoundaryModeData(h, H))
    assert set(groups) == {"regular", "degenerate"}
    for br, (idx, amps) in groups.items():
        for j, i in enumerate(idx):
            one = (ca.assemble_amplitudes(P(SQ2), lam[i], xi[i], ca.BoundaryModeData(h[i], H[i]))
                   if br == "regular" else
                   ca.assemble_amplitudes_degenerate(P(SQ2), xi[i], ca.BoundaryModeData(h[i], H[i])))
            assert np.allclose(amps.mode(j).C, one.C, rtol=1e-12)
