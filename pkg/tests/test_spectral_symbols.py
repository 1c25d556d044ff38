import math

import numpy as np
import pytest

from halfspace_be.spectral_symbols import ModelParams
from halfspace_be import spectral_symbols as ss
from halfspace_be.errors import BetaZero, BranchViolation

SQ2 = math.sqrt(2)


def Lpoly(P, lam, z):
    return (lam - z) * (lam + P.a - z) + 0.5 * P.beta ** 2 * (z * z - P.a * z)


def test_roots_decoupled():
    z = sorted(complex(v).real for v in ss.characteristic_roots(ModelParams(a=1, beta=0), 2.0))
    assert z == pytest.approx([2.0, 3.0], abs=1e-14)


def test_roots_confluent_at_eta():
    P = ModelParams(a=1, beta=SQ2)
    z1, z2 = ss.characteristic_roots(P, 1.0)
    # sqrt(2) is rounded, so 1.0 sits ~1e-16 off the true eta and the double
    # root splits by ~sqrt(1e-16); that is the exact answer for these inputs
    assert abs(z1 - 1) < 1e-7 and abs(z2 - 1) < 1e-7
    assert abs(Lpoly(P, 1.0, z1)) < 1e-15 and abs(Lpoly(P, 1.0, z2)) < 1e-15


def test_roots_back_substitution():
    P = ModelParams(a=1, beta=1)
    lam = 3 + 4j
    for z in ss.characteristic_roots(P, lam):
        assert abs(Lpoly(P, lam, z)) < 1e-12 * 49


def test_roots_sector_scan_back_substitution():
    P = ModelParams(a=1, beta=1)
    rng = np.random.default_rng(1)
    lam = np.exp(rng.uniform(0, np.log(1e6), 1000)) * np.exp(1j * rng.uniform(-1, 1, 1000) * 2 * math.pi / 3 * 0.999)
    lam = lam[np.abs(lam) > 1]
    z1, z2 = ss.characteristic_roots(P, lam)
    for z in (z1, z2):
        assert np.max(np.abs(Lpoly(P, lam, z)) / (np.abs(lam) + P.a) ** 2) < 1e-12
        # never on the closed negative real axis
        assert not np.any((np.abs(z.imag) <= 1e-14 * np.abs(z)) & (z.real <= 0))


def test_wave_numbers_trivial():
    A, B, L1, L2 = ss.wave_numbers(ModelParams(a=1, beta=0), 2.0, [0.0])
    assert A == 0 and B == pytest.approx(math.sqrt(3))
    assert sorted([L1.real, L2.real]) == pytest.approx([math.sqrt(2), math.sqrt(3)])


def test_wave_numbers_positive_real_parts():
    A, B, L1, L2 = ss.wave_numbers(ModelParams(a=1, beta=1, dim=3), 10j, [1.0, 0.0])
    assert A == 1.0
    assert B.real > 0 and L1.real > 0 and L2.real > 0
    for L, z in zip((L1, L2), ss.characteristic_roots(ModelParams(a=1, beta=1), 10j)):
        assert L * L == pytest.approx(1 + z, rel=1e-14)


def test_wave_numbers_degenerate():
    P = ModelParams(a=1, beta=SQ2)
    _, _, L1, L2 = ss.wave_numbers(P, ss.eta_point(P), [2.0])
    assert L1 == pytest.approx(math.sqrt(5), rel=1e-8) and L2 == pytest.approx(math.sqrt(5), rel=1e-8)


def test_wave_numbers_branch_violation():
    # far outside the sector (negative real lambda below -a - A^2) B_a is imaginary
    with pytest.raises(BranchViolation):
        ss.wave_numbers(ModelParams(a=1, beta=0), -10.0, [0.0])


def test_eta_point():
    assert ss.eta_point(ModelParams(a=1, beta=SQ2)) == pytest.approx(1.0)
    assert ss.eta_point(ModelParams(a=2, beta=SQ2)) == pytest.approx(2.0)
    with pytest.raises(BetaZero):
        ss.eta_point(ModelParams(a=1, beta=0))


def test_eta_is_where_roots_merge():
    for beta in (0.5, 1.0, 3.0):
        P = ModelParams(a=1.3, beta=beta, theta=1.5)
        z1, z2 = ss.characteristic_roots(P, ss.eta_point(P))
        assert abs(z1 - z2) < 1e-6 * abs(z1)


def test_normalized_roots_limit():
    P = ModelParams(a=1, beta=1)
    z1t, z2t, zm, zp = ss.normalized_roots(P, 1e6)
    want = sorted([2 / 3 - SQ2 / 3 * 1j, 2 / 3 + SQ2 / 3 * 1j], key=lambda z: z.imag)
    got = sorted([complex(z1t), complex(z2t)], key=lambda z: z.imag)
    for g, w in zip(got, want):
        assert abs(g - w) < 1e-4
    assert sorted([zm, zp], key=lambda z: z.imag) == pytest.approx(want, abs=1e-14)


def test_normalized_roots_decoupled():
    z1t, z2t, *_ = ss.normalized_roots(ModelParams(a=1, beta=0), 5.0)
    assert sorted([z1t.real, z2t.real]) == pytest.approx([5 / 6, 1.0])


def test_sector_admissibility():
    P = ModelParams(theta=math.pi / 3, r=1, beta=SQ2)
    assert ss.sector_admissibility(P, 2.0)["inside"]
    assert not ss.sector_admissibility(P, 0.5)["inside"]
    assert ss.sector_admissibility(P, 2.0)["theta0"] == pytest.approx(math.pi / 4)
    assert ss.sector_admissibility(P, 0.5)["distance"] == pytest.approx(0.5)


def test_params_validate():
    assert ModelParams().validate() == []
    assert ModelParams(theta=0.3, beta=2.0).validate()     # tan(0.3) < 2/sqrt(2)
    assert ModelParams.from_xi(1.0, dim=2).beta == 1.0
    assert ModelParams(dim=1).validate()


def test_degeneracy_flag():
    P = ModelParams(a=1, beta=SQ2)
    assert ss.is_degenerate(P, 1.0 + 1e-5)
    assert not ss.is_degenerate(P, 1.01)
    assert not ss.is_degenerate(ModelParams(beta=0), 1.0)
