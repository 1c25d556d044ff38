import csv
import math

import numpy as np
import pytest

from halfspace_be.spectral_symbols import ModelParams
from halfspace_be import spectral_symbols as ss
from halfspace_be import coefficient_assembly as ca
from halfspace_be import bound_verifier as bv
from halfspace_be.errors import FloorViolated, BetaZero

SQ2 = math.sqrt(2)


def P(beta=1.0, **kw):
    return ModelParams(a=1, beta=beta, theta=math.pi / 3, r=1, **kw)


def test_grid_inside_sector_and_deterministic():
    g1, g2 = bv.make_grid(P(), 2), bv.make_grid(P(), 2)
    assert g1.size >= 1e4
    assert np.array_equal(g1.lam, g2.lam)
    assert np.all(ss.in_sector(g1.lam, math.pi / 3, 1.0, closed=True))


def test_nonvanishing_min_cross_checked_by_naive_formula():
    Pm = P(1.0)
    rep = bv.scan_nonvanishing(Pm, bv.make_grid(Pm, 2))
    v = rep.values
    assert v["min_abs_F_a"] > 1e-3
    # independent evaluation of the minimiser through the naive calC
    lam = v["argmin_F_a"]["lambda"]
    if not ss.is_degenerate(Pm, lam):
        A = v["argmin_F_a"]["t_abs"] * abs(np.sqrt(lam + 1))
        F = ca.eval_calC_naive(Pm, lam, [A]) * lam / (Pm.beta * (lam + 1))
        assert abs(F) == pytest.approx(v["min_abs_F_a"], rel=1e-6)


def test_nonvanishing_floor_violation_reported():
    with pytest.raises(FloorViolated):
        bv.scan_nonvanishing(P(1.0), bv.make_grid(P(1.0), 0), floor=10.0)


def test_nonvanishing_eta_ray_and_tilde():
    Pm = P(SQ2)
    g = bv.make_grid(Pm, 1)
    assert np.any(np.abs(g.lam - ss.eta_point(Pm)) < 1e-12)
    rep = bv.scan_nonvanishing(Pm, g)
    assert rep.values["min_abs_calC_tilde"] > 0


def test_large_t_G_normalized_near_two():
    Pm = P(1.0)
    g = bv.make_grid(Pm, 1)
    t = bv._t_complex(Pm, g.lam, 1e3)
    zt = bv._roots_tilde(Pm, g.lam)
    G = np.abs(ca.G_a_from_t(Pm, g.lam, t, zt)) / (1 + 1e6)
    assert np.all(np.abs(G - 2) < 0.2)


def test_laurent_tail_monotone_and_beta0_skip():
    rep = bv.laurent_tail_check(P(1.0), [10.0, 100.0, 1000.0])
    d = [r["sup_F_dev"] for r in rep.rows]
    assert d[1] < d[0] / 5 and d[2] < d[1]
    assert rep.values["decay_exponent_F"] <= -1
    rep0 = bv.laurent_tail_check(P(0.0), [10.0, 100.0, 1000.0])
    assert rep0.rows == [] and any("beta = 0" in n for n in rep0.notes)


def _spec(sid, Pm):
    return next(m for m in bv.symbol_registry(Pm) if m.symbol_id == sid)


def test_multiplier_B_inverse_square():
    Pm = P(1.0)
    rep = bv.multiplier_class_check(Pm, _spec("B_a^-2", Pm), level=0)
    row = next(r for r in rep.rows if r["alpha"] == "00" and r["ell"] == 0)
    lam, xi = bv.multiplier_grid(Pm, 1)
    A = np.linalg.norm(xi, axis=-1)
    direct = np.max((np.abs(lam) ** 0.5 + 1 + A) ** 2 / np.abs(lam + 1 + A * A))
    assert math.isfinite(row["constant"])
    assert row["constant"] == pytest.approx(direct, rel=1e-12)


def test_multiplier_A_first_derivative_bounded():
    Pm = P(1.0)
    rep = bv.multiplier_class_check(Pm, _spec("A^1", Pm), level=0)
    row = next(r for r in rep.rows if r["alpha"] == "10" and r["ell"] == 0)
    assert row["constant"] <= 1.0 + 1e-6


def test_multiplier_calC_inverse_stable(tmp_path):
    Pm = P(1.0)
    rep = bv.multiplier_class_check(Pm, _spec("calC^-1", Pm), level=0)
    assert rep.stable and all(math.isfinite(r["constant"]) for r in rep.rows)
    path = tmp_path / "m.csv"
    bv.write_multiplier_csv(rep, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == bv.MULTIPLIER_CSV_COLUMNS
    assert len(rows) == len(rep.rows) + 1


def test_root_bounds():
    Pm = P(1.0)
    rep = bv.root_bound_check(Pm, 1)
    f = rep.values["fine"]
    assert f["K_m"] > 0 and f["c_ReL"] > 0 and f["C1_z"] > 0 and f["z_on_negative_axis"] == 0
    for v in f["large_lam_abs_zt"]:
        assert v == pytest.approx(f["limit_abs_z_pm"][0], rel=1e-3)
    # |z_pm| = sqrt(4 + 2 beta^2) / (2 + beta^2)
    assert f["limit_abs_z_pm"][0] == pytest.approx(math.sqrt(6) / 3, rel=1e-14)
    assert math.isfinite(f["tau_dz_over_lam_max"])


def test_resolvent_ratio_zero_data_skipped():
    S = bv.resolvent_samples(P(1.0), n=2, counts=8)
    smp, grid = S[0]
    smp = bv.ResolventSample(smp.lam, 0 * smp.h, 0 * smp.H)
    rep = bv.resolvent_ratio_check(P(1.0), [(smp, grid)])
    assert rep.rows == [] and "skipped" in rep.notes[0]


def test_resolvent_ratio_decoupled():
    rep = bv.resolvent_ratio_check(P(0.0), bv.resolvent_samples(P(0.0), n=20))
    assert rep.stable and rep.values["growth"] < 2


def test_residual_suite_deterministic():
    a = bv.residual_suite(P(1.0), n=20, seed=3)
    b = bv.residual_suite(P(1.0), n=20, seed=3)
    assert a.to_json() == b.to_json()
    assert a.values["max_residual"] < 1e-9


def test_eta_continuity_beta_zero():
    with pytest.raises(BetaZero):
        bv.eta_continuity(P(0.0))


def test_oracle_compare_decoupled_and_3d():
    for Pm in (P(0.0), P(0.5, dim=3)):
        rep = bv.oracle_compare(Pm, n_modes=3, n=1024)
        assert rep.values["max_rel_l2"] < 1e-4 and rep.stable
