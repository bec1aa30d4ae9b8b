import math

import numpy as np
import pytest

from cscnet.convops import ConvDictionary, adjoint, random_dictionary
from cscnet.fista import (FistaConfig, kkt_residual, power_iteration, shrink,
                          solve, stable_recovery_trial)
from cscnet.tensor import Tensor

from oracles import gram_top_eigenvalue, ista_matrix, materialize_operator


def scalar_dict(alpha=1.0):
    return ConvDictionary(Tensor(np.full((1, 1, 1, 1), alpha)))


def small_instance(seed, m=1, c=2, k=3, hw=6):
    # unit-energy signals: the solution-quality tolerances are absolute
    rng = np.random.default_rng(seed)
    d = random_dictionary(m, c, k, seed=seed + 1000)
    x = rng.standard_normal((1, m, hw, hw))
    x /= np.sqrt((x * x).sum())
    return d, Tensor(x)


# shrink ------------------------------------------------------------------------

def test_shrink_values():
    v = Tensor(np.array([[[[1.2, -1.0, 0.3]]]]))
    out = shrink(v, 0.5).data.ravel()
    assert out[0] == pytest.approx(0.7)
    assert out[2] == 0.0
    out = shrink(v, 0.25).data.ravel()
    assert out[1] == pytest.approx(-0.75)


def test_shrink_support_rule():
    rng = np.random.default_rng(0)
    v = Tensor(rng.standard_normal((1, 1, 5, 5)))
    out = shrink(v, 0.8).data
    assert np.all((out != 0) == (np.abs(v.data) > 0.8))
    with pytest.raises(ValueError):
        shrink(v, -0.1)


# power iteration -----------------------------------------------------------------

def test_power_iteration_scalar_kernel():
    lam, v = power_iteration(scalar_dict(3.0), (1, 1, 4, 4))
    assert lam == pytest.approx(9.0, abs=1e-8)
    assert np.sqrt((v.data ** 2).sum()) == pytest.approx(1.0, abs=1e-12)


def test_power_iteration_identity_delta():
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    lam, _ = power_iteration(ConvDictionary(Tensor(kernel)), (1, 1, 5, 5))
    assert lam == pytest.approx(1.0, abs=1e-8)


def test_power_iteration_matches_dense_eigensolve():
    d = random_dictionary(3, 4, 3, seed=42)
    lam, _ = power_iteration(d, (1, 4, 8, 8), max_iters=500, tol=1e-12)
    a_mat = materialize_operator(d.kernel.data, 1, (8, 8), (8, 8))
    ref = gram_top_eigenvalue(a_mat)
    assert abs(lam - ref) / ref < 1e-4


def test_power_iteration_seed_invariance():
    d = random_dictionary(2, 3, 3, seed=7)
    vals = [power_iteration(d, (1, 3, 6, 6), max_iters=500, tol=1e-10, seed=s)[0]
            for s in range(10)]
    spread = (max(vals) - min(vals)) / max(vals)
    assert spread < 1e-6


def test_power_iteration_rejects_zero_dictionary():
    d = ConvDictionary(Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        power_iteration(d, (1, 1, 4, 4))


def test_power_iteration_warm_start():
    d = random_dictionary(2, 2, 3, seed=9)
    a_mat = materialize_operator(d.kernel.data, 1, (6, 6), (6, 6))
    vals, vecs = np.linalg.eigh(a_mat.T @ a_mat)
    lam_star = float(vals[-1])
    # seeding with the exact eigenvector needs only one round
    lam_w, _ = power_iteration(d, (1, 2, 6, 6), v0=vecs[:, -1].reshape(1, 2, 6, 6),
                               max_iters=1)
    assert lam_w == pytest.approx(lam_star, rel=1e-12)
    # continuing from a previous run never loses ground (Rayleigh quotient is
    # monotone under power iteration on a PSD operator)
    lam1, v1 = power_iteration(d, (1, 2, 6, 6))
    lam2, _ = power_iteration(d, (1, 2, 6, 6), v0=v1.data)
    assert lam2 >= lam1 - 1e-12
    assert abs(lam2 - lam_star) <= abs(lam1 - lam_star) + 1e-12


# solve ----------------------------------------------------------------------------

def test_scalar_lasso_closed_form():
    cfg = FistaConfig(lam=0.3, iters=200)
    x = Tensor(np.full((1, 1, 1, 1), 1.0))
    trace = solve(scalar_dict(1.0), x, cfg)
    assert trace.z_final.item() == pytest.approx(0.7, abs=1e-6)


def test_zero_solution_when_lam_dominates():
    d, x = small_instance(3)
    thresh = float(np.abs(adjoint(d, x).data).max())
    cfg = FistaConfig(lam=thresh * 1.01, iters=50)
    trace = solve(d, x, cfg)
    assert np.all(trace.z_final.data == 0.0)


def test_single_iteration_is_one_ista_step():
    d, x = small_instance(4)
    cfg = FistaConfig(lam=0.2, iters=1)
    t = 0.05
    trace = solve(d, x, cfg, step=t)
    expect = shrink(adjoint(d, x).scale(t), cfg.lam * t)
    np.testing.assert_array_equal(trace.z_final.data, expect.data)


def test_objective_never_worse_than_zero_code():
    for seed in range(5):
        d, x = small_instance(seed)
        cfg = FistaConfig(lam=0.1, iters=20)
        trace = solve(d, x, cfg)
        assert trace.objective <= 0.5 * x.inner(x) + 1e-12


def test_trace_shapes_and_momentum():
    d, x = small_instance(5)
    cfg = FistaConfig(lam=0.15, iters=4)
    trace = solve(d, x, cfg)
    assert len(trace.z_iterates) == 5
    assert len(trace.y_iterates) == 4
    assert len(trace.m_sequence) == 4
    assert trace.m_sequence[0] == 1.0
    ms = trace.m_sequence
    for i in range(1, len(ms)):
        assert ms[i] == pytest.approx((1 + math.sqrt(1 + 4 * ms[i - 1] ** 2)) / 2)
    assert np.all(trace.z_iterates[0].data == 0.0)
    # y2 = z1 because the first momentum coefficient is zero
    np.testing.assert_array_equal(trace.y_iterates[1].data,
                                  trace.z_iterates[1].data)


def test_solve_reports_residual_norms():
    d, x = small_instance(6)
    cfg = FistaConfig(lam=0.1, iters=5)
    trace = solve(d, x, cfg)
    from cscnet.convops import apply
    r = x.sub(apply(d, trace.z_final, out_hw=x.shape[2:]))
    assert trace.residual_norms[0] == pytest.approx(r.norms().l2, rel=1e-12)


def test_solve_flags_non_finite_iterates():
    d, x = small_instance(7)
    cfg = FistaConfig(lam=0.1, iters=30)
    with np.errstate(over="ignore"):
        with pytest.raises(FloatingPointError) as exc:
            solve(d, x, cfg, step=1e300)
    assert "iteration" in str(exc.value)


def test_light_trace_keeps_final_only():
    d, x = small_instance(8)
    cfg = FistaConfig(lam=0.1, iters=3)
    full = solve(d, x, cfg, step=0.5)
    light = solve(d, x, cfg, step=0.5, keep_history=False)
    np.testing.assert_array_equal(light.z_final.data, full.z_final.data)
    assert len(light.z_iterates) == 1 and not light.y_iterates


def test_config_validation():
    with pytest.raises(ValueError):
        FistaConfig(lam=0.0, iters=2)
    with pytest.raises(ValueError):
        FistaConfig(lam=0.1, iters=0)
    with pytest.raises(ValueError):
        FistaConfig(lam=0.1, iters=2, step_scale=1.5)


# KKT residual ----------------------------------------------------------------------

def test_kkt_zero_for_exact_scalar_solution():
    d = scalar_dict(1.0)
    x = Tensor(np.full((1, 1, 1, 1), 1.0))
    z = Tensor(np.full((1, 1, 1, 1), 0.7))
    assert kkt_residual(d, x, z, 0.3) <= 1e-10


def test_kkt_nonpositive_for_zero_when_lam_dominates():
    d, x = small_instance(9)
    lam = float(np.abs(adjoint(d, x).data).max()) * 1.05
    z = Tensor(np.zeros((1, 2, 6, 6)))
    assert kkt_residual(d, x, z, lam) <= 0.0


def test_kkt_small_after_long_run():
    for seed in range(3):
        d, x = small_instance(seed + 20)
        cfg = FistaConfig(lam=0.05, iters=500)
        trace = solve(d, x, cfg)
        assert kkt_residual(d, x, trace.z_final, cfg.lam) < 1e-4


def test_kkt_decreases_with_iteration_budget():
    levels = (10, 50, 200, 1000)
    residuals = {k: [] for k in levels}
    for seed in range(20):
        d, x = small_instance(seed + 40)
        for k in levels:
            cfg = FistaConfig(lam=0.05, iters=k)
            trace = solve(d, x, cfg)
            residuals[k].append(kkt_residual(d, x, trace.z_final, cfg.lam))
    medians = [np.median(residuals[k]) for k in levels]
    assert medians[0] > medians[1] > medians[2] > medians[3]


def test_objective_matches_matrix_ista_oracle():
    for seed in range(3):
        d, x = small_instance(seed + 60)
        cfg = FistaConfig(lam=0.05, iters=500)
        trace = solve(d, x, cfg)
        a_mat = materialize_operator(d.kernel.data, 1, (6, 6), (6, 6))
        _, obj_ref = ista_matrix(a_mat, x.data.reshape(-1), cfg.lam, iters=100_000)
        assert abs(trace.objective - obj_ref) <= 1e-6


# stable recovery ----------------------------------------------------------------------

def test_noiseless_single_spike_recovery():
    # zero noise keeps a small positive threshold, so the error floor is
    # set by that threshold rather than by machine precision
    out = stable_recovery_trial(2, 2, 3, sparsity=1, noise_norm=0.0, seed=0)
    assert out["support_contained"]
    assert out["abs_error"] < 1e-3


def test_single_spike_containment_rate():
    hits = sum(stable_recovery_trial(2, 2, 3, 1, 0.01, seed)["support_contained"]
               for seed in range(30))
    assert hits >= 28


def test_recovery_error_tracks_noise():
    lo, hi = [], []
    for seed in range(30):
        lo.append(stable_recovery_trial(2, 2, 3, 1, 0.01, seed)["abs_error"])
        hi.append(stable_recovery_trial(2, 2, 3, 1, 0.02, seed)["abs_error"])
    ratio = np.median(hi) / np.median(lo)
    assert 1.5 <= ratio <= 2.5
