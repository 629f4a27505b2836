import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divgov.lmi import (
    LmiProblem,
    certificate_record,
    eig_symmetric,
    f_matrix,
    lmi_verdict,
    solve_feasibility,
    solve_feasibility_batch,
    verify_certificate,
)
from divgov.model import GovernorParams, build_system


def test_eig_examples():
    lam, V = eig_symmetric(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(lam, [1, 2, 3])
    lam, _ = eig_symmetric(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(lam, [-1, 1])
    M = np.array([[0.0, 0.0, -1.0], [0.0, -2.0, 1.0], [-1.0, 1.0, 0.0]])
    lam, _ = eig_symmetric(M)
    roots = np.sort(np.roots(np.poly(M)).real)
    assert np.allclose(lam, roots, atol=1e-10)


def test_eig_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        eig_symmetric(np.array([[1.0, 2.0], [0.0, 1.0]]))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_eig_residual_and_orthonormality(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, n))
    M = X + X.T
    lam, V = eig_symmetric(M)
    nrm = np.linalg.norm(M)
    assert np.all(np.diff(lam) >= 0)
    assert np.max(np.linalg.norm(M @ V - V * lam, axis=0)) <= 1e-10 * max(nrm, 1e-300)
    assert np.allclose(V.T @ V, np.eye(n), atol=1e-12)


def test_problem_validation():
    s = build_system(GovernorParams(1, 1))
    with pytest.raises(ValueError):
        LmiProblem(s, eps_pd=0)
    with pytest.raises(ValueError):
        LmiProblem(s, eps_nd=-1)
    with pytest.raises(ValueError):
        LmiProblem(s, scale_cap=0.5)


def test_sample_points():
    assert lmi_verdict(GovernorParams(1.4, 1, 0)).verdict == "feasible"
    assert lmi_verdict(GovernorParams(0.75, 1, 0)).verdict == "infeasible"


def test_sample_point_with_self_regulation():
    # stated as feasible; H is not Hurwitz here (A*B + B^2*C + B*C^2 = 0.86 < 1), see README
    assert lmi_verdict(GovernorParams(0.75, 1, 0.1)).verdict == "feasible"


def test_verify_certificate_oracle():
    s = build_system(GovernorParams(1.4, 1, 0))
    F = f_matrix(s, np.eye(3), 1.0)
    assert verify_certificate(s, np.eye(3), 1.0) == (np.linalg.eigvalsh(F).max() <= -1e-8)
    assert not verify_certificate(s, np.diag([1.0, 0.0, 1.0]), 1.0)
    assert not verify_certificate(s, np.diag([1.0, -1.0, 1.0]), 1.0)


def test_certificate_soundness_and_scale_invariance():
    s = build_system(GovernorParams(1.4, 1, 0))
    res = solve_feasibility(LmiProblem(s))
    assert res.feasible and verify_certificate(s, res.Q, res.tau)
    lq, lf = res.margins
    for sc in (0.5, 3.0, 10.0):
        assert verify_certificate(s, sc * res.Q, sc * res.tau, eps_pd=1e-6 * sc, eps_nd=1e-8 * sc)
        F = f_matrix(s, sc * res.Q, sc * res.tau)
        assert np.linalg.eigvalsh(F).max() == pytest.approx(sc * lf, rel=1e-9)
    rec = certificate_record(GovernorParams(1.4, 1, 0), res)
    assert len(rec["Q"]) == 6 and rec["verdict"] == "feasible"


def test_batch_matches_single():
    ps = [GovernorParams(a, 1.0, 0.0) for a in (0.6, 0.95, 1.05, 2.0)]
    batch = solve_feasibility_batch([LmiProblem(build_system(p)) for p in ps])
    for p, r in zip(ps, batch):
        one = solve_feasibility(LmiProblem(build_system(p)))
        assert one.verdict == r.verdict and one.iterations == r.iterations


def test_interval_along_B1():
    A = np.round(0.2 + 0.05 * np.arange(57), 10)
    res = solve_feasibility_batch([LmiProblem(build_system(GovernorParams(a, 1.0, 0))) for a in A])
    feas = np.array([r.feasible for r in res])
    first = int(np.argmax(feas))
    assert feas[first:].all() and not feas[:first].any()
    assert abs(A[first] - 1.0) <= 0.05 + 1e-12  # one grid step, up to rounding of the grid values


def test_deterministic():
    a = lmi_verdict(GovernorParams(1.1, 0.95, 0.2))
    b = lmi_verdict(GovernorParams(1.1, 0.95, 0.2))
    assert a.verdict == b.verdict and np.array_equal(a.Q, b.Q)


def test_stable_linear_part_is_feasible_and_unstable_is_not():
    rng = np.random.default_rng(9)
    for _ in range(20):
        A, B = rng.uniform(0.2, 3, 2)
        C = rng.uniform(0, 1)
        m = A * B + B * B * C + B * C * C - 1
        if abs(m) < 0.05:
            continue
        assert lmi_verdict(GovernorParams(A, B, C)).feasible == (m > 0)
