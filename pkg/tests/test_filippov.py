import numpy as np
import pytest

from divgov.filippov import ABOVE, BELOW, SLIDING, IntegratorConfig, integrate, sliding_dynamics
from divgov.model import GovernorParams, build_system, stationary_set


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(rel_tol=0)
    with pytest.raises(ValueError):
        IntegratorConfig(max_time=-1)
    with pytest.raises(ValueError):
        IntegratorConfig(max_steps=0)


def test_sliding_dynamics_examples():
    s = build_system(GovernorParams(1, 1, 0))
    rhs, phi = sliding_dynamics(s, [0.3, 0, 0.1])
    assert np.allclose(rhs, [0, 0, -0.3]) and phi == pytest.approx(0.4)
    rhs, phi = sliding_dynamics(build_system(GovernorParams(2.2, 0.3, 0.7)), [0, 0, 0])
    assert np.allclose(rhs, 0) and phi == 0
    with pytest.raises(ValueError):
        sliding_dynamics(s, [1, 0, 0])
    with pytest.raises(ValueError):
        sliding_dynamics(s, [0, 0.1, 0])


def test_rejects_nonfinite_start():
    with pytest.raises(ValueError):
        integrate(build_system(GovernorParams(1, 1)), [np.nan, 0, 0])


def test_point_of_set_is_fixed():
    tr = integrate(build_system(GovernorParams(1, 1, 0)), [0, 0, 0.2], IntegratorConfig(max_time=50))
    assert np.max(np.abs(tr.states - [0, 0, 0.2])) == 0
    assert tr.final_mode == SLIDING and tr.status == "complete"


def test_times_increase_and_events_end_with_termination():
    tr = integrate(build_system(GovernorParams(0.75, 1, 0)), [1, 1, 1], IntegratorConfig(max_time=60))
    assert np.all(np.diff(tr.times) > 0)
    assert tr.events[-1].kind == "termination"
    assert np.all(np.isfinite(tr.states))


def test_converges_at_global_point():
    # convergence near the dry-friction set is slow (distance ~ 1/t), see README
    p = GovernorParams(1.4, 1, 0)
    tr = integrate(build_system(p), [0, 1, 0], IntegratorConfig(max_time=1500))
    assert stationary_set(p).distance(tr.final_state) < 1e-3


def test_sliding_samples_respect_band():
    p = GovernorParams(1.4, 1, 0.2)
    tr = integrate(build_system(p), [2, -1, 1], IntegratorConfig(max_time=100))
    m = tr.sliding_mask()
    assert m.any()
    X = tr.states[m]
    assert np.all(np.abs(X[:, 1]) <= 1e-10)
    assert np.all(np.abs(p.A * X[:, 0] - X[:, 2]) <= p.k + 1e-8)


def test_x1_constant_on_sliding_segments():
    cfg = IntegratorConfig(max_time=100)
    tr = integrate(build_system(GovernorParams(1.4, 1, 0.2)), [2, -1, 1], cfg)
    modes = tr.modes
    start = None
    for i, m in enumerate(list(modes) + [None]):
        if m == SLIDING and start is None:
            start = i
        elif m != SLIDING and start is not None:
            seg = tr.states[start:i, 0]
            assert np.ptp(seg) <= 10 * cfg.abs_tol
            start = None


def test_modes_agree_with_sign_of_x2():
    tr = integrate(build_system(GovernorParams(0.75, 1, 0)), [3, 0.5, -1], IntegratorConfig(max_time=80))
    up = tr.modes == ABOVE
    dn = tr.modes == BELOW
    assert np.all(tr.states[up, 1] >= -1e-10) and np.all(tr.states[dn, 1] <= 1e-10)


def test_divergence_flag_and_escape_time():
    tr = integrate(build_system(GovernorParams(0.5, 1, 0)), [5, 5, 5], IntegratorConfig(max_time=2000, escape_radius=1e4))
    assert tr.status == "diverged" and tr.escape_time is not None


def test_budget_flag():
    tr = integrate(build_system(GovernorParams(0.75, 1, 0)), [3, 0.5, -1], IntegratorConfig(max_steps=10))
    assert tr.status == "budget"


def test_stop_callback():
    tr = integrate(build_system(GovernorParams(0.75, 1, 0)), [3, 0.5, -1], IntegratorConfig(), stop=lambda t, x, m: t > 3)
    assert tr.status == "stopped" and 3 < tr.times[-1] < 4


def test_reversibility_off_surface():
    # integrate a smooth piece forward, then the reversed field backward
    from divgov.filippov import _dp_step, _rhs_factory

    s = build_system(GovernorParams(1.2, 0.8, 0.3))
    rhs = _rhs_factory(s)
    neg = lambda a, b, c, m: tuple(-v for v in rhs(a, b, c, m))
    x = (0.4, 2.0, -0.3)
    y = x
    for _ in range(20):
        y = _dp_step(rhs, y, 0.01, ABOVE, 1e-8, 1e-10)[0]
    assert y[1] > 0
    for _ in range(20):
        y = _dp_step(neg, y, 0.01, ABOVE, 1e-8, 1e-10)[0]
    assert np.max(np.abs(np.subtract(y, x))) < 100 * 1e-8


def test_crossing_events_on_surface():
    tr = integrate(build_system(GovernorParams(0.75, 1, 0)), [3, 0.5, -1], IntegratorConfig(max_time=40))
    for e in tr.events:
        if e.kind in ("crossing", "sliding-entry", "sliding-exit"):
            assert abs(e.state[1]) <= 1e-10
    assert tr.crossings(+1) and tr.crossings(-1)
