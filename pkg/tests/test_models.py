import numpy as np
import pytest

from invdyn.core import PhysicalParams, Trajectory, make_grid
from invdyn.dynamics import true_rhs
from invdyn.models import (
    DemandDriftSpec,
    InputNorm,
    ModelKind,
    NodeModel,
    UdeModel,
    default_drift,
    fit_input_norm,
    make_model,
)
from invdyn.nnet import NODE_ARCH, UDE_ARCH, ModelParams

P = PhysicalParams()


def _zero_ude(drift=None, norm=None):
    return UdeModel(ModelParams(UDE_ARCH, np.zeros(UDE_ARCH.n_params)), P,
                    drift or DemandDriftSpec(0.0, 10.0), norm or InputNorm.identity())


def _states(n=50, seed=0):
    return np.random.default_rng(seed).uniform([50, 0, 0], [150, 20, 20], size=(n, 3))


def test_zero_node_is_zero_field():
    m = NodeModel(ModelParams(NODE_ARCH, np.zeros(NODE_ARCH.n_params)), InputNorm.identity())
    np.testing.assert_array_equal(m(0.0, [100, 10, 10]), np.zeros(3))


def test_zero_residual_ude_matches_true_order_rate():
    m = _zero_ude()
    for x in _states():
        assert m(0.0, x)[1] == pytest.approx(true_rhs(x, P, x[2]).dO, abs=1e-14)


def test_residual_is_additive():
    m = make_model("UDE", InputNorm.identity(), 3)
    z = _zero_ude()
    for x in _states(20):
        assert m(0.0, x)[1] - z(0.0, x)[1] == pytest.approx(m.residual(x), abs=1e-14)


def test_inventory_balance_exact_for_any_weights():
    rng = np.random.default_rng(1)
    m = make_model("UDE", fit_input_norm(Trajectory(make_grid(0, 1, 0.2), _states(6))), 0)
    m = m.with_flat(rng.normal(size=UDE_ARCH.n_params))
    for x in _states(50):
        assert m(0.0, x)[0] == x[1] - x[2]


def test_residual_only_touches_order_rate():
    base = make_model("UDE", InputNorm.identity(), 0, drift=DemandDriftSpec(2.0, 10.0))
    other = base.with_flat(base.params.flat + 0.5)
    for x in _states(10):
        a, b = base(0.0, x), other(0.0, x)
        assert a[0] == b[0] and a[2] == b[2]


def test_demand_drift():
    m = _zero_ude(DemandDriftSpec(2.0, 10.0))
    assert m(0.0, [100, 10, 13])[2] == pytest.approx(-6.0)
    assert default_drift("AR1", 10, 0.2, 0.6).rate == pytest.approx(2.0)
    assert default_drift("Gaussian", 10, 0.2).rate == pytest.approx(5.0)
    assert default_drift("Lognormal", 10, 0.2).rate == pytest.approx(5.0)
    with pytest.raises(ValueError):
        DemandDriftSpec(-1.0, 10.0)


def test_node_and_ude_differ_at_equilibrium():
    norm = InputNorm.identity()
    node = make_model(ModelKind.NODE, norm, 0)
    ude = _zero_ude(DemandDriftSpec(2.0, 10.0))
    x = np.array([100.0, 10.0, 10.0])
    np.testing.assert_array_equal(ude(0.0, x), np.zeros(3))
    assert np.any(node(0.0, x) != 0)


def test_fit_input_norm_examples():
    g = make_grid(0, 0.4, 0.2)
    tr = Trajectory(g, np.array([[1.0, 5, 10], [2, 5, 20], [3, 5, 30]]))
    n = fit_input_norm(tr)
    np.testing.assert_allclose(n.center, [2, 5, 20])
    np.testing.assert_allclose(n.scale, [np.sqrt(2 / 3), 1e-6, np.sqrt(200 / 3)])


def test_input_norm_rejects_bad_scale():
    with pytest.raises(ValueError):
        InputNorm(np.zeros(3), np.array([1.0, 0.0, 1.0]))


def test_kind_parse():
    assert ModelKind.parse("ude") is ModelKind.UDE
    with pytest.raises(ValueError):
        ModelKind.parse("GRU")


def test_vjp_matches_jacobian_fd():
    rng = np.random.default_rng(4)
    norm = InputNorm(np.array([100.0, 10, 10]), np.array([5.0, 2, 3]))
    for m in (make_model("NODE", norm, 1), make_model("UDE", norm, 1, drift=DemandDriftSpec(2.0, 10.0))):
        m = m.with_flat(m.params.flat + rng.normal(scale=0.1, size=m.params.arch.n_params))
        x = np.array([95.0, 11.0, 9.0])
        u = rng.normal(size=3)
        _, gx = m.vjp(x, u)
        h = 1e-5
        fd = [(u @ m(0, x + h * e) - u @ m(0, x - h * e)) / (2 * h) for e in np.eye(3)]
        np.testing.assert_allclose(gx, fd, rtol=1e-6, atol=1e-9)
