import numpy as np
import pytest

from oracles import fd_grad_ld, mlp_ld, rel_err

from invdyn.nnet import (
    LEAKY_SLOPE,
    NODE_ARCH,
    UDE_ARCH,
    Activation,
    InitScale,
    MlpArch,
    ModelParams,
    export_text,
    flatten,
    init_params,
    load_checkpoint,
    mlp_forward,
    mlp_grad,
    save_checkpoint,
    unflatten,
)


def test_param_counts():
    assert NODE_ARCH.n_params == 3 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3
    assert UDE_ARCH.n_params == 3 * 16 + 16 + 16 * 16 + 16 + 16 + 1


def test_arch_validation():
    with pytest.raises(ValueError):
        MlpArch((3, 3))
    with pytest.raises(ValueError):
        MlpArch((3, 0, 3))


@pytest.mark.parametrize("arch", [NODE_ARCH, UDE_ARCH])
def test_zero_params_give_zero_output(arch):
    p = ModelParams(arch, np.zeros(arch.n_params))
    np.testing.assert_array_equal(mlp_forward(p, np.array([1.0, -2.0, 3.0])), np.zeros(arch.n_out))


def test_hand_evaluated_leaky_chain():
    # [1,1,1]: w1=2, b1=1, w2=1, b2=0; input -1 -> hidden pre -1 -> post -slope
    p = ModelParams(MlpArch((1, 1, 1), Activation.LEAKY_RELU), [2.0, 1.0, 1.0, 0.0])
    assert mlp_forward(p, np.array([-1.0]))[0] == pytest.approx(-0.01, abs=1e-15)
    assert LEAKY_SLOPE == 0.01


def test_tanh_odd_with_zero_biases():
    rng = np.random.default_rng(0)
    arch = MlpArch((3, 16, 16, 1), Activation.TANH)
    layers = unflatten(arch, rng.normal(size=arch.n_params))
    layers = [(W, np.zeros_like(b)) for W, b in layers]
    p = ModelParams(arch, flatten(layers))
    assert mlp_forward(p, np.zeros(3))[0] == 0.0


def test_zero_upstream_zero_gradients():
    p = init_params(UDE_ARCH, 1)
    gp, gx = mlp_grad(p, np.ones(3), np.zeros(1))
    assert not gp.any() and not gx.any()


def test_linear_net_input_gradient_is_transpose():
    rng = np.random.default_rng(3)
    arch = MlpArch((4, 5, 2), Activation.IDENTITY)
    p = ModelParams(arch, rng.normal(size=arch.n_params))
    (W1, _), (W2, _) = p.layers()
    u = rng.normal(size=2)
    _, gx = mlp_grad(p, rng.normal(size=4), u)
    np.testing.assert_allclose(gx, (W2 @ W1).T @ u, rtol=1e-13)


@pytest.mark.parametrize("arch", [NODE_ARCH, UDE_ARCH, MlpArch((3, 16, 1), Activation.TANH)])
def test_gradients_match_finite_differences(arch):
    rng = np.random.default_rng(hash(arch.layer_widths) % 2**32)
    for _ in range(20):
        p = ModelParams(arch, rng.normal(scale=0.5, size=arch.n_params))
        x = rng.normal(size=3)
        u = rng.normal(size=arch.n_out)
        gp, gx = mlp_grad(p, x, u)
        coords = rng.choice(arch.n_params, size=min(40, arch.n_params), replace=False)
        fun = lambda f: u @ mlp_ld(arch.layer_widths, arch.activation.value, f, x)  # noqa: E731
        fd = fd_grad_ld(fun, p.flat, coords, 1e-5)
        assert rel_err(gp[coords], fd, 1e-8).max() < 1e-6
        fx = lambda z: u @ mlp_ld(arch.layer_widths, arch.activation.value, p.flat, z)  # noqa: E731
        fdx = fd_grad_ld(fx, x, range(3), 1e-5)
        assert rel_err(gx, fdx, 1e-8).max() < 1e-6


def test_init_is_deterministic_and_small_is_scaled():
    a = init_params(NODE_ARCH, 7)
    b = init_params(NODE_ARCH, 7)
    assert a.flat.tobytes() == b.flat.tobytes()
    small = init_params(NODE_ARCH, 7, InitScale.SMALL)
    np.testing.assert_allclose(a.flat, small.flat * 100, rtol=1e-15)


def test_init_respects_fan_in_limits():
    p = init_params(NODE_ARCH, 0)
    for (W, b), (fo, fi) in zip(p.layers(), NODE_ARCH.shapes()):
        lim = np.sqrt(1 / fi)
        assert np.abs(W).max() <= lim and np.abs(b).max() <= lim


def test_small_init_output_bound():
    p = init_params(UDE_ARCH, 5, InitScale.SMALL)
    xs = np.random.default_rng(1).uniform(-3, 3, size=(1000, 3))
    assert max(abs(mlp_forward(p, x)[0]) for x in xs) < 0.1


def test_flatten_round_trip():
    p = init_params(NODE_ARCH, 2)
    np.testing.assert_array_equal(flatten(p.layers()), p.flat)


def test_init_reference_vector():
    # documented test vector: first entries of PCG64(0) uniform draws on [-1/sqrt(3), 1/sqrt(3)]
    p = init_params(UDE_ARCH, 0)
    lim = np.sqrt(1 / 3)
    expected = np.random.Generator(np.random.PCG64(0)).uniform(-lim, lim, size=3)
    np.testing.assert_array_equal(p.flat[:3], expected)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(NODE_ARCH, 11)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, {"kind": "NODE"})
    q, meta = load_checkpoint(path)
    assert q.flat.tobytes() == p.flat.tobytes()
    assert q.arch == p.arch and q.seed == 11 and meta["kind"] == "NODE"
    export_text(tmp_path / "m.txt", p)
    vals = np.array([float(v) for v in (tmp_path / "m.txt").read_text().split()])
    np.testing.assert_array_equal(vals, p.flat)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_checkpoint(path)
