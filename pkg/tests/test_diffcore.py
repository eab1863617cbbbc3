import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import OP_CASES, directional_fd, random_direction, ad_directional, rel_err, run_op_probe
from mvplam import diffcore as dc


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_central_difference(name):
    for seed in range(3):
        ad, fd = run_op_probe(name, seed)
        assert rel_err(ad, fd) < 1e-6, (name, seed, ad, fd)


def test_straight_through_routes_gradient_to_e_only():
    params = dc.ParamSet({"e": np.array([0.3, -0.2]), "z": np.array([1.0, 0.5])})
    tape = dc.Tape()
    e, z = tape.param(params, "e"), tape.param(params, "z")
    out = dc.straight_through(e, z)
    np.testing.assert_array_equal(out.value, params["z"])
    loss = dc.sum(dc.mul(out, np.array([2.0, -3.0])))
    dc.backward(tape, loss)
    np.testing.assert_array_equal(params.grads["e"], [2.0, -3.0])
    np.testing.assert_array_equal(params.grads["z"], [0.0, 0.0])


def test_straight_through_rejects_shape_mismatch():
    tape = dc.Tape()
    with pytest.raises(ValueError):
        dc.straight_through(tape.const(np.zeros(3)), tape.const(np.zeros(2)))


def test_stale_tape_is_refused():
    params = dc.ParamSet({"w": np.ones(3)})
    tape = dc.Tape()
    loss = dc.sum(dc.square(tape.param(params, "w")))
    params.values["w"] += 1.0
    params.bump()
    with pytest.raises(dc.TapeError):
        dc.backward(tape, loss)


def test_backward_rejects_foreign_output():
    params = dc.ParamSet({"w": np.ones(2)})
    t1, t2 = dc.Tape(), dc.Tape()
    dc.sum(t1.param(params, "w"))
    other = dc.sum(t2.param(params, "w"))
    with pytest.raises(dc.TapeError):
        dc.backward(t1, other)


def test_non_finite_values_raise():
    tape = dc.Tape()
    with pytest.raises(FloatingPointError):
        dc.log(tape.const(np.array([1.0, -1.0])))
    with pytest.raises(FloatingPointError):
        dc.exp(tape.const(np.array([1e4])))
    with pytest.raises(FloatingPointError):
        tape.const(np.array([np.nan]))


def test_gradients_accumulate_over_reused_leaf():
    params = dc.ParamSet({"w": np.array([1.5, -2.0])})
    tape = dc.Tape()
    w = tape.param(params, "w")
    loss = dc.sum(dc.add(dc.mul(w, w), w))
    dc.backward(tape, loss)
    np.testing.assert_allclose(params.grads["w"], 2 * params["w"] + 1)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    arrays(np.float64, (4,), elements=st.floats(-3, 3)),
)
def test_broadcast_add_gradient_sums_over_broadcast_axis(a, b):
    params = dc.ParamSet({"a": a, "b": b})
    tape = dc.Tape()
    out = dc.add(tape.param(params, "a"), tape.param(params, "b"))
    dc.backward(tape, dc.sum(out))
    np.testing.assert_array_equal(params.grads["a"], np.ones((3, 4)))
    np.testing.assert_array_equal(params.grads["b"], np.full(4, 3.0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-20, 20)))
def test_logsumexp_is_stable_and_matches_numpy(x):
    tape = dc.Tape()
    out = dc.logsumexp(tape.const(x), axis=1)
    m = x.max(axis=1)
    np.testing.assert_allclose(out.value, m + np.log(np.exp(x - m[:, None]).sum(axis=1)), rtol=1e-12)


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        dc.MlpSpec((3,))
    with pytest.raises(ValueError):
        dc.MlpSpec((3, 0, 2))
    with pytest.raises(ValueError):
        dc.MlpSpec((3, 2), "sigmoid")


def test_mlp_init_is_seeded():
    a = dc.init_mlp(dc.MlpSpec((4, 8, 2), seed=3))
    b = dc.init_mlp(dc.MlpSpec((4, 8, 2), seed=3))
    c = dc.init_mlp(dc.MlpSpec((4, 8, 2), seed=4))
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())
    assert np.all(np.abs(a["W0"]) <= 0.5)


def test_forward_checks_input_width():
    spec = dc.MlpSpec((4, 3))
    params = dc.init_mlp(spec)
    with pytest.raises(ValueError):
        dc.forward(spec, params, np.zeros((2, 5)))


def test_adam_minimizes_quadratic_bowl():
    params = dc.ParamSet({"theta": np.array([3.0, -2.0, 0.5])})
    state = dc.AdamState()
    for _ in range(2000):
        params.grads["theta"][:] = 2 * params["theta"]
        dc.optimizer_step(params, state, lr=1e-2)
    assert np.linalg.norm(params["theta"]) < 1e-3


def test_clipping_returns_preclip_norm_and_bounds_update():
    params = dc.ParamSet({"w": np.zeros(2)})
    params.grads["w"][:] = [30.0, 40.0]
    state = dc.AdamState()
    norm = dc.optimizer_step(params, state, lr=0.1, grad_clip=1.0)
    assert norm == pytest.approx(50.0)
    # first Adam step moves each coordinate by about lr regardless of scale
    np.testing.assert_allclose(np.abs(params["w"]), 0.1, rtol=1e-6)


def test_weight_decay_is_decoupled():
    params = dc.ParamSet({"w": np.array([2.0])})
    dc.optimizer_step(params, dc.AdamState(), lr=0.1, weight_decay=0.5)
    # zero gradient: only the decay term acts
    np.testing.assert_allclose(params["w"], [2.0 * (1 - 0.05)])


def test_optimizer_refuses_non_finite_gradient():
    params = dc.ParamSet({"w": np.zeros(2)})
    params.grads["w"][:] = [np.inf, 0.0]
    with pytest.raises(FloatingPointError):
        dc.optimizer_step(params, dc.AdamState(), lr=0.1)
    np.testing.assert_array_equal(params["w"], 0.0)


def test_optimizer_bumps_version():
    params = dc.ParamSet({"w": np.zeros(1)})
    v = params.version
    dc.optimizer_step(params, dc.AdamState(), lr=0.1)
    assert params.version > v


def test_checkpoint_roundtrip(tmp_path):
    params = dc.init_mlp(dc.MlpSpec((3, 4, 2), seed=1))
    path = str(tmp_path / "ck")
    dc.save_checkpoint(params, path, {"note": "x"})
    loaded, meta = dc.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert loaded.names() == params.names()
    for k in params.names():
        np.testing.assert_array_equal(loaded[k], params[k].astype(np.float32).astype(np.float64))
    text = (tmp_path / "ck.manifest").read_text()
    assert text.startswith("format: mvplam-params-1")
    assert "sha256:" in text


def test_checkpoint_detects_truncation(tmp_path):
    params = dc.ParamSet({"w": np.ones(4)})
    path = str(tmp_path / "ck")
    dc.save_checkpoint(params, path)
    with open(path + ".params", "r+b") as fh:
        fh.truncate(8)
    with pytest.raises(ValueError):
        dc.load_checkpoint(path)


def test_directional_check_on_mlp_relu_and_tanh_agree_with_fd():
    gen = np.random.default_rng(5)
    for act in ("tanh", "relu"):
        spec = dc.MlpSpec((3, 6, 6, 2), act, 2)
        params = dc.init_mlp(spec)
        x = gen.standard_normal((7, 3))

        def f():
            out, _ = dc.forward(spec, params, x)
            return float(np.sum(out.value ** 2))

        out, tape = dc.forward(spec, params, x)
        params.zero_grad()
        dc.backward(tape, dc.sum(dc.square(out)))
        d = random_direction(params, gen)
        assert rel_err(ad_directional(params, d), directional_fd(f, params, d)) < 1e-6
