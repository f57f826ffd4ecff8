import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amal import nncore
from amal.losses import ce_term, kd_term
from amal.nncore import MlpParams, SgdState

from conftest import central_diff, random_net, rel_err


def straight_line_forward(params: MlpParams, x):
    """Scalar loops over the weight entries, no matrix products."""
    z = list(map(float, x))
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = []
        for j in range(w.shape[1]):
            s = float(b[j])
            for i in range(w.shape[0]):
                s += z[i] * float(w[i, j])
            out.append(s)
        if k < len(params.weights) - 1:
            out = [math.tanh(v) if params.activation == "tanh" else max(v, 0.0) for v in out]
        z = out
    return z


def test_zero_params_give_zero_logits():
    p = nncore.init_mlp((3, 4, 2), 0)
    p = p.zeros_like()
    assert np.array_equal(nncore.forward(p, np.ones((5, 3))), np.zeros((5, 2)))


def test_identity_layer():
    p = MlpParams((2, 2), [np.eye(2)], [np.zeros(2)], "relu")
    assert np.array_equal(nncore.forward(p, np.array([[1.0, 2.0]])), np.array([[1.0, 2.0]]))


def test_forward_matches_straight_line_oracle():
    p = nncore.init_mlp((2, 3, 2), 0, "tanh")
    got = nncore.forward(p, np.array([[0.5, -0.5]]))[0]
    want = straight_line_forward(p, [0.5, -0.5])
    assert np.allclose(got, want, rtol=0, atol=1e-14)


def test_init_is_glorot_uniform_and_seeded():
    p = nncore.init_mlp((30, 20, 10), 7)
    for w, (fi, fo) in zip(p.weights, [(30, 20), (20, 10)]):
        assert np.abs(w).max() <= math.sqrt(6 / (fi + fo))
    assert all(np.array_equal(b, np.zeros_like(b)) for b in p.biases)
    q = nncore.init_mlp((30, 20, 10), 7)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_shape_error_on_wrong_input_dim():
    p = nncore.init_mlp((3, 2), 0)
    with pytest.raises(nncore.ShapeError):
        nncore.forward(p, np.ones((2, 4)))


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        MlpParams((2, 2), [np.ones((2, 3))], [np.zeros(2)], "relu")
    with pytest.raises(nncore.NumericError):
        MlpParams((2, 2), [np.full((2, 2), np.nan)], [np.zeros(2)], "relu")


def _mean_loss(params, x, terms):
    logits = nncore.forward(params, x)
    return float(sum((c * t(logits)[0]).sum() for t, c in terms) / len(x))


def test_per_instance_grads_match_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        p = random_net(rng, activation="tanh")
        n = int(rng.integers(1, 6))
        x = rng.normal(size=(n, p.layer_dims[0]))
        y = rng.integers(0, p.n_classes, n)
        t = rng.normal(size=(n, p.n_classes)) * 2
        terms = [(ce_term(y), rng.uniform(0, 1, n)), (kd_term(t, 2.0), rng.uniform(0, 1, n))]
        g = nncore.per_instance_grads(p, x, terms)
        for a, ga in zip(p.arrays(), g.arrays()):
            fd = central_diff(lambda: _mean_loss(p, x, terms), a)
            worst = max(worst, rel_err(fd, ga))
    assert worst <= 1e-5


def test_grads_zero_coefficients_and_linearity():
    rng = np.random.default_rng(1)
    p = random_net(rng)
    x = rng.normal(size=(1, p.layer_dims[0]))
    y = np.array([0])
    zero = nncore.per_instance_grads(p, x, [(ce_term(y), np.zeros(1))])
    assert all(not a.any() for a in zero.arrays())
    one = nncore.per_instance_grads(p, x, [(ce_term(y), np.ones(1))])
    two = nncore.per_instance_grads(p, x, [(ce_term(y), np.full(1, 2.0))])
    assert all(np.array_equal(2 * a, b) for a, b in zip(one.arrays(), two.arrays()))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_superposition(seed, a, b):
    rng = np.random.default_rng(seed)
    p = random_net(rng, activation="tanh")
    n = 3
    x = rng.normal(size=(n, p.layer_dims[0]))
    y = rng.integers(0, p.n_classes, n)
    t = rng.normal(size=(n, p.n_classes))
    ca, cb = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    ga = nncore.per_instance_grads(p, x, [(ce_term(y), ca)])
    gb = nncore.per_instance_grads(p, x, [(kd_term(t, 3.0), cb)])
    both = nncore.per_instance_grads(p, x, [(ce_term(y), a * ca), (kd_term(t, 3.0), b * cb)])
    for u, v, w in zip(ga.arrays(), gb.arrays(), both.arrays()):
        assert np.allclose(a * u + b * v, w, rtol=1e-10, atol=1e-12)


def test_last_layer_grads_match_full_and_fd():
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = random_net(rng, activation="tanh")
        n = 4
        x = rng.normal(size=(n, p.layer_dims[0]))
        y = rng.integers(0, p.n_classes, n)
        coeff = rng.uniform(0, 1, n)
        coeff[1] = 0.0
        terms = [(ce_term(y), coeff)]
        dw, db = nncore.last_layer_grads(p, x, terms)
        full = nncore.per_instance_grads(p, x, terms)
        assert np.allclose(dw.sum(axis=0) / n, full.weights[-1], atol=1e-14)
        assert np.allclose(db.sum(axis=0) / n, full.biases[-1], atol=1e-14)
        assert not dw[1].any() and not db[1].any()
        for i in range(n):
            one = [(ce_term(y[i:i + 1]), coeff[i:i + 1])]
            fd = central_diff(lambda: _mean_loss(p, x[i:i + 1], one), p.weights[-1])
            assert rel_err(fd, dw[i]) <= 1e-5 or not coeff[i]


def test_last_layer_grads_single_layer_is_full_gradient():
    rng = np.random.default_rng(3)
    p = nncore.init_mlp((4, 3), 0)
    x = rng.normal(size=(2, 4))
    terms = [(ce_term(np.array([0, 2])), np.ones(2))]
    dw, db = nncore.last_layer_grads(p, x, terms)
    for i in range(2):
        g = nncore.per_instance_grads(p, x[i:i + 1], [(ce_term(np.array([[0, 2][i]])), np.ones(1))])
        assert np.allclose(dw[i], g.weights[0]) and np.allclose(db[i], g.biases[0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_error_names_instance():
    p = MlpParams((1, 2), [np.array([[1e308, -1e308]])], [np.zeros(2)], "relu")
    with pytest.raises(nncore.NumericError) as exc:
        nncore.forward(p, np.array([[0.0], [10.0]]))
    assert exc.value.instance_id == 1


def test_jvp_matches_gradient_inner_products():
    rng = np.random.default_rng(4)
    p = random_net(rng, activation="tanh")
    x = rng.normal(size=(3, p.layer_dims[0]))
    cache = nncore.forward_cache(p, x)
    direction = p.with_flat(rng.normal(size=p.flat().size))
    g = rng.normal(size=(3, p.n_classes))
    jv = nncore.jvp(p, cache, direction)
    for i in range(3):
        gi = np.zeros_like(g)
        gi[i] = g[i]
        assert np.isclose(jv[i] @ g[i], nncore.backward(p, cache, gi).dot(direction), rtol=1e-12)


# SGD ------------------------------------------------------------------------------

def _scalar(v):
    return MlpParams((1, 1), [np.array([[v]])], [np.zeros(1)], "relu")


def test_sgd_zero_everything_is_noop():
    st_ = SgdState(lr0=0.1, momentum=0.9, weight_decay=0.0)
    p = nncore.init_mlp((3, 2), 0)
    q = nncore.sgd_step(p, p.zeros_like(), st_, 0)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_sgd_closed_form_step():
    st_ = SgdState(lr0=0.1, momentum=0.0, weight_decay=0.0)
    q = nncore.sgd_step(_scalar(0.5), _scalar(1.0), st_, 0)
    assert np.isclose(q.weights[0][0, 0], 0.4, rtol=0, atol=1e-15)


def test_sgd_two_step_momentum_recurrence():
    st_ = SgdState(lr0=0.1, momentum=0.9, weight_decay=0.0)
    p = nncore.sgd_step(_scalar(0.5), _scalar(1.0), st_, 0)
    p = nncore.sgd_step(p, _scalar(1.0), st_, 0)
    # v1 = 1, v2 = 0.9 + 1 = 1.9, p = 0.5 - 0.1 - 0.19
    assert np.isclose(p.weights[0][0, 0], 0.21, atol=1e-15)
    assert np.isclose(st_.velocity[0][0, 0], 1.9)


def test_sgd_weight_decay_enters_velocity():
    st_ = SgdState(lr0=1.0, momentum=0.0, weight_decay=0.5)
    q = nncore.sgd_step(_scalar(2.0), _scalar(0.0), st_, 0)
    assert np.isclose(q.weights[0][0, 0], 1.0)


def test_lr_schedule():
    st_ = SgdState(lr0=0.05, milestones=(150, 180, 210), gamma=0.1)
    assert nncore.lr_at_epoch(st_, 0) == 0.05
    assert math.isclose(nncore.lr_at_epoch(st_, 185), 0.0005, rel_tol=1e-12)
    assert math.isclose(nncore.lr_at_epoch(st_, 150), 0.005, rel_tol=1e-12)
    flat = SgdState(lr0=0.05, gamma=1.0)
    assert all(nncore.lr_at_epoch(flat, e) == 0.05 for e in (0, 150, 500))


def test_sgd_state_validation():
    with pytest.raises(ValueError):
        SgdState(milestones=(5, 5))
    with pytest.raises(ValueError):
        SgdState(momentum=1.0)
    with pytest.raises(ValueError):
        SgdState(lr0=0.0)


def test_momentum_reset_option():
    st_ = SgdState(lr0=0.1, momentum=0.9, weight_decay=0.0, milestones=(1,), reset_momentum_at_milestones=True)
    p = nncore.sgd_step(_scalar(0.0), _scalar(1.0), st_, 0)
    nncore.sgd_step(p, _scalar(1.0), st_, 1)
    assert np.isclose(st_.velocity[0][0, 0], 1.0)


def test_determinism():
    rng = np.random.default_rng(5)
    p = random_net(rng)
    x = rng.normal(size=(6, p.layer_dims[0]))
    y = rng.integers(0, p.n_classes, 6)
    a = nncore.per_instance_grads(p, x, [(ce_term(y), np.ones(6))])
    b = nncore.per_instance_grads(p, x, [(ce_term(y), np.ones(6))])
    assert all(np.array_equal(u, v) for u, v in zip(a.arrays(), b.arrays()))


# Checkpoints -----------------------------------------------------------------------

def test_checkpoint_round_trip_and_layout(tmp_path):
    p = nncore.init_mlp((3, 5, 2), 9, "tanh")
    path = tmp_path / "m.ckpt"
    nncore.save_checkpoint(p, path)
    raw = path.read_bytes()
    assert raw[:8] == b"AMALCKPT"
    assert struct.unpack_from("<IBB", raw, 8) == (1, 1, 2)
    assert struct.unpack_from("<3I", raw, 14) == (3, 5, 2)
    assert np.array_equal(np.frombuffer(raw, "<f8", 15, 26).reshape(3, 5), p.weights[0])
    assert len(raw) == 26 + 8 * (15 + 5 + 10 + 2)
    q = nncore.load_checkpoint(path)
    assert q.layer_dims == p.layer_dims and q.activation == "tanh"
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(ValueError):
        nncore.load_checkpoint(path)
    p = nncore.init_mlp((2, 2), 0)
    nncore.save_checkpoint(p, path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError):
        nncore.load_checkpoint(path)
