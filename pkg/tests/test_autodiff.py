import numpy as np
import pytest

from propsched.autodiff import Tape, TapeConsumed


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        dn = f()
        flat[i] = orig
        gf[i] = (up - dn) / (2 * h)
    return g


def check_param_grad(build, x0, tol=1e-7):
    """build(tape, param_ref) must mark a scalar output named 'y'."""
    x = np.array(x0, dtype=np.float64)

    def run():
        t = Tape()
        ref = t.param("x", x)
        build(t, ref)
        return float(t.value(t.outputs["y"]))

    run()  # shape sanity
    t = Tape()
    ref = t.param("x", x)
    build(t, ref)
    analytic = t.backward({"y": np.array(1.0)})["x"]
    numeric = numeric_grad(run, x)
    assert np.allclose(analytic, numeric, atol=tol, rtol=1e-5), (analytic, numeric)


def test_matmul_and_sum():
    b = np.arange(6, dtype=np.float64).reshape(3, 2)
    check_param_grad(lambda t, x: t.mark_output("y", t.sum(t.matmul(x, t.const(b)))),
                     np.ones((2, 3)))


def test_matvec_dot_add_mul_sub():
    v = np.array([0.3, -0.7, 1.1])

    def build(t, x):
        mv = t.matvec(x, t.const(v))            # (2,)
        d = t.dot(mv, mv)
        s = t.add(d, t.const(np.array(2.0)))
        m = t.mul(s, s)
        t.mark_output("y", t.sub(m, d))

    check_param_grad(build, np.random.default_rng(0).normal(size=(2, 3)))


def test_nonlinearities():
    rng = np.random.default_rng(1)

    # y = sum(log(exp(0.5 * elu(leaky_relu(x))) + 1))
    def build(t, x):
        a = t.leaky_relu(x, 0.2)
        b = t.elu(a)
        c = t.exp(t.scale(b, 0.5))
        t.mark_output("y", t.sum(t.log(t.add(c, t.const(np.ones(4))))))

    check_param_grad(build, rng.normal(size=4) + 0.01)


def test_gather_segment_softmax_scale_rows():
    rng = np.random.default_rng(2)
    idx = np.array([0, 2, 1, 2])
    seg = np.array([0, 0, 1, 1])

    def build(t, x):
        rows = t.gather_rows(x, idx)              # (4, 3)
        scores = t.matvec(rows, t.const(np.array([1.0, -1.0, 0.5])))
        alpha = t.segment_softmax(scores, seg, 2)
        msg = t.scale_rows(rows, alpha)
        agg = t.segment_sum(msg, seg, 2)
        t.mark_output("y", t.dot(t.mean_rows(agg), t.const(np.array([0.2, 0.4, -0.3]))))

    check_param_grad(build, rng.normal(size=(3, 3)))


def test_concat_slice_broadcast():
    rng = np.random.default_rng(3)

    def build(t, x):
        a = t.slice1d(x, 0, 2)
        b = t.slice1d(x, 2, 5)
        m = t.concat_cols([t.broadcast_row(a, 3), t.broadcast_row(b, 3)])
        mm = t.concat_rows(m, m)
        t.mark_output("y", t.sum(t.mul(mm, mm)))

    check_param_grad(build, rng.normal(size=5))


def test_segment_softmax_rows_sum_to_one():
    t = Tape()
    s = t.const(np.array([3.0, -1.0, 0.5, 2.0, 2.0]))
    seg = np.array([0, 0, 0, 1, 1])
    alpha = t.segment_softmax(s, seg, 2)
    v = t.value(alpha)
    assert v[:3].sum() == pytest.approx(1.0)
    assert v[3:].sum() == pytest.approx(1.0)


def test_dropout_scales_and_masks():
    t = Tape()
    x = t.param("x", np.ones((100, 4)))
    rng = np.random.default_rng(0)
    d = t.dropout(x, 0.25, rng)
    vals = t.value(d)
    assert set(np.unique(vals)).issubset({0.0, 1 / 0.75})
    t.mark_output("y", t.sum(d))
    g = t.backward({"y": np.array(1.0)})["x"]
    assert set(np.unique(g)).issubset({0.0, 1 / 0.75})


def test_zero_seed_gives_zero_grads():
    t = Tape()
    x = t.param("x", np.ones((3, 2)))
    y = t.sum(t.mul(x, x))
    t.mark_output("y", y)
    g = t.backward({"y": np.array(0.0)})["x"]
    assert (g == 0).all()


def test_unreached_param_gets_zeros():
    t = Tape()
    x = t.param("x", np.ones(3))
    z = t.param("z", np.ones(2))
    t.mark_output("y", t.sum(x))
    g = t.backward({"y": np.array(1.0)})
    assert (g["x"] == 1).all()
    assert (g["z"] == 0).all()


def test_tape_is_single_use():
    t = Tape()
    x = t.param("x", np.ones(2))
    t.mark_output("y", t.sum(x))
    t.backward({"y": np.array(1.0)})
    with pytest.raises(TapeConsumed):
        t.backward({"y": np.array(1.0)})


def test_add_broadcasting_unbroadcasts_grad():
    t = Tape()
    x = t.param("x", np.zeros((4, 3)))
    b = t.param("b", np.zeros(3))
    t.mark_output("y", t.sum(t.add(x, b)))
    g = t.backward({"y": np.array(1.0)})
    assert g["x"].shape == (4, 3) and (g["x"] == 1).all()
    assert g["b"].shape == (3,) and (g["b"] == 4).all()
