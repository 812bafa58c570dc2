import numpy as np
import pytest

from neref import autodiff as ad
from neref.optim import AdamState, ShapeMismatch, adam_step


def grad_of(fn, x):
    tape = ad.Tape()
    out = fn(tape.param(x))
    return out.value, ad.backward(tape, out)


def central_diff(fn, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        g[i] = (fn(ad.Tape().const(x + e)).value - fn(ad.Tape().const(x - e)).value) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def test_square():
    _, g = grad_of(lambda x: (x * x).sum(), np.array([3.0]))
    assert g[0] == 6.0


def test_normalize_jacobian_matches_analytic():
    for v in (np.array([1.0, 0.0, 0.0]), np.array([0.3, -1.2, 2.0])):
        vh = v / np.linalg.norm(v)
        J = (np.eye(3) - np.outer(vh, vh)) / np.linalg.norm(v)
        rows = [grad_of(lambda x, c=c: ad.dot(ad.normalize(x), c), v)[1] for c in np.eye(3)]
        np.testing.assert_allclose(np.array(rows), J, atol=1e-14)


rng = np.random.default_rng(0)
A = rng.normal(size=(4, 3))
W0 = rng.normal(size=(3, 5))
B0 = rng.normal(size=5)
C = rng.normal(size=(4, 3))

PRIMITIVES = {
    "affine_input": (lambda x: ad.affine(x, x.tape.const(W0), x.tape.const(B0)).sum(), A),
    "affine_weight": (lambda w: ad.sin(ad.affine(w.tape.const(A), w, w.tape.const(B0))).sum(), W0),
    "relu": (lambda x: (ad.relu(x) * C).sum(), A + 0.05 * np.sign(A)),
    "softplus": (lambda x: (ad.softplus(3 * x) * C).sum(), A),
    "sin": (lambda x: (ad.sin(x) * C).sum(), A),
    "cos": (lambda x: (ad.cos(x) * C).sum(), A),
    "exp": (lambda x: (ad.exp(x) * C).sum(), A),
    "sqrt": (lambda x: (ad.sqrt(x * x + 0.5) * C).sum(), A),
    "dot": (lambda x: (ad.dot(x, C) * ad.dot(x, x)).sum(), A),
    "normalize": (lambda x: (ad.normalize(x) * C).sum(), A),
    "division": (lambda x: (x[:, :2] / (x[:, 2:] * x[:, 2:] + 1.0)).sum(), A),
    "smooth_l1": (lambda x: (ad.smooth_l1(x, 0.7) * C).sum(), A + 0.01 * np.sign(A)),
    "abs": (lambda x: (ad.vabs(x) * C).sum(), A),
    "cumsum_exclusive": (lambda x: (ad.cumsum_exclusive(x, axis=1) * C).sum(), A),
    "getitem": (lambda x: (x[np.array([0, 2, 2])] * C[:3]).sum(), A),
    "concat_stack": (lambda x: (ad.concat([x, x * x], axis=1) * np.hstack([C, C])).sum()
                     + (ad.stack([x[:, 0], x[:, 1]], axis=-1) * C[:, :2]).sum(), A),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_against_central_differences(name):
    fn, x = PRIMITIVES[name]
    _, g = grad_of(fn, x)
    assert rel_err(g, central_diff(fn, x)) < 1e-6


def test_broadcast_gradients_are_reduced():
    b = np.array([1.0, -2.0, 0.5])
    _, g = grad_of(lambda v: ((v + A[:, :3]) * A[:, :3]).sum(), b)
    np.testing.assert_allclose(g, A[:, :3].sum(axis=0))


def test_non_scalar_output_rejected():
    tape = ad.Tape()
    x = tape.param(np.ones(3))
    with pytest.raises(ad.NonScalarOutput):
        ad.backward(tape, x * 2.0)


def test_unused_parameters_get_zero_gradient():
    tape = ad.Tape()
    a = tape.param(np.ones(2))
    tape.param(np.ones(3))
    g = ad.backward(tape, (a * a).sum())
    np.testing.assert_array_equal(g, [2, 2, 0, 0, 0])


def test_constant_branches_are_not_differentiated():
    tape = ad.Tape()
    c = tape.const(np.ones(3))
    y = ad.sin(c)
    assert tape.nodes[y.index].vjp is None


# --------------------------------------------------------------------------- #
# Adam                                                                         #
# --------------------------------------------------------------------------- #


def test_zero_gradient_is_a_fixed_point():
    p = np.random.default_rng(1).normal(size=10)
    st = AdamState(10)
    q = p.copy()
    for _ in range(50):
        q = adam_step(st, q, np.zeros(10))
    np.testing.assert_array_equal(q, p)


def test_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-4, 0.0])
    st = AdamState(4, lr=4e-4)
    out = adam_step(st, np.zeros(4), g)
    # m_hat = g, v_hat = g^2 after bias correction
    np.testing.assert_allclose(out, -4e-4 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_learning_rate_decay_schedule():
    st = AdamState(1)
    assert st.effective_lr(0) == 4e-4
    assert st.effective_lr(999) == 4e-4
    assert st.effective_lr(1000) == pytest.approx(3.5e-4, abs=1e-18)
    assert st.effective_lr(7000) == pytest.approx(5e-5, abs=1e-18)
    assert st.effective_lr(8000) == 1e-5            # floored rather than zero
    p = np.zeros(1)
    for _ in range(1000):
        p = adam_step(st, p, np.ones(1))
    assert st.effective_lr() == pytest.approx(3.5e-4, abs=1e-18)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step(AdamState(3), np.zeros(3), np.zeros(2))
