import numpy as np
import pytest

from glame_lab import autodiff as ad
from glame_lab.autodiff import GradTape, Tensor

INSTANCES = 20
TOL = 1e-3


def grad_check(fn, *shapes, seed=0, positive=False, step=1e-6):
    """Compare tape gradients of ``sum(fn(*xs) * r)`` with central differences in float64."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    out_shape = np.shape(fn(*[Tensor(x) for x in xs]).data)
    r = rng.normal(size=out_shape)

    def scalar(*vals):
        return float((fn(*[Tensor(v) for v in vals]).data * r).sum())

    with GradTape() as tape:
        ts = [tape.watch(Tensor(x)) for x in xs]
        loss = ad.sum(ad.mul(fn(*ts), r))
    grads = ad.backward(tape, loss)
    errs = []
    for i, x in enumerate(xs):
        def f(v, i=i):
            vals = list(xs)
            vals[i] = v
            return scalar(*vals)
        num = ad.numerical_gradient(f, x, step)
        errs.append(ad.relative_error(grads[ts[i]], num))
    return max(errs)


PRIMITIVES = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)], {}),
    "add_broadcast": (lambda a, b: ad.add(a, b), [(2, 3, 4), (4,)], {}),
    "sub": (lambda a, b: ad.sub(a, b), [(5,), (5,)], {}),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (1, 4)], {}),
    "matmul_2d": (lambda a, b: ad.matmul(a, b), [(3, 5), (5, 2)], {}),
    "matmul_batched": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 5)], {}),
    "matmul_3d_2d": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)], {}),
    "sum_axis": (lambda a: ad.sum(a, axis=1), [(3, 4)], {}),
    "mean": (lambda a: ad.mean(a, axis=0, keepdims=True), [(3, 4)], {}),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), [(3, 4)], {}),
    "transpose": (lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 4)], {}),
    "getitem_fancy": (lambda a: ad.getitem(a, np.array([0, 2, 2])), [(4, 3)], {}),
    "embedding": (lambda t: ad.embedding(t, np.array([[1, 0], [1, 3]])), [(4, 3)], {}),
    "put_rows": (lambda x, v: ad.put_rows(x, (np.array([0, 1]), np.array([2, 0])), v), [(2, 3, 4), (4,)], {}),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], {}),
    "relu": (lambda a: ad.relu(a), [(4, 5)], {}),
    "gelu": (lambda a: ad.gelu(a), [(4, 5)], {}),
    "exp": (lambda a: ad.exp(a), [(6,)], {}),
    "log": (lambda a: ad.log(a), [(6,)], {"positive": True}),
    "softmax": (lambda a: ad.softmax(a, axis=-1), [(3, 5)], {}),
    "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), [(3, 5)], {}),
    "layernorm": (lambda x, g, b: ad.layernorm(x, g, b), [(3, 6), (6,), (6,)], {}),
    "kl_divergence": (lambda a, b: ad.kl_divergence(ad.log_softmax(a), ad.log_softmax(b)), [(2, 5), (2, 5)], {}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes, kw = PRIMITIVES[name]
    worst = max(grad_check(fn, *shapes, seed=s, **kw) for s in range(INSTANCES))
    assert worst <= TOL, f"{name}: relative error {worst:.2e}"


def test_cross_entropy_gradient_with_weights():
    rng = np.random.default_rng(1)
    for s in range(INSTANCES):
        targets = rng.integers(0, 5, size=(2, 3))
        weights = rng.random((2, 3))
        err = grad_check(lambda x: ad.cross_entropy(x, targets, weights), (2, 3, 5), seed=s)
        assert err <= TOL


def test_cross_entropy_matches_manual_value():
    logits = np.array([[[2.0, 0.0, -1.0], [0.5, 0.5, 0.5]]])
    targets = np.array([[0, 2]])
    lse = np.log(np.exp(logits).sum(-1))
    expected = np.mean([lse[0, 0] - 2.0, lse[0, 1] - 0.5])
    assert ad.cross_entropy(Tensor(logits), targets).item() == pytest.approx(expected, rel=1e-12)


def test_relu_subgradient_at_zero_is_zero():
    with GradTape() as tape:
        x = tape.watch(Tensor(np.zeros(3)))
        y = ad.sum(ad.relu(x))
    assert np.array_equal(ad.backward(tape, y)[x], np.zeros(3))


def test_gradient_accumulates_over_reuse():
    with GradTape() as tape:
        x = tape.watch(Tensor(np.array([1.0, 2.0])))
        y = ad.sum(ad.add(ad.mul(x, x), x))
    assert np.allclose(ad.backward(tape, y)[x], [3.0, 5.0])


def test_untracked_inputs_are_absent():
    c = Tensor(np.ones(2))
    with GradTape() as tape:
        x = tape.watch(Tensor(np.ones(2)))
        y = ad.sum(ad.mul(x, c))
    grads = ad.backward(tape, y)
    assert x in grads and c not in grads


def test_backward_contract_errors():
    with GradTape() as tape:
        x = tape.watch(Tensor(np.ones(3)))
        y = ad.mul(x, 2.0)
    with pytest.raises(ad.ContractError):
        ad.backward(tape, y)
    with pytest.raises(ad.ContractError):
        ad.backward(tape, Tensor(1.0))


def test_no_tape_means_no_tracking():
    x = Tensor(np.ones(2), tracked=True)
    assert not ad.add(x, 1.0).tracked


def test_tensor_data_is_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_float32_default_and_float64_preserved():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64
    assert ad.add(Tensor(np.ones(2, np.float32)), 1.0).dtype == np.float32


def test_matmul_shape_mismatch_raises():
    with pytest.raises((ad.DimensionError, ValueError)):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_solve_spd_matches_dense_solve():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(6, 6))
        c = a @ a.T + 6 * np.eye(6)
        v = rng.normal(size=6)
        assert np.allclose(ad.solve_spd(c, v), np.linalg.solve(c, v), rtol=1e-10)


def test_solve_spd_rejects_indefinite():
    with pytest.raises(ad.NumericalError, match="condition"):
        ad.solve_spd(np.diag([1.0, -1.0]), np.ones(2))


def test_solve_spd_shape_error():
    with pytest.raises(ad.DimensionError):
        ad.solve_spd(np.eye(3), np.ones(2))


def test_adamw_step_hand_computed():
    p, g = np.array([1.0]), np.array([0.5])
    new, m, v = ad.adamw_step(p, g, np.zeros(1), np.zeros(1), 1, lr=0.1, weight_decay=0.01)
    # first step: mhat = g, vhat = g^2, so the update is lr * sign(g) (up to eps)
    assert new[0] == pytest.approx(1.0 * (1 - 0.001) - 0.1 * 0.5 / (0.5 + 1e-8))
    assert m[0] == pytest.approx(0.05) and v[0] == pytest.approx(0.00025)


def test_adamw_no_decay_keys():
    opt = ad.AdamW({"a": np.ones(1), "b": np.ones(1)}, lr=0.1, weight_decay=0.5, no_decay={"b"})
    opt.step({"a": np.zeros(1), "b": np.zeros(1)})
    assert opt.params["a"][0] == pytest.approx(0.95)
    assert opt.params["b"][0] == 1.0


def test_adamw_minimizes_quadratic():
    opt = ad.AdamW({"x": np.array([3.0, -2.0])}, lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.step({"x": 2 * opt.params["x"]})
    assert np.abs(opt.params["x"]).max() < 1e-2
