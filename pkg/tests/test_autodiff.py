import numpy as np
import pytest

from tbsim import autodiff as ad
from tbsim.autodiff import Tape, Tensor, tape_context
from tbsim import nn

from util import check_gradients, numeric_grad

RNG = np.random.default_rng(0)


def rand(*shape):
    return RNG.standard_normal(shape)


# ---------------------------------------------------------------------------
# core op forward values
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = rand(3, 3)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_allclose(out.numpy(), a.astype(np.float32), rtol=1e-6)


def test_softmax_uniform_row():
    out = ad.softmax(Tensor(np.full((1, 4), 3.7)))
    np.testing.assert_allclose(out.numpy(), np.full((1, 4), 0.25), atol=1e-7)


def test_shape_mismatch_message():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(3, 2\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_layer_norm_moments():
    x = Tensor(rand(16, 32) * 5 + 2)
    y = ad.layer_norm(x).numpy()
    assert np.abs(y.mean(axis=-1)).max() < 1e-6
    assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-4


def test_dropout_identity_cases():
    x = Tensor(rand(8, 8))
    rng = np.random.default_rng(1)
    assert ad.dropout(x, 0.5, False, rng) is x
    assert ad.dropout(x, 0.0, True, rng) is x


def test_wrap_angle_op():
    vals = np.array([3 * np.pi, -np.pi, 0.1])
    out = ad.wrap_angle_op(Tensor(vals, dtype=np.float64)).numpy()
    np.testing.assert_allclose(out, [np.pi, np.pi, 0.1], atol=1e-12)


# ---------------------------------------------------------------------------
# gradient checks: every differentiable op against central differences
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    ("add_scalar", lambda a, b: ad.add(a, b), [(3, 4), ()]),
    ("sub", lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    ("mul", lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    ("div", lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)), [(3, 4), (3, 4)]),
    ("neg", lambda a: ad.neg(a), [(5,)]),
    ("matmul", lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    ("matmul_batched", lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    ("matmul_mixed", lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 2)]),
    ("relu", lambda a: ad.relu(a), [(4, 4)]),
    ("tanh", lambda a: ad.tanh(a), [(4, 4)]),
    ("sigmoid", lambda a: ad.sigmoid(a), [(4, 4)]),
    ("sin", lambda a: ad.sin(a), [(4, 4)]),
    ("cos", lambda a: ad.cos(a), [(4, 4)]),
    ("exp", lambda a: ad.exp(a), [(4, 4)]),
    ("log", lambda a: ad.log(ad.add(ad.mul(a, a), 0.5)), [(4, 4)]),
    ("sqrt", lambda a: ad.sqrt(ad.add(ad.mul(a, a), 0.5)), [(4, 4)]),
    ("square", lambda a: ad.square(a), [(4, 4)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 5)]),
    ("slice", lambda a: a[1:3, ::2], [(4, 6)]),
    ("index_select", lambda a: ad.index_select(a, np.array([0, 2, 2, 1])), [(3, 4)]),
    ("reshape", lambda a: ad.reshape(a, (2, 6)), [(3, 4)]),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    ("expand", lambda a: ad.expand(a, (5,)), [(3, 4)]),
    ("sum_all", lambda a: ad.sum_(a), [(3, 4)]),
    ("sum_axis", lambda a: ad.sum_(a, axis=1), [(3, 4)]),
    ("mean_axis", lambda a: ad.mean(a, axis=0, keepdims=True), [(3, 4)]),
    ("max", lambda a: ad.max_(a, axis=1), [(3, 5)]),
    ("softmax", lambda a: ad.softmax(a, axis=-1), [(3, 5)]),
    ("layer_norm", lambda a: ad.layer_norm(a), [(3, 8)]),
    ("masked_fill", lambda a: ad.masked_fill(a, np.eye(4, dtype=bool), 0.5), [(4, 4)]),
    ("where_mask", lambda a, b: ad.where_mask(np.eye(4, dtype=bool), a, b), [(4, 4), (4, 4)]),
    ("clamp", lambda a: ad.clamp(a, -0.5, 0.5), [(4, 4)]),
    ("abs", lambda a: ad.abs_(ad.add(a, 3.0)), [(4, 4)]),
    ("logsumexp", lambda a: ad.logsumexp(a, axis=-1), [(3, 5)]),
    ("logsumexp_keepdims", lambda a: ad.logsumexp(a, axis=-1, keepdims=True), [(3, 5)]),
    ("take_along_last", lambda a: ad.take_along_last(a, np.array([1, 3, 0])), [(3, 5)]),
])
def test_op_gradients(name, fn, shapes):
    inputs = [rand(*s) for s in shapes]
    check_gradients(fn, inputs, rtol=1e-4)


def test_attention_gradients():
    q, k, v = rand(3, 8), rand(5, 8), rand(5, 8)
    mask = np.array([True, True, False, True, True])
    check_gradients(lambda q, k, v: ad.attention(q, k, v, mask), [q, k, v], rtol=1e-4)


def test_shared_subexpression_accumulates():
    # y = x*x + x*x must give the same gradient as z = 2*(x*x) built separately
    x = rand(3, 3)

    def dup(a):
        s = ad.mul(a, a)
        return ad.add(s, s)

    def ref(a):
        return ad.mul(ad.mul(a, a), 2.0)

    g_dup = check_gradients(dup, [x.copy()])
    g_ref = check_gradients(ref, [x.copy()])
    assert g_dup < 1e-4 and g_ref < 1e-4


def test_backward_visits_each_node_once():
    with ad.default_dtype(np.float64):
        x = Tensor(rand(2, 2), requires_grad=True)
        with tape_context(Tape()) as tape:
            y = ad.mul(x, x)
            z = ad.add(y, y)
            ad.sum_(z).backward()
        assert len(tape) == 3
        np.testing.assert_allclose(x.grad, 4 * x.data, rtol=1e-12)


# ---------------------------------------------------------------------------
# stop_gradient
# ---------------------------------------------------------------------------


def test_stop_gradient_blocks_path():
    with ad.default_dtype(np.float64):
        x = Tensor(rand(3), requires_grad=True)
        w = Tensor(rand(3), requires_grad=True)
        with tape_context(Tape()):
            loss = ad.sum_(ad.mul(ad.stop_gradient(x), w))
            loss.backward()
        assert x.grad is None
        np.testing.assert_allclose(w.grad, x.data)


def test_stop_gradient_through_dynamics_style_chain():
    # s1 = s0 + a0, a0 = w*s0; with sg on a0, dloss/ds0 keeps only the state path
    with ad.default_dtype(np.float64):
        s0 = Tensor(np.array([2.0]), requires_grad=True)
        w = Tensor(np.array([3.0]), requires_grad=True)
        with tape_context(Tape()):
            a0 = ad.mul(w, s0)
            s1 = ad.add(s0, ad.stop_gradient(a0))
            ad.sum_(s1).backward()
        np.testing.assert_allclose(s0.grad, [1.0])  # not 1 + w
        assert w.grad is None


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def test_gru_zero_params_halves_hidden():
    rng = np.random.default_rng(3)
    with ad.default_dtype(np.float64):
        cell = nn.GruCell(4, 6, rng)
        for p in cell.parameters():
            p.data[...] = 0.0
        h = Tensor(rand(2, 6))
        x = Tensor(rand(2, 4))
        out = cell(h, x)
        np.testing.assert_allclose(out.numpy(), h.numpy() / 2, rtol=1e-12)


def test_gru_gradients():
    rng = np.random.default_rng(4)
    with ad.default_dtype(np.float64):
        cell = nn.GruCell(3, 5, rng)
    h, x = rand(2, 5), rand(2, 3)
    check_gradients(lambda h, x: cell(h, x), [h, x], rtol=1e-4)


def test_gru_batch_independence():
    rng = np.random.default_rng(5)
    with ad.default_dtype(np.float64):
        cell = nn.GruCell(3, 5, rng)
        h, x = rand(5, 5), rand(5, 3)
        full = cell(Tensor(h), Tensor(x)).numpy()
        row = cell(Tensor(h[2:3]), Tensor(x[2:3])).numpy()
    np.testing.assert_allclose(full[2:3], row, rtol=1e-12)


def test_attention_single_key_returns_value():
    q = Tensor(rand(4, 8))
    k = Tensor(rand(1, 8))
    v = Tensor(rand(1, 8))
    out = ad.attention(q, k, v).numpy()
    np.testing.assert_allclose(out, np.broadcast_to(v.numpy(), (4, 8)), rtol=1e-6)


def test_attention_masking_equals_deletion():
    q, k, v = Tensor(rand(3, 8)), Tensor(rand(6, 8)), Tensor(rand(6, 8))
    mask = np.array([True, False, True, True, False, True])
    masked = ad.attention(q, k, v, mask).numpy()
    removed = ad.attention(q, Tensor(k.numpy()[mask]), Tensor(v.numpy()[mask])).numpy()
    np.testing.assert_allclose(masked, removed, atol=1e-6)


def test_attention_key_permutation_invariance():
    q, k, v = rand(3, 8), rand(6, 8), rand(6, 8)
    mask = np.array([True, False, True, True, True, False])
    perm = np.random.default_rng(9).permutation(6)
    a = ad.attention(Tensor(q), Tensor(k), Tensor(v), mask).numpy()
    b = ad.attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), mask[perm]).numpy()
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_attention_fully_masked_query_zeros_and_flagged():
    q, k, v = Tensor(rand(2, 4)), Tensor(rand(3, 4)), Tensor(rand(3, 4))
    mask = np.zeros((2, 3), dtype=bool)
    mask[0] = True  # second query has no valid key
    out, fallback = ad.attention(q, k, v, mask, return_fallback=True)
    assert fallback.tolist() == [False, True]
    np.testing.assert_allclose(out.numpy()[1], 0.0)


def test_multihead_attention_gradcheck():
    rng = np.random.default_rng(7)
    with ad.default_dtype(np.float64):
        mha = nn.MultiheadAttention(8, 2, rng)
    q, k = rand(3, 8), rand(5, 8)
    mask = np.array([True, True, True, False, True])
    check_gradients(lambda q, k: mha(q, k, k, mask), [q, k], rtol=1e-4)


def test_transformer_layer_gradcheck():
    rng = np.random.default_rng(8)
    with ad.default_dtype(np.float64):
        layer = nn.TransformerLayer(8, 2, 16, 0.0, rng)
        layer.eval()
    x, ctx = rand(3, 8), rand(4, 8)
    check_gradients(lambda x, c: layer(x, c, np.array([True, True, False, True])), [x, ctx], rtol=1e-4)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = nn.Parameter(np.array([1.0, 2.0]))
    opt = nn.Adam([("p", p)], lr=0.1)
    p.grad = np.zeros(2, dtype=p.dtype)
    opt.step()
    np.testing.assert_allclose(p.data, [1.0, 2.0])


def test_adam_first_step_is_lr_sized():
    p = nn.Parameter(np.array([1.0]))
    opt = nn.Adam([("p", p)], lr=0.1)
    p.grad = np.ones(1, dtype=p.dtype)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9], atol=1e-6)


def test_adam_descends_quadratic():
    with ad.default_dtype(np.float64):
        w = nn.Parameter(np.array([1.0]))
        opt = nn.Adam([("w", w)], lr=0.1)
        prev = np.inf
        for _ in range(10):
            with tape_context(Tape()):
                loss = ad.sum_(ad.mul(w, w))
                val = loss.item()
                loss.backward()
            assert val < prev
            prev = val
            opt.step()
            opt.zero_grad()


def test_adam_rejects_nonfinite_gradient():
    p = nn.Parameter(np.array([1.0]))
    opt = nn.Adam([("spike", p)], lr=0.1)
    p.grad = np.array([np.nan], dtype=p.dtype)
    with pytest.raises(FloatingPointError, match="spike"):
        opt.step()


def test_no_grad_suppresses_recording():
    x = Tensor(rand(2, 2), requires_grad=True)
    with tape_context(Tape()) as tape:
        with ad.no_grad():
            y = ad.mul(x, x)
        assert len(tape) == 0
        assert y.node_index is None
