import math

import numpy as np
import pytest
from primitives import CASES, check_case

from pulsefuse.errors import BadMagic, ConfigMismatch, MissingGrad, NonFiniteValue, NotScalarLoss, ShapeMismatch, \
    TruncatedFile
from pulsefuse.nn import tensor as T
from pulsefuse.nn.gradcheck import grad_check
from pulsefuse.nn.optim import Adam, OneCycle
from pulsefuse.nn.params import ParamStore, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint

HEAVY = {"conv3d_same", "conv3d_valid", "conv3d_stride2", "conv3d_1x3x3", "selective_scan", "maxpool_spatial"}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    seeds = range(10) if name in HEAVY else range(50)
    for seed in seeds:
        rep = check_case(name, seed)
        assert rep.passed, f"{name} seed {seed}: {rep.max_err:.3e}"


def test_corrupted_backward_is_caught(monkeypatch):
    """Negative control: a 1% error in one backward rule must fail the check."""
    real = T.silu

    def bad_silu(a):
        out = real(a)
        orig = out._backward
        out._backward = lambda g: tuple(1.01 * x for x in orig(g))
        return out

    monkeypatch.setattr(T, "silu", bad_silu)
    x = T.param(np.random.default_rng(0).normal(size=5) + 3.0)
    rep = grad_check(lambda: T.sum_(T.silu(x)), [x])
    assert not rep.passed and rep.max_err > 1e-3


def _near_tie_pool_input():
    """A 2x2 pool map whose first window holds a near tie 1e-9 apart; the other entries are well separated."""
    x = np.arange(16.0).reshape(1, 1, 4, 4, 1) * 0.1
    x[0, 0, 1, 1, 0] = x[0, 0, 0, 0, 0] = 5.0
    x[0, 0, 0, 1, 0] = 5.0 - 1e-9
    return T.param(x)


def test_gradcheck_flags_max_pool_kinks():
    x = _near_tie_pool_input()
    f = lambda: T.sum_(T.maxpool_spatial(x) * np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2, 1))  # noqa: E731
    plain = grad_check(f, [x], eps=1e-5)
    assert not plain.passed and plain.n_kinks == 0
    # exhaustive: nothing to swap in, so the straddling coordinates stay and are counted
    kept = grad_check(f, [x], eps=1e-5, skip_kinks=True)
    assert not kept.passed and kept.n_kink_kept >= 1
    sampled = grad_check(f, [x], eps=1e-5, coords_per_param=6, skip_kinks=True, seed=1)
    assert sampled.n_coords == 6 and sampled.n_shrunk >= 2 and sampled.n_kinks >= 1 and sampled.n_kink_kept == 0
    assert sampled.passed, sampled.per_param


def test_gradcheck_kink_skipping_keeps_wrong_gradients_visible(monkeypatch):
    real = T.maxpool_spatial

    def bad_pool(a):
        out = real(a)
        orig = out._backward
        out._backward = lambda g: tuple(1.01 * v for v in orig(g))
        return out

    monkeypatch.setattr(T, "maxpool_spatial", bad_pool)
    x = T.param(np.random.default_rng(0).normal(size=(1, 2, 4, 4, 2)))
    rep = grad_check(lambda: T.sum_(T.maxpool_spatial(x)), [x], coords_per_param=8, skip_kinks=True)
    assert not rep.passed and rep.max_err > 1e-3


def test_forward_values():
    x = np.array([-2.0, 0.0, 3.0])
    assert np.allclose(T.silu(x).data, x / (1 + np.exp(-x)))
    assert np.allclose(T.softplus(x).data, np.log1p(np.exp(x)))
    assert np.allclose(T.softplus(T.softplus_inverse(np.array([1e-3, 0.5, 4.0]))).data, [1e-3, 0.5, 4.0])
    assert np.allclose(np.exp(T.log_softmax(x).data).sum(), 1.0)
    ln = T.layer_norm(np.array([[1.0, 2.0, 3.0, 4.0]])).data
    assert abs(ln.mean()) < 1e-12 and ln.std() == pytest.approx(1.0, abs=1e-5)


def test_conv3d_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 4, 5, 5, 2))
    w = rng.normal(size=(3, 3, 3, 2, 1))
    out = T.conv3d(x, w, padding="valid").data
    ref = np.zeros((1, 2, 3, 3, 1))
    for t in range(2):
        for i in range(3):
            for j in range(3):
                ref[0, t, i, j, 0] = np.sum(x[0, t : t + 3, i : i + 3, j : j + 3, :] * w[..., 0])
    assert np.allclose(out, ref, atol=1e-12)
    assert T.conv3d(x, w, stride=2).shape == (1, 2, 3, 3, 1)
    with pytest.raises(ShapeMismatch):
        T.conv3d(x, rng.normal(size=(3, 3, 3, 3, 1)))


def test_pools():
    x = np.arange(16.0).reshape(1, 1, 4, 4, 1)
    assert np.array_equal(T.maxpool_spatial(x).data[0, 0, :, :, 0], [[5, 7], [13, 15]])
    assert T.adaptive_avgpool_spatial(x).data.item() == pytest.approx(7.5)


def test_dropout_determinism_and_scale():
    a = T.dropout_mask((1000,), 0.25, (1, 2, 3))
    assert np.array_equal(a, T.dropout_mask((1000,), 0.25, (1, 2, 3)))
    assert not np.array_equal(a, T.dropout_mask((1000,), 0.25, (1, 2, 4)))
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.75}
    assert 0.2 < (a == 0).mean() < 0.3
    x = T.Tensor(np.ones(4))
    assert T.dropout(x, 0.5, train=False) is x


def test_detach_blocks_gradient():
    a = T.param(np.array([1.0, 2.0]))
    b = T.param(np.array([3.0, 4.0]))
    loss = T.sum_(a * b.detach() + b)
    T.backward(loss)
    assert np.array_equal(a.grad, [3.0, 4.0])
    assert np.array_equal(b.grad, [1.0, 1.0])


def test_shared_subgraph_accumulates():
    a = T.param(np.array([2.0]))
    y = a * a
    T.backward(T.sum_(y + y * 3.0))
    assert a.grad.item() == pytest.approx(16.0)


def test_ndarray_on_left_defers_to_tensor():
    a = T.param(np.ones(3))
    out = np.array([1.0, 2.0, 3.0]) - a
    assert isinstance(out, T.Tensor)
    T.backward(T.sum_(out))
    assert np.array_equal(a.grad, -np.ones(3))


def test_errors():
    a = T.param(np.ones(3))
    with pytest.raises(NotScalarLoss):
        T.backward(a * 2.0)
    with pytest.raises(NonFiniteValue), np.errstate(invalid="ignore"):
        T.log(T.Tensor(np.array([-1.0])))
    with pytest.raises(ShapeMismatch):
        T.add(np.ones(3), np.ones(4))


def test_long_chain_is_iterative():
    x = T.param(np.array([1.0]))
    y = x
    for _ in range(5000):
        y = y + 1.0
    T.backward(T.sum_(y))
    assert x.grad.item() == 1.0


# ---------------------------------------------------------------------------
# optimiser


def test_adam_matches_hand_update():
    store = ParamStore()
    p = store.add("w", [1.0, -2.0])
    opt = Adam(store)
    m = v = np.zeros(2)
    ref = p.data.copy()
    for t in range(1, 4):
        g = np.array([0.5, -1.5]) * t
        p.grad = g.copy()
        opt.step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(p.data, ref, rtol=0, atol=1e-15)


def test_adam_missing_grad():
    store = ParamStore()
    store.add("w", [1.0]).grad = None
    with pytest.raises(MissingGrad):
        Adam(store).step(0.1)


def test_one_cycle_shape():
    s = OneCycle(1e-3, 101)
    assert s(0) == pytest.approx(1e-3 / 25)
    assert s(30) == pytest.approx(1e-3)
    assert s(100) == pytest.approx(1e-3 / 25)
    lrs = [s(i) for i in range(101)]
    assert np.all(np.diff(lrs[:31]) > 0) and np.all(np.diff(lrs[30:]) < 0)
    mid = 30 + 35
    assert s(mid) == pytest.approx(1e-3 / 25 + (1e-3 - 1e-3 / 25) * 0.5 * (1 + math.cos(math.pi / 2)))


# ---------------------------------------------------------------------------
# checkpoints


def _store(seed=0):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("a.w", rng.normal(size=(3, 4)))
    s.add("b", rng.normal(size=(5,)))
    s.add("scalar", 1.5)
    return s


def test_checkpoint_round_trip(tmp_path):
    s = _store()
    save_checkpoint(tmp_path / "m.ckpt", s, "model.channels = 8\n")
    text, state = load_checkpoint(tmp_path / "m.ckpt")
    assert text == "model.channels = 8\n"
    assert list(state) == ["a.w", "b", "scalar"]
    for k, t in s.items():
        assert np.array_equal(state[k], t.data) and state[k].shape == t.shape
    other = _store(seed=1)
    other.load_state(state)
    for k in s:
        assert np.array_equal(other[k].data, s[k].data)


def test_checkpoint_errors():
    blob = encode_checkpoint(_store().state())
    with pytest.raises(BadMagic):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedFile):
        decode_checkpoint(blob[:-3])
    s = ParamStore()
    s.add("a.w", np.zeros((3, 4)))
    with pytest.raises(ConfigMismatch):
        s.load_state(decode_checkpoint(blob)[1])
    s2 = _store()
    bad = dict(decode_checkpoint(blob)[1], b=np.zeros(6))
    with pytest.raises(ConfigMismatch):
        s2.load_state(bad)


def test_param_store_duplicates_and_count():
    s = _store()
    assert s.count() == 12 + 5 + 1
    with pytest.raises(ValueError):
        s.add("b", [0.0])
