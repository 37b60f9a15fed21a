import numpy as np
import pytest

from attnchroma import model as M
from attnchroma import train as T
from attnchroma.data import PatchSample
from attnchroma.errors import FormatError, NonFiniteError, ShapeError


def _samples(count, n=4, seed=0):
    rng = np.random.default_rng(seed)
    f = lambda *s: rng.random(s).astype(np.float32)
    return [PatchSample(f(n, n), f(3, 2 * n + 1), f(n, n), f(n, n), 0, 0, k) for k in range(count)]


@pytest.fixture
def weights():
    return M.init_weights(M.BlockSizeConfig.preset(4), 0)


# -- loss


def test_mse_hand_values():
    z = np.zeros((2, 4, 4))
    assert T.mse_loss(z, np.zeros((4, 4)), np.zeros((4, 4))) == 0
    assert T.mse_loss(z, np.full((4, 4), 0.1), np.full((4, 4), 0.1)) == pytest.approx(0.01)
    with pytest.raises(ShapeError):
        T.mse_loss(z, np.zeros((3, 3)), np.zeros((3, 3)))


def test_mse_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    pred, target = rng.random((3, 2, 4, 4)), rng.random((3, 2, 4, 4))
    g = T.mse_grad(pred, target)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (2, 1, 3, 2), (1, 0, 2, 1)]:
        p, m = pred.copy(), pred.copy()
        p[idx] += eps
        m[idx] -= eps
        fd = (T.mse_loss(p, target) - T.mse_loss(m, target)) / (2 * eps)
        assert g[idx] == pytest.approx(fd, rel=1e-6)


# -- Adam


def test_adam_first_step_hand_value():
    cfg = M.BlockSizeConfig(n=4, boundary_dims=(2,), luma_dims=(2,), attn_out_dim=2, head_dim=2, head_conv=False)
    w = M.ModelWeights(cfg, {k: np.zeros(s) for k, s in cfg.param_shapes().items()})
    state = T.AdamState.zeros_like(w)
    T.adam_step(w, {k: np.ones_like(p) for k, p in w.params.items()}, state, T.TrainConfig(lr=1e-4))
    assert state.t == 1
    for p in w.params.values():
        np.testing.assert_allclose(p, -1e-4, atol=1e-10)


def test_adam_zero_gradient_is_noop(weights):
    before = weights.copy()
    state = T.AdamState.zeros_like(weights)
    T.adam_step(weights, {k: np.zeros_like(p) for k, p in weights.params.items()}, state, T.TrainConfig())
    for k in weights.params:
        assert np.array_equal(weights.params[k], before.params[k])


def test_adam_rejects_non_finite(weights):
    grads = {k: np.zeros_like(p) for k, p in weights.params.items()}
    grads["attn.w_f"][0, 0] = np.nan
    state = T.AdamState.zeros_like(weights)
    with pytest.raises(NonFiniteError, match="attn.w_f"):
        T.adam_step(weights, grads, state, T.TrainConfig())
    assert state.t == 0


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        T.TrainConfig(batch_size=0)


# -- batching and splits


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([T.batch_indices(10, 5, 0, s) for s in range(2)])
    assert sorted(seen.tolist()) == list(range(10))
    assert np.array_equal(T.batch_indices(10, 5, 0, 7), T.batch_indices(10, 5, 0, 7))


def test_batch_indices_wraps_small_sets():
    idx = T.batch_indices(3, 8, 0, 0)
    assert len(idx) == 8 and set(idx.tolist()) == {0, 1, 2}


def test_split_disjoint_and_complete():
    s = _samples(50)
    tr, va = T.split_train_val(s, 0.1, 0)
    assert len(va) == 5 and len(tr) == 45
    ids = lambda xs: {x.x for x in xs}
    assert not ids(tr) & ids(va) and ids(tr) | ids(va) == set(range(50))


# -- training loop


def test_train_rejects_empty(weights):
    with pytest.raises(ValueError, match="empty"):
        T.train(weights, [], T.TrainConfig(max_steps=1))


def test_train_rejects_block_size_mismatch(weights):
    with pytest.raises(ShapeError):
        T.train(weights, _samples(4, n=8), T.TrainConfig(max_steps=1), val_samples=_samples(2, n=8))


def test_train_deterministic(weights):
    s, v = _samples(40), _samples(8, seed=1)
    cfg = T.TrainConfig(max_steps=30, batch_size=8, val_interval=10)
    a, b = T.train(weights, s, cfg, v), T.train(weights, s, cfg, v)
    for k in weights.params:
        assert a.weights.params[k].tobytes() == b.weights.params[k].tobytes()
    assert a.curve == b.curve and len(a.curve) == 3


def test_train_does_not_mutate_input(weights):
    before = weights.copy()
    T.train(weights, _samples(16), T.TrainConfig(max_steps=3, batch_size=4), _samples(4, seed=1))
    assert all(np.array_equal(before.params[k], weights.params[k]) for k in weights.params)


def test_resume_is_bitwise(weights, tmp_path):
    s, v = _samples(40), _samples(8, seed=1)
    cfg = lambda steps: T.TrainConfig(max_steps=steps, batch_size=8, val_interval=5)
    full = T.train(weights, s, cfg(20), v)
    T.train(weights, s, cfg(10), v, checkpoint=tmp_path / "c.bin")
    w, state = T.load_checkpoint(tmp_path / "c.bin.last")
    assert state.t == 10
    resumed = T.train(w, s, cfg(20), v, state=state)
    for k in weights.params:
        assert full.weights.params[k].tobytes() == resumed.weights.params[k].tobytes()
        assert full.state.m[k].tobytes() == resumed.state.m[k].tobytes()


def test_best_checkpoint_and_curve(weights, tmp_path):
    r = T.train(
        weights, _samples(32), T.TrainConfig(max_steps=20, batch_size=8, val_interval=5), _samples(8, seed=1),
        checkpoint=tmp_path / "c.bin", curve_csv=tmp_path / "c.csv",
    )
    w, state = T.load_checkpoint(tmp_path / "c.bin")
    assert state.t == r.best_state.t
    assert r.best_val == min(c[2] for c in r.curve)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "step,train_mse,val_mse" and len(rows) == 5
    # a checkpoint is also a plain weight file
    assert M.load_weights(tmp_path / "c.bin").count() == w.count()


def test_loss_non_increasing_over_windows(weights):
    s = _samples(8)
    r = T.train(weights, s, T.TrainConfig(max_steps=1500, batch_size=8, val_interval=500), s)
    means = [c[1] for c in r.curve]
    assert means[0] >= means[1] >= means[2]


def test_checkpoint_bad_appendix(weights, tmp_path):
    p = tmp_path / "c.bin"
    T.save_checkpoint(p, weights, T.AdamState.zeros_like(weights))
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        T.load_checkpoint(p)
    M.save_weights(weights, p)
    assert T.load_checkpoint(p)[1] is None
