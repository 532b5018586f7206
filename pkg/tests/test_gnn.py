import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lunardtn.errors import FormatError, ShapeError
from lunardtn.gnn import (PARAM_ORDER, Dims, PaddedGraph, Params, attention, backward,
                          forward, forward_batch, load_checkpoint, save_checkpoint, stack_graphs)

SMALL = Dims(embed=6, heads=2, head_dim=3, out_dim=6, hidden=4, n_max=6, dropout=0.0)


def random_graph(rng, n_used, n_max, star=False, garbage=False):
    x = rng.uniform(0, 10, (n_max, 7))
    if not garbage:
        x[n_used:] = 0
    valid = np.zeros(n_max, dtype=bool)
    valid[:n_used] = True
    if star:
        adj = np.zeros((n_max, n_max), dtype=bool)
        adj[0, :n_used] = adj[:n_used, 0] = True
    else:
        adj = rng.random((n_max, n_max)) < 0.5
        adj |= adj.T
    adj[np.arange(n_max), np.arange(n_max)] = True
    if not garbage:
        adj &= valid[:, None] & valid[None, :]
    return PaddedGraph(x, adj, valid)


def test_default_architecture_size():
    p = Params.init(Dims(), seed=0)
    assert p.n_params == 69_889
    assert p["gat1_W"].shape == (64, 512) and p["gat2_W"].shape == (512, 64)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    params = Params.init(Dims(), seed=1)
    for _ in range(10):
        g = random_graph(rng, int(rng.integers(1, 12)), 32)
        a1, a2 = attention(params, g)
        n = a2.shape[0]
        v = g.valid[:n]
        assert np.allclose(a1.sum(-1)[:, v], 1.0, atol=1e-6)
        assert np.allclose(a2.sum(-1)[v], 1.0, atol=1e-6)
        assert np.all(a2[~v] == 0) and np.all(a2[:, ~v] == 0)


def _loss(params, x, adj, valid, w):
    q, _ = forward_batch(params, x, adj, valid)
    return np.sum(np.where(valid, q, 0) * w)


def gradient_check(case):
    """Worst relative error between float64 analytic gradients and central differences.

    The differences are taken in extended precision so their own rounding
    noise sits well below the tolerance. Entries whose derivative is below
    that noise (exact zeros, e.g. softmax shift invariance) are checked
    against the noise bound instead.
    """
    rng = np.random.default_rng(case)
    params = Params.init(SMALL, seed=case, dtype=np.float64)
    for k in params:  # non-zero biases exercise every path
        params[k] = params[k] + rng.normal(0, 0.1, params[k].shape)
    graphs = [random_graph(rng, int(rng.integers(1, 6)), 6) for _ in range(2)]
    x, adj, valid = stack_graphs(graphs)
    w = rng.normal(size=valid.shape)
    q, cache = forward_batch(params, x, adj, valid)
    grad = backward(params, cache, w)
    hi = params.astype(np.longdouble)
    xl, wl = x.astype(np.longdouble), w.astype(np.longdouble)
    eps = np.longdouble(1e-6)
    unit = float(np.finfo(np.longdouble).eps)
    worst = 0.0
    for name in PARAM_ORDER:
        flat = hi[name].reshape(-1)
        for idx in rng.choice(flat.size, size=min(flat.size, 6), replace=False):
            old = flat[idx]
            flat[idx] = old + eps
            up = _loss(hi, xl, adj, valid, wl)
            flat[idx] = old - eps
            down = _loss(hi, xl, adj, valid, wl)
            flat[idx] = old
            num = float((up - down) / (2 * eps))
            ana = float(grad[name].reshape(-1)[idx])
            noise = 64 * unit * float(abs(up) + abs(down) + 1) / (2 * float(eps))
            if max(abs(num), abs(ana)) <= 100 * noise:
                assert abs(num - ana) <= 100 * noise
                continue
            worst = max(worst, abs(num - ana) / (abs(num) + abs(ana)))
    return worst


@pytest.mark.parametrize("case", range(20))
def test_gradients_match_central_differences(case):
    assert gradient_check(case) < 1e-4


def test_padding_rows_do_not_change_valid_outputs():
    rng = np.random.default_rng(3)
    params = Params.init(Dims(), seed=2, dtype=np.float64)
    for _ in range(5):
        n = int(rng.integers(1, 9))
        clean = random_graph(rng, n, 32, star=True)
        dirty = PaddedGraph(clean.features.copy(), clean.adjacency.copy(), clean.valid.copy())
        dirty.features[n:] = rng.uniform(-50, 50, (32 - n, 7))
        dirty.adjacency[n:, :] = True
        dirty.adjacency[:, n:] = True
        qa, _ = forward(params, clean)
        qb, _ = forward(params, dirty)
        assert np.array_equal(qa[:n], qb[:n])
        assert np.all(np.isneginf(qb[n:]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 10))
def test_permutation_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    params = Params.init(Dims(), seed=seed % 7, dtype=np.float64)
    g = random_graph(rng, n, n)
    perm = rng.permutation(n)
    x, adj, valid = g.features[None], g.adjacency[None], g.valid[None]
    q, _ = forward_batch(params, x, adj, valid)
    qp, _ = forward_batch(params, x[:, perm], adj[:, perm][:, :, perm], valid[:, perm])
    # equal up to floating-point reassociation of neighbour sums
    assert np.allclose(qp[0], q[0, perm], rtol=0, atol=1e-12)


def test_isolated_node_has_single_action():
    params = Params.init(Dims(), seed=0)
    g = random_graph(np.random.default_rng(0), 1, 32, star=True)
    q, valid = forward(params, g)
    assert valid.sum() == 1 and np.isfinite(q[0]) and np.all(np.isneginf(q[1:]))


def test_shape_errors():
    params = Params.init(Dims(), seed=0)
    bad = PaddedGraph(np.zeros((33, 7)), np.eye(33, dtype=bool), np.ones(33, dtype=bool))
    with pytest.raises(ShapeError):
        forward(params, bad)
    with pytest.raises(ShapeError):
        forward_batch(params, np.zeros((1, 3, 6)), np.ones((1, 3, 3), bool), np.ones((1, 3), bool))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = Params.init(Dims(), seed=9)
    path = tmp_path / "m.ckpt"
    size = save_checkpoint(params, path)
    assert 100_000 <= size <= 400_000 and path.stat().st_size == size
    back = load_checkpoint(path, expect=Dims())
    for k in PARAM_ORDER:
        assert back[k].tobytes() == params[k].tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("damage", ["magic", "truncate", "nan", "empty", "dims"])
def test_corrupt_checkpoints_rejected(tmp_path, damage):
    params = Params.init(SMALL, seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    data = bytearray(path.read_bytes())
    expect = None
    if damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "truncate":
        data = data[:-3]
    elif damage == "nan":
        data[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    elif damage == "empty":
        data = bytearray()
    else:
        expect = Dims()
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_checkpoint(path, expect=expect)
