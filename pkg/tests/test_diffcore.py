import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from contactdiff import diffcore as dc

from conftest import fd_grad, rel_err


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_softplus_and_sigmoid_are_stable(xs):
    x = np.array(xs)
    sp = dc.softplus(x)
    sg = dc.sigmoid(x)
    assert np.all(np.isfinite(sp)) and np.all(sp >= 0)
    assert np.all((sg >= 0) & (sg <= 1))
    assert np.allclose(sp, np.log1p(np.exp(x)))


def test_mish_grad_matches_finite_differences():
    x = np.linspace(-6, 6, 41)
    num = (dc.mish(x + 1e-6) - dc.mish(x - 1e-6)) / 2e-6
    assert np.allclose(dc.mish_grad(x), num, atol=1e-8)


@given(sizes=st.lists(st.integers(1, 6), min_size=2, max_size=4), seed=st.integers(0, 1000))
def test_mlp_backward_matches_finite_differences(sizes, seed):
    rng = np.random.default_rng(seed)
    p = dc.MlpParams.init(sizes, seed=seed, scale=2.0)
    x = rng.standard_normal((3, sizes[0]))
    up = rng.standard_normal((3, sizes[-1]))
    grads, gx = dc.mlp_backward(p, x, up)

    def loss_x(z):
        return float(np.sum(up * dc.mlp_forward(p, z)))
    assert rel_err(gx, fd_grad(loss_x, x.copy())) < 1e-6
    for k, w in enumerate(p.weights):
        def loss_w(wk, k=k):
            q = p.copy()
            q.weights[k] = wk
            return float(np.sum(up * dc.mlp_forward(q, x)))
        assert rel_err(grads.weights[k], fd_grad(loss_w, w.copy())) < 1e-5


def test_shape_errors():
    p = dc.MlpParams.init([3, 4, 2])
    with pytest.raises(dc.ShapeError):
        dc.mlp_forward(p, np.zeros((2, 5)))
    with pytest.raises(dc.ShapeError):
        dc.mlp_backward(p, np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(dc.ShapeError):
        dc.MlpParams([3, 2], [np.zeros((2, 3))], [np.zeros(2)])
    with pytest.raises(dc.ShapeError):
        dc.as_array2(np.zeros((2, 2, 2)))


def test_adam_variants_agree_and_descend():
    p = dc.MlpParams.init([2, 8, 1], seed=0)
    x = np.random.default_rng(0).standard_normal((32, 2))
    y = (x[:, :1] - x[:, 1:]) ** 2
    s1 = dc.AdamState.for_params(p, lr=1e-2)
    s2 = dc.AdamState.for_params(p, lr=1e-2)
    p1, p2 = p.copy(), p.copy()
    first = None
    for _ in range(200):
        err = dc.mlp_forward(p1, x) - y
        loss = float(np.mean(err ** 2))
        first = loss if first is None else first
        g, _ = dc.mlp_backward(p1, x, 2 * err / err.size)
        s1, p1 = dc.adam_step(s1, p1, g)
        g2, _ = dc.mlp_backward(p2, x, 2 * (dc.mlp_forward(p2, x) - y) / err.size)
        dc.adam_step_inplace(s2, p2, g2)
    assert all(np.allclose(a, b) for a, b in zip(p1.arrays(), p2.arrays()))
    assert loss < 0.5 * first


def test_params_round_trip_and_corruption(tmp_path):
    p = dc.MlpParams.init([3, 5, 2], seed=4)
    path = tmp_path / "w.bin"
    dc.save_params(path, p)
    q = dc.load_params(path)
    assert q.sizes == p.sizes
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(dc.CheckpointError):
        dc.load_params(tmp_path / "bad.bin")
    with pytest.raises(dc.CheckpointError):
        dc.read_params(io.BytesIO(raw[:-3]))


def test_model_file_keeps_metadata(tmp_path):
    p = dc.MlpParams.init([2, 2])
    dc.save_model(tmp_path / "m.cdm", {"kind": "x", "n": 3}, p)
    meta, q = dc.load_model(tmp_path / "m.cdm")
    assert meta == {"kind": "x", "n": 3}
    assert q.sizes == [2, 2]
