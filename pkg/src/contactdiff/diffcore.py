"""Small dense-network math: forward/backward for MLPs with Mish hidden units,
an Adam optimizer, and a binary weight checkpoint format.

Everything is float64 and operates on plain numpy arrays. Only fully
connected stacks are supported; that covers both the trajectory denoiser
and the one-step dynamics model.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

WEIGHTS_MAGIC = b"CDW1"


class ShapeError(ValueError):
    """Raised when array shapes disagree with a network or with each other."""


def as_array2(x, cols: int | None = None, name: str = "array") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array, optionally checking width."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {a.shape}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeError(f"{name}: expected {cols} columns, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains non-finite values")
    return a


# -- activation ---------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # split form avoids overflow for large |x|
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _tanh_softplus(x):
    # tanh(softplus(x)) = n(n+2) / (n(n+2) + 2) with n = e^x
    n = np.exp(np.minimum(x, 20.0))
    q = n * (n + 2.0)
    return q / (q + 2.0), n


def mish(x):
    return x * _tanh_softplus(x)[0]


def mish_grad(x):
    t, n = _tanh_softplus(x)
    return t + x * (1.0 - t * t) * (n / (1.0 + n))


# -- parameters ---------------------------------------------------------------

@dataclass
class MlpParams:
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "mish"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("parameter count does not match the size list")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k], self.sizes[k + 1]) or b.shape != (self.sizes[k + 1],):
                raise ShapeError(
                    f"layer {k}: weight {w.shape} / bias {b.shape} disagree with sizes "
                    f"{self.sizes[k]}->{self.sizes[k + 1]}"
                )

    @classmethod
    def init(cls, sizes, seed: int = 0, scale: float = 1.0) -> "MlpParams":
        """Random init, fan-in scaled; last layer shrunk so outputs start small."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for k in range(len(sizes) - 1):
            std = scale / np.sqrt(sizes[k])
            if k == len(sizes) - 2:
                std *= 0.1
            ws.append(rng.normal(0.0, std, size=(sizes[k], sizes[k + 1])))
            bs.append(np.zeros(sizes[k + 1]))
        return cls(list(sizes), ws, bs)

    @classmethod
    def zeros(cls, sizes) -> "MlpParams":
        return cls(
            list(sizes),
            [np.zeros((sizes[k], sizes[k + 1])) for k in range(len(sizes) - 1)],
            [np.zeros(sizes[k + 1]) for k in range(len(sizes) - 1)],
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams.zeros(self.sizes)

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.sizes), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# -- forward / backward -------------------------------------------------------

def _forward_cache(params: MlpParams, x: np.ndarray):
    pre = []
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if k < last:
            pre.append(z)
            h = mish(z)
        else:
            h = z
        acts.append(h)
    return h, pre, acts


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    x = as_array2(x, params.sizes[0], "input")
    out, _, _ = _forward_cache(params, x)
    return out


def mlp_backward(params: MlpParams, x, upstream) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(upstream * mlp_forward(params, x))``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` has the same layout
    as ``params``.
    """
    x = as_array2(x, params.sizes[0], "input")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != (x.shape[0], params.sizes[-1]):
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} != output shape "
            f"{(x.shape[0], params.sizes[-1])}"
        )
    _, pre, acts = _forward_cache(params, x)
    n = len(params.weights)
    gw = [None] * n
    gb = [None] * n
    delta = upstream
    for k in range(n - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        delta = delta @ params.weights[k].T
        if k > 0:
            delta = delta * mish_grad(pre[k - 1])
    return MlpParams(list(params.sizes), gw, gb, params.activation), delta


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 2e-4, **kw) -> "AdamState":
        arrs = params.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], lr=lr, **kw)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams) -> tuple[AdamState, MlpParams]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    p_arrs = params.arrays()
    g_arrs = grads.arrays()
    if len(p_arrs) != len(g_arrs) or len(p_arrs) != len(state.m):
        raise ShapeError("parameter, gradient and moment layouts differ")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_arrs, g_arrs, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch in Adam update: {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    nw, nb = new_p[0::2], new_p[1::2]
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return new_state, MlpParams(list(params.sizes), nw, nb, params.activation)


def adam_step_inplace(state: AdamState, params: MlpParams, grads: MlpParams) -> None:
    """Same update as :func:`adam_step` but mutating; used by training loops."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoint I/O -----------------------------------------------------------

class CheckpointError(ValueError):
    pass


def write_params(f: BinaryIO, params: MlpParams) -> None:
    f.write(WEIGHTS_MAGIC)
    f.write(struct.pack("<I", len(params.sizes)))
    f.write(struct.pack(f"<{len(params.sizes)}I", *params.sizes))
    for a in params.arrays():
        f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_params(f: BinaryIO) -> MlpParams:
    if _read_exact(f, 4) != WEIGHTS_MAGIC:
        raise CheckpointError("bad magic: not a weight checkpoint")
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    if n < 2 or n > 64:
        raise CheckpointError(f"implausible layer count {n}")
    sizes = list(struct.unpack(f"<{n}I", _read_exact(f, 4 * n)))
    ws, bs = [], []
    for k in range(n - 1):
        cnt = sizes[k] * sizes[k + 1]
        ws.append(np.frombuffer(_read_exact(f, 8 * cnt), dtype="<f8").reshape(sizes[k], sizes[k + 1]).astype(np.float64))
        bs.append(np.frombuffer(_read_exact(f, 8 * sizes[k + 1]), dtype="<f8").astype(np.float64))
    return MlpParams(sizes, ws, bs)


def save_params(path, params: MlpParams) -> None:
    with open(path, "wb") as f:
        write_params(f, params)


def load_params(path) -> MlpParams:
    with open(path, "rb") as f:
        return read_params(f)


# -- model containers ---------------------------------------------------------
# A model file is a JSON header followed by a weight block:
#   b"CDMH", u32 header length, UTF-8 JSON, then the CDW1 weight payload.

MODEL_MAGIC = b"CDMH"


def save_model(path, meta: dict, params: MlpParams) -> None:
    import json

    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        write_params(f, params)


def load_model(path) -> tuple[dict, MlpParams]:
    import json

    with open(path, "rb") as f:
        if _read_exact(f, 4) != MODEL_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, n).decode("utf-8"))
        params = read_params(f)
    return meta, params
