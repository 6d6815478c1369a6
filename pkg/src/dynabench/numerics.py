"""Dense MLP core: forward pass, reverse-mode gradients, Adam, seeded RNG.

Everything is float64 and pure: functions return new values, never mutate
their arguments. Batched inputs use the leading axis; a bare vector is
treated as a batch of one.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, StructuralError

ACTIVATIONS = ("relu", "elu", "swish")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}

PARAMS_MAGIC = b"DYNB"
PARAMS_VERSION = 1


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

class Rng:
    """Counter-based (Philox) random stream with labelled forking.

    ``fork(label)`` derives a child key by hashing (parent key, label), so a
    fork depends only on its address, never on how many draws happened on the
    parent. Identical seed + identical call sequence gives identical output
    on every platform.
    """

    def __init__(self, seed, _key=None):
        if _key is None:
            digest = hashlib.sha256(b"dynabench.rng:" + str(int(seed)).encode()).digest()
            _key = int.from_bytes(digest[:16], "little")
        self.key = _key
        self._gen = np.random.Generator(np.random.Philox(key=self.key))

    def fork(self, label: str) -> "Rng":
        digest = hashlib.sha256(self.key.to_bytes(16, "little") + label.encode()).digest()
        return Rng(0, _key=int.from_bytes(digest[:16], "little"))

    def gaussian(self, shape):
        """i.i.d. standard-normal draws; advances the stream."""
        return self._gen.standard_normal(shape)

    def uniform(self, low, high, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high):
        return int(self._gen.integers(low, high))

    def permutation(self, n: int):
        return self._gen.permutation(n)


def gaussian(rng: Rng, n: int):
    """n i.i.d. standard-normal draws from ``rng``."""
    if n < 1:
        raise StructuralError(f"gaussian: n must be >= 1, got {n}")
    return rng.gaussian(n)


# ---------------------------------------------------------------------------
# MLP parameters
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Dense MLP weights. Layer i maps fan_in -> fan_out via W x + b.

    ``activations[i]`` is the nonlinearity applied after hidden layer i; the
    final layer is linear.
    """

    weights: list  # list of (out, in) float64 arrays
    biases: list   # list of (out,) float64 arrays
    activations: tuple  # len == n_layers - 1, entries in ACTIVATIONS

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise StructuralError("weights and biases must pair up")
        if len(self.activations) != len(self.weights) - 1:
            raise StructuralError("need one activation tag per hidden layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise StructuralError(f"unknown activation {act!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise StructuralError(f"layer {i}: bad shapes {w.shape}, {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise StructuralError(f"layer {i}: fan-in {w.shape[1]} does not match "
                                      f"previous fan-out {self.weights[i - 1].shape[0]}")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        """Flat list [W0, b0, W1, b1, ...] referencing the stored arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activations)


def mlp_init(rng: Rng, sizes, activation="swish") -> MlpParams:
    """Glorot-uniform weights, zero biases. ``sizes`` = [in, h1, ..., out]."""
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.fork(f"w{i}").uniform(-bound, bound, (fan_out, fan_in))
        weights.append(np.asarray(w, dtype=np.float64))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, tuple([activation] * (len(sizes) - 2)))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(tag, z):
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    # swish(z) = z * sigmoid(z)
    return z * _sigmoid(z)


def _activate_grad(tag, z):
    if tag == "relu":
        return (z > 0).astype(np.float64)
    if tag == "elu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def mlp_forward(params: MlpParams, x):
    """Forward pass keeping the cache needed by ``mlp_backward``.

    x: (..., in_dim). Returns (y, cache) with y: (..., out_dim).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x.reshape(-1, x.shape[-1]) if not squeeze else x.reshape(1, -1)
    if h.shape[-1] != params.in_dim:
        raise StructuralError(f"input dim {h.shape[-1]} != fan-in {params.in_dim}")
    inputs = [h]   # post-activation input to each layer
    pre = []       # pre-activation of each hidden layer
    n = len(params.weights)
    for i in range(n):
        z = h @ params.weights[i].T + params.biases[i]
        if i < n - 1:
            pre.append(z)
            h = _activate(params.activations[i], z)
            inputs.append(h)
        else:
            h = z
    y = h.reshape(x.shape[:-1] + (params.out_dim,)) if not squeeze else h[0]
    return y, (inputs, pre, x.shape, squeeze)


def mlp_apply(params: MlpParams, x):
    """Pure forward pass; x: (..., in_dim) -> (..., out_dim)."""
    return mlp_forward(params, x)[0]


def mlp_backward(params: MlpParams, cache, dy):
    """Reverse-mode pass for a previous ``mlp_forward``.

    dy: upstream gradient with the same shape as the forward output. Returns
    (param_grads, dx); param_grads is MlpParams-shaped, summed over the batch.
    """
    inputs, pre, x_shape, squeeze = cache
    dy = np.asarray(dy, dtype=np.float64)
    dz = dy.reshape(1, -1) if squeeze else dy.reshape(-1, dy.shape[-1])
    n = len(params.weights)
    d_weights = [None] * n
    d_biases = [None] * n
    for i in range(n - 1, -1, -1):
        d_weights[i] = dz.T @ inputs[i]
        d_biases[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ params.weights[i]
            dz = da * _activate_grad(params.activations[i - 1], pre[i - 1])
    dx = dz @ params.weights[0]
    dx = dx[0] if squeeze else dx.reshape(x_shape)
    grads = MlpParams(d_weights, d_biases, params.activations)
    return grads, dx


def mlp_grad(params: MlpParams, x, upstream):
    """Gradients of <upstream, mlp_apply(params, x)> w.r.t. params and x."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise NumericError("mlp_grad: non-finite upstream gradient")
    y, cache = mlp_forward(params, x)
    if upstream.shape != np.shape(y):
        raise StructuralError(f"upstream shape {upstream.shape} != output {np.shape(y)}")
    return mlp_backward(params, cache, upstream)


def zero_grads_like(params: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases], params.activations)


def grads_scale(grads: MlpParams, factor: float) -> MlpParams:
    return MlpParams([w * factor for w in grads.weights],
                     [b * factor for b in grads.biases], grads.activations)


def grads_add(a: MlpParams, b: MlpParams) -> MlpParams:
    return MlpParams([x + y for x, y in zip(a.weights, b.weights)],
                     [x + y for x, y in zip(a.biases, b.biases)], a.activations)


def grads_global_norm(grads: MlpParams) -> float:
    total = 0.0
    for arr in grads.arrays():
        total += float(np.sum(arr * arr))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators, aligned with params.arrays()."""

    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    arrays = params.arrays()
    return AdamState([np.zeros_like(a) for a in arrays],
                     [np.zeros_like(a) for a in arrays],
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_update(state: AdamState, params: MlpParams, grads: MlpParams):
    """One bias-corrected Adam step. Returns (new_params, new_state)."""
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if len(p_arrays) != len(g_arrays):
        raise StructuralError("param/grad layout mismatch")
    for p, g in zip(p_arrays, g_arrays):
        if p.shape != g.shape:
            raise StructuralError(f"grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("adam_update: non-finite gradient")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - step)
    n_layers = len(params.weights)
    new_params = MlpParams(new_p[0:2 * n_layers:2], new_p[1:2 * n_layers:2],
                           params.activations)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return new_params, new_state


# ---------------------------------------------------------------------------
# Serialization ("DYNB" blob)
# ---------------------------------------------------------------------------

def params_to_bytes(params: MlpParams) -> bytes:
    out = [PARAMS_MAGIC, struct.pack("<I", PARAMS_VERSION),
           struct.pack("<I", len(params.weights))]
    for w in params.weights:
        out.append(struct.pack("<II", w.shape[0], w.shape[1]))
    for act in params.activations:
        out.append(struct.pack("<B", _ACT_CODE[act]))
    for w, b in zip(params.weights, params.biases):
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(blob: bytes) -> MlpParams:
    view = memoryview(blob)
    if bytes(view[:4]) != PARAMS_MAGIC:
        raise FormatError("bad magic, expected DYNB")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != PARAMS_VERSION:
        raise FormatError(f"unsupported DYNB version {version}")
    (n_layers,) = struct.unpack_from("<I", view, 8)
    if n_layers < 1:
        raise FormatError("DYNB blob with no layers")
    off = 12
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", view, off))
        off += 8
    acts = []
    for _ in range(n_layers - 1):
        (code,) = struct.unpack_from("<B", view, off)
        off += 1
        if code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {code}")
        acts.append(ACTIVATIONS[code])
    weights, biases = [], []
    for out_dim, in_dim in dims:
        need = (out_dim * in_dim + out_dim) * 8
        if off + need > len(blob):
            raise FormatError("truncated DYNB payload")
        w = np.frombuffer(view, dtype="<f8", count=out_dim * in_dim, offset=off)
        off += out_dim * in_dim * 8
        b = np.frombuffer(view, dtype="<f8", count=out_dim, offset=off)
        off += out_dim * 8
        weights.append(w.reshape(out_dim, in_dim).astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(blob):
        raise FormatError("trailing bytes after DYNB payload")
    return MlpParams(weights, biases, tuple(acts))
