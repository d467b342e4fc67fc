"""Dense feed-forward networks with hand-written reverse mode and Adam.

Weights are stored as ``(out, in)`` matrices so a layer computes
``h @ W.T + b``. Hidden layers use SiLU (``x * sigmoid(x)``), the output
layer is linear. SiLU is smooth everywhere, which keeps finite-difference
gradient checks free of kink artefacts, and it passes large positive inputs
through almost linearly, which the retrieval network relies on to reproduce
raw coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("silu", "tanh")
DEFAULT_ACTIVATION = "silu"

_MAGIC = b"CFNMLP01"


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpParams:
    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = DEFAULT_ACTIVATION

    def __post_init__(self):
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of weight/bias arrays does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expected:
                raise ShapeError(f"weights[{i}] has shape {w.shape}, expected {expected}")
            if b.shape != (self.layer_dims[i + 1],):
                raise ShapeError(f"biases[{i}] has shape {b.shape}, expected ({self.layer_dims[i + 1]},)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return replace(self, weights=tuple(arrays[0::2]), biases=tuple(arrays[1::2]))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True)
class GradientSet:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "GradientSet":
        return cls(weights=tuple(arrays[0::2]), biases=tuple(arrays[1::2]))

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "GradientSet":
        return cls.from_arrays([np.zeros_like(a) for a in params.arrays()])

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet.from_arrays([a + b for a, b in zip(self.arrays(), other.arrays())])

    def scale(self, c: float) -> "GradientSet":
        return GradientSet.from_arrays([c * a for a in self.arrays()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True)
class AdamState:
    first_moment: GradientSet
    second_moment: GradientSet
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8


def mlp_init(
    layer_dims: Sequence[int],
    seed: int | np.random.Generator,
    activation: str = DEFAULT_ACTIVATION,
    dtype=np.float64,
) -> MlpParams:
    """Fan-in scaled normal weights (std ``1/sqrt(fan_in)``), zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(d < 1 for d in dims):
        raise ValueError(f"layer sizes must be positive, got {list(dims)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append((rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(dims, tuple(weights), tuple(biases), activation)


def mlp_zeros(layer_dims: Sequence[int], activation: str = DEFAULT_ACTIVATION, dtype=np.float64) -> MlpParams:
    dims = tuple(int(d) for d in layer_dims)
    return MlpParams(
        dims,
        tuple(np.zeros((o, i), dtype=dtype) for i, o in zip(dims[:-1], dims[1:])),
        tuple(np.zeros(o, dtype=dtype) for o in dims[1:]),
        activation,
    )


def _act(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation value and the quantity its derivative is built from."""
    if name == "silu":
        # in-place ops: allocating fresh temporaries here is several times slower
        sig = np.negative(z)
        np.exp(sig, out=sig)
        sig += 1.0
        np.reciprocal(sig, out=sig)
        return z * sig, sig
    a = np.tanh(z)
    return a, a


def _act_grad(name: str, z: np.ndarray, aux: np.ndarray) -> np.ndarray:
    if name == "silu":
        g = 1.0 - aux
        g *= z
        g += 1.0
        g *= aux
        return g
    return 1.0 - aux * aux


def _check_inputs(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=params.dtype)
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ShapeError(f"expected inputs of shape (B, {params.layer_dims[0]}), got {x.shape}")
    return x


def forward_with_cache(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, list]:
    x = _check_inputs(params, inputs)
    cache = []
    h = x
    last = params.n_layers - 1
    with np.errstate(over="ignore"):
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            z = h @ w.T
            z += b
            if i < last:
                a, aux = _act(params.activation, z)
                cache.append((h, z, aux))
                h = a
            else:
                cache.append((h, z, None))
                h = z
    return h, cache


def mlp_forward_batch(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    return forward_with_cache(params, inputs)[0]


def backward_from_cache(params: MlpParams, cache: list, upstream_grad: np.ndarray) -> GradientSet:
    g = np.asarray(upstream_grad, dtype=params.dtype)
    out_dim = params.layer_dims[-1]
    batch = cache[0][0].shape[0]
    if g.shape != (batch, out_dim):
        raise ShapeError(f"upstream_grad has shape {g.shape}, expected ({batch}, {out_dim})")
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    last = params.n_layers - 1
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(last, -1, -1):
            h_in, z, aux = cache[i]
            if i < last:
                g = g * _act_grad(params.activation, z, aux)
            gw[i] = g.T @ h_in
            gb[i] = g.sum(axis=0)
            if i > 0:
                g = g @ params.weights[i]
    return GradientSet(tuple(gw), tuple(gb))


def mlp_backward(params: MlpParams, inputs: np.ndarray, upstream_grad: np.ndarray) -> GradientSet:
    """Gradients of ``sum(upstream_grad * mlp_forward_batch(params, inputs))``."""
    _, cache = forward_with_cache(params, inputs)
    return backward_from_cache(params, cache, upstream_grad)


def adam_init(params: MlpParams, beta1: float = 0.9, beta2: float = 0.999, eps_opt: float = 1e-8) -> AdamState:
    zeros = GradientSet.zeros_like(params)
    return AdamState(zeros, GradientSet.zeros_like(params), 0, beta1, beta2, eps_opt)


def adam_update(
    params: MlpParams, grads: GradientSet, state: AdamState, learning_rate: float
) -> tuple[MlpParams, AdamState]:
    if not learning_rate > 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    m_arrays = state.first_moment.arrays()
    v_arrays = state.second_moment.arrays()
    if len(g_arrays) != len(p_arrays) or any(g.shape != p.shape for g, p in zip(g_arrays, p_arrays)):
        raise ShapeError("gradient shapes do not match parameters")
    if not grads.all_finite():
        raise NonFiniteError("non-finite gradient passed to adam_update")

    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, m_arrays, v_arrays):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.eps_opt)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    new_state = replace(
        state,
        first_moment=GradientSet.from_arrays(new_m),
        second_moment=GradientSet.from_arrays(new_v),
        step_count=t,
    )
    return params.with_arrays(new_p), new_state


def numerical_gradient(params: MlpParams, inputs: np.ndarray, upstream_grad: np.ndarray, h: float = 1e-4) -> GradientSet:
    """Central finite differences of ``sum(upstream_grad * forward)``, one entry at a time."""
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    arrays = [a.astype(np.float64) for a in params.arrays()]
    grads = []
    for idx, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        for pos in np.ndindex(arr.shape):
            orig = arr[pos]
            arr[pos] = orig + h
            f_plus = np.sum(upstream * mlp_forward_batch(params.with_arrays(arrays), inputs))
            arr[pos] = orig - h
            f_minus = np.sum(upstream * mlp_forward_batch(params.with_arrays(arrays), inputs))
            arr[pos] = orig
            g[pos] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return GradientSet.from_arrays(grads)


def max_relative_error(a: GradientSet, b: GradientSet, floor: float = 1e-7) -> float:
    """Largest ``|a-b| / max(|a|, |b|, floor)`` over all entries."""
    worst = 0.0
    for x, y in zip(a.arrays(), b.arrays()):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


# -- checkpoint format ------------------------------------------------------
#
# magic(8) | activation length u32 | activation utf-8 | n_dims u32 |
# dims u32[n_dims] | dtype code u8 ('d' float64, 'f' float32) |
# W0 b0 W1 b1 ... (row-major, little endian)


def save_params(params: MlpParams, path: str | Path) -> None:
    code = b"d" if params.dtype == np.float64 else b"f"
    act = params.activation.encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(act)))
        fh.write(act)
        fh.write(struct.pack("<I", len(params.layer_dims)))
        fh.write(struct.pack(f"<{len(params.layer_dims)}I", *params.layer_dims))
        fh.write(code)
        little = "<f8" if code == b"d" else "<f4"
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype=little).tobytes())


def load_params(path: str | Path) -> MlpParams:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    off = 8
    (n_act,) = struct.unpack_from("<I", data, off)
    off += 4
    activation = data[off : off + n_act].decode()
    off += n_act
    (n_dims,) = struct.unpack_from("<I", data, off)
    off += 4
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    code = data[off : off + 1]
    off += 1
    little, dtype = ("<f8", np.float64) if code == b"d" else ("<f4", np.float32)
    itemsize = np.dtype(little).itemsize
    arrays = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape in ((fan_out, fan_in), (fan_out,)):
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype=little, count=count, offset=off).reshape(shape)
            arrays.append(arr.astype(dtype))
            off += count * itemsize
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return MlpParams(tuple(dims), tuple(arrays[0::2]), tuple(arrays[1::2]), activation)
