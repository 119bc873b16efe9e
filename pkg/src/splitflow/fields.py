"""Conditional velocity fields v(x, sigma, condition) and classifier-free guidance.

Three backends share one calling convention:

* :class:`ConstantShiftField` returns a condition-dependent constant, which makes
  every editing loop solvable in closed form.
* :class:`AffineGaussianField` is the exact straight-path velocity between an
  isotropic Gaussian data distribution (at sigma=0) and an isotropic Gaussian
  noise distribution (at sigma=1) under their optimal-transport coupling.
* :class:`MlpField` is a small dense network on ``flatten(x) ++ [sigma] ++ embedding``
  with hand-written backpropagation, trained by :mod:`splitflow.training`.

The noise convention throughout is ``x_sigma = (1 - sigma) * x0 + sigma * eps``,
so the regression target of a field is ``eps - x0``.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, StateError
from .latent import as_latent

ACTIVATIONS = ("tanh", "relu")
FIELD_MAGIC = b"SFFIELD1\n"


@dataclass(frozen=True)
class Condition:
    """Stand-in for a text prompt: a fixed-length embedding plus a null flag for CFG."""

    embedding: np.ndarray
    is_null: bool = False
    label: str = ""

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(emb)):
            raise DimensionError("condition embedding must be finite")
        object.__setattr__(self, "embedding", emb)

    @property
    def dim(self) -> int:
        return self.embedding.size

    @classmethod
    def null(cls, dim: int) -> "Condition":
        return cls(np.zeros(dim), is_null=True, label="<null>")


def _check_inputs(fld, x, cond: Condition) -> np.ndarray:
    x = as_latent(x, "x")
    if x.shape != tuple(fld.input_shape):
        raise DimensionError(f"latent shape {x.shape} does not match field input shape {tuple(fld.input_shape)}")
    if cond.dim != fld.cond_dim:
        raise DimensionError(f"condition dim {cond.dim} does not match field cond_dim {fld.cond_dim}")
    return x


@dataclass
class ConstantShiftField:
    """v(x, sigma, c) = reshape(weight @ c + bias); the null condition maps to ``bias``."""

    weight: np.ndarray  # (C*H*W, D)
    bias: np.ndarray  # (C*H*W,)
    input_shape: tuple

    kind = "constant_shift"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        n = int(np.prod(self.input_shape))
        if self.weight.ndim != 2 or self.weight.shape[0] != n or self.bias.shape != (n,):
            raise DimensionError("constant_shift parameters inconsistent with input_shape")

    @property
    def cond_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def from_shifts(cls, shifts: Sequence, null_shift=None) -> "ConstantShiftField":
        """Field whose one-hot condition ``e_k`` yields ``shifts[k]`` and the null condition ``null_shift``."""
        shifts = [as_latent(s, "shift") for s in shifts]
        shape = shifts[0].shape
        base = np.zeros(shape) if null_shift is None else as_latent(null_shift, "null_shift")
        cols = [(s - base).reshape(-1) for s in shifts]
        return cls(np.stack(cols, axis=1), base.reshape(-1), shape)

    def velocity(self, x, sigma, cond: Condition) -> np.ndarray:
        _check_inputs(self, x, cond)
        return (self.weight @ cond.embedding + self.bias).reshape(self.input_shape)

    def arrays(self):
        return {"weight": self.weight, "bias": self.bias}

    def meta(self):
        return {}


@dataclass
class AffineGaussianField:
    """Exact rectified-flow velocity between N(mu_d(c), s_d^2 I) data and N(mu_n, s_n^2 I) noise.

    The data mean is affine in the condition, ``mu_d(c) = data_weight @ c + data_bias``.
    With the monotone coupling ``eps = mu_n + (s_n / s_d) (x0 - mu_d)`` every path is a
    straight line, so Euler integration stays on it exactly.
    """

    data_weight: np.ndarray  # (C*H*W, D)
    data_bias: np.ndarray  # (C*H*W,)
    input_shape: tuple
    data_std: float = 1.0
    noise_std: float = 1.0
    noise_mean: Optional[np.ndarray] = None

    kind = "affine_gaussian"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        n = int(np.prod(self.input_shape))
        self.data_weight = np.asarray(self.data_weight, dtype=np.float64)
        self.data_bias = np.asarray(self.data_bias, dtype=np.float64).reshape(-1)
        self.noise_mean = np.zeros(n) if self.noise_mean is None else np.asarray(self.noise_mean, dtype=np.float64).reshape(-1)
        if self.data_weight.ndim != 2 or self.data_weight.shape[0] != n or self.data_bias.shape != (n,) or self.noise_mean.shape != (n,):
            raise DimensionError("affine_gaussian parameters inconsistent with input_shape")
        if self.data_std <= 0 or self.noise_std <= 0:
            raise DimensionError("standard deviations must be positive")

    @property
    def cond_dim(self) -> int:
        return self.data_weight.shape[1]

    def data_mean(self, cond: Condition) -> np.ndarray:
        return self.data_weight @ cond.embedding + self.data_bias

    def transport(self, x0, cond: Condition) -> np.ndarray:
        """Noise endpoint paired with clean sample ``x0``."""
        x0 = _check_inputs(self, x0, cond).reshape(-1)
        ratio = self.noise_std / self.data_std
        return (self.noise_mean + ratio * (x0 - self.data_mean(cond))).reshape(self.input_shape)

    def velocity(self, x, sigma, cond: Condition) -> np.ndarray:
        x = _check_inputs(self, x, cond).reshape(-1)
        mu_d = self.data_mean(cond)
        ratio = self.noise_std / self.data_std
        scale = 1.0 - sigma + sigma * ratio
        mean_sigma = (1.0 - sigma) * mu_d + sigma * self.noise_mean
        v = (self.noise_mean - mu_d) + (ratio - 1.0) / scale * (x - mean_sigma)
        return v.reshape(self.input_shape)

    def arrays(self):
        return {"data_weight": self.data_weight, "data_bias": self.data_bias, "noise_mean": self.noise_mean}

    def meta(self):
        return {"data_std": self.data_std, "noise_std": self.noise_std}


# --- MLP backend -------------------------------------------------------------

@dataclass
class MlpParams:
    """Dense layers ``y = act(x @ W + b)``; the final layer is linear. ``W`` is (fan_in, fan_out)."""

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DimensionError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("weights and biases must be non-empty lists of equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i} input dim {w.shape[0]} does not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden(self) -> list:
        return [w.shape[1] for w in self.weights[:-1]]

    def tensors(self) -> list:
        """Flat parameter list in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


def init_mlp(in_dim, hidden, out_dim, activation="tanh", seed=0, zero_last=False) -> MlpParams:
    rng = np.random.default_rng(seed)
    dims = [in_dim, *hidden, out_dim]
    gain = 1.0 if activation == "tanh" else 2.0
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        if last and zero_last:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    preacts: list  # pre-activation of each layer
    shapes: tuple = field(default=())


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(z.dtype)


def mlp_forward(params: MlpParams, inp) -> tuple:
    """Forward pass on a (batch, in_dim) or (in_dim,) input; returns (output, cache)."""
    h = np.asarray(inp, dtype=np.float64)
    squeeze = h.ndim == 1
    h = np.atleast_2d(h)
    if h.shape[1] != params.in_dim:
        raise DimensionError(f"input dim {h.shape[1]} != network in_dim {params.in_dim}")
    inputs, preacts = [], []
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = z if i == n - 1 else _act(params.activation, z)
    cache = ForwardCache(inputs, preacts, tuple(w.shape for w in params.weights))
    return (h[0] if squeeze else h), cache


def mlp_backward(params: MlpParams, cache: ForwardCache, upstream) -> tuple:
    """Gradients of ``sum(upstream * output)`` w.r.t. weights and biases."""
    if cache.shapes != tuple(w.shape for w in params.weights) or len(cache.preacts) != len(params.weights):
        raise StateError("forward cache was produced by a different network")
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if g.shape != cache.preacts[-1].shape:
        raise DimensionError(f"upstream gradient shape {g.shape} != output shape {cache.preacts[-1].shape}")
    n = len(params.weights)
    dws, dbs = [None] * n, [None] * n
    for i in reversed(range(n)):
        if i != n - 1:
            z = cache.preacts[i]
            g = g * _act_grad(params.activation, z, cache.inputs[i + 1])
        dws[i] = cache.inputs[i].T @ g
        dbs[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i].T
    return dws, dbs


@dataclass
class MlpField:
    params: MlpParams
    input_shape: tuple
    cond_dim: int

    kind = "mlp"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        n = int(np.prod(self.input_shape))
        if self.params.in_dim != n + 1 + self.cond_dim:
            raise DimensionError(f"network in_dim {self.params.in_dim} != C*H*W + 1 + D = {n + 1 + self.cond_dim}")
        if self.params.out_dim != n:
            raise DimensionError(f"network out_dim {self.params.out_dim} != C*H*W = {n}")

    @classmethod
    def create(cls, input_shape, cond_dim, hidden=(128, 128), activation="tanh", seed=0, zero_last=False):
        n = int(np.prod(input_shape))
        params = init_mlp(n + 1 + cond_dim, list(hidden), n, activation, seed, zero_last)
        return cls(params, tuple(input_shape), cond_dim)

    def pack_inputs(self, xs, sigmas, embs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), -1)
        sig = np.asarray(sigmas, dtype=np.float64).reshape(-1, 1)
        return np.concatenate([xs, sig, np.asarray(embs, dtype=np.float64)], axis=1)

    def velocity(self, x, sigma, cond: Condition) -> np.ndarray:
        x = _check_inputs(self, x, cond)
        inp = np.concatenate([x.reshape(-1), [float(sigma)], cond.embedding])
        out, _ = mlp_forward(self.params, inp)
        return out.reshape(self.input_shape)

    def velocity_batch(self, xs, sigmas, embs) -> np.ndarray:
        out, _ = mlp_forward(self.params, self.pack_inputs(xs, sigmas, embs))
        return out.reshape((-1, *self.input_shape))

    def arrays(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.params.weights, self.params.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def meta(self):
        return {"activation": self.params.activation, "hidden": self.params.hidden}


FIELD_KINDS = {cls.kind: cls for cls in (ConstantShiftField, AffineGaussianField, MlpField)}


def evaluate(fld, x, sigma, cond: Condition) -> np.ndarray:
    """Velocity of ``fld`` at latent ``x`` and noise level ``sigma`` under ``cond``."""
    return fld.velocity(x, sigma, cond)


def evaluate_cfg(fld, x, sigma, cond: Condition, scale: float) -> np.ndarray:
    """Classifier-free guidance: ``v_null + scale * (v_cond - v_null)``."""
    if scale == 1.0:
        return fld.velocity(x, sigma, cond)
    v_null = fld.velocity(x, sigma, Condition.null(fld.cond_dim))
    if scale == 0.0:
        return v_null
    v_cond = fld.velocity(x, sigma, cond)
    return v_null + scale * (v_cond - v_null)


# --- persistence -------------------------------------------------------------

def save_field(path, fld, dtype="float32") -> None:
    """Write a JSON header line followed by the little-endian parameter payload."""
    arrays = fld.arrays()
    header = {
        "format": "splitflow-field",
        "version": 1,
        "kind": fld.kind,
        "input_shape": list(fld.input_shape),
        "cond_dim": int(fld.cond_dim),
        "dtype": dtype,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        **fld.meta(),
    }
    le = np.dtype(dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=le).tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        if fh.readline() != FIELD_MAGIC:
            raise DimensionError(f"{path}: not a splitflow field file")
        header = json.loads(fh.readline())
        payload = io.BytesIO(fh.read())
    le = np.dtype(header["dtype"]).newbyteorder("<")
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        buf = payload.read(count * le.itemsize)
        if len(buf) != count * le.itemsize:
            raise DimensionError(f"{path}: truncated payload at array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(buf, dtype=le).reshape(spec["shape"]).astype(np.float64)
    if payload.read(1):
        raise DimensionError(f"{path}: trailing bytes after payload")
    return _from_arrays(header["kind"], tuple(header["input_shape"]), header["cond_dim"], arrays, header)


def _from_arrays(kind, shape, cond_dim, arrays, meta):
    if kind == "mlp":
        n = len(meta["hidden"]) + 1
        params = MlpParams([arrays[f"W{i}"] for i in range(n)], [arrays[f"b{i}"] for i in range(n)], meta["activation"])
        return MlpField(params, shape, cond_dim)
    if kind == "constant_shift":
        return ConstantShiftField(arrays["weight"], arrays["bias"], shape)
    if kind == "affine_gaussian":
        return AffineGaussianField(arrays["data_weight"], arrays["data_bias"], shape, meta["data_std"],
                                   meta["noise_std"], arrays["noise_mean"])
    raise DimensionError(f"unknown field kind {kind!r}")


def quantize(fld, dtype="float32"):
    """Return a copy of ``fld`` with parameters rounded to the on-disk precision."""
    arrays = {k: v.astype(dtype).astype(np.float64) for k, v in fld.arrays().items()}
    return _from_arrays(fld.kind, fld.input_shape, fld.cond_dim, arrays, fld.meta())
