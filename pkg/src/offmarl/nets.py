"""Dense network substrate: fixed-topology MLPs with hand-derived gradients.

Networks are ReLU MLPs with a linear output head (default topology
input -> 256 -> 256 -> output). Gradients are exact reverse-mode backprop
for upstream output gradients; the optimizer is bias-corrected Adam. All
arithmetic is float64 so oracle comparisons are not confounded by precision.

The batched inner kernels live in :mod:`offmarl.kernels` (compiled core with
a numpy fallback); this module owns parameters, validation and checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DataFormatError, DivergenceError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DEFAULT_HIDDEN = (256, 256)

_CKPT_MAGIC = b"OFMLPNET"
_CKPT_VERSION = 1


def logsumexp_stable(values) -> float:
    """log(sum(exp(values))) with max-subtraction; safe for |v| up to ~1e6."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("logsumexp of an empty vector")
    m = v.max()
    return float(m + np.log(np.sum(np.exp(v - m))))


def logsumexp_rows(mat: np.ndarray) -> np.ndarray:
    """Row-wise stable logsumexp for a 2-D array."""
    m = mat.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(mat - m), axis=1, keepdims=True)))[:, 0]


def softmax_rows(mat: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a 2-D array."""
    z = mat - mat.max(axis=1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=1, keepdims=True)
    return e


@dataclass
class GradientBundle:
    """Per-parameter gradients, shape-congruent with the owning network."""

    d_weights: list
    d_biases: list

    def all_arrays(self) -> list:
        return list(self.d_weights) + list(self.d_biases)

    def global_norm(self) -> float:
        total = 0.0
        for a in self.all_arrays():
            total += float(np.sum(a * a))
        return float(np.sqrt(total))

    def scale_(self, factor: float) -> None:
        for a in self.all_arrays():
            a *= factor

    def add_(self, other: "GradientBundle") -> None:
        for a, b in zip(self.all_arrays(), other.all_arrays()):
            a += b

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.all_arrays())


def clip_bundles_global_norm(bundles, max_norm: float) -> float:
    """Jointly clip one or more bundles to a shared global norm; returns the norm."""
    total = 0.0
    for b in bundles:
        for a in b.all_arrays():
            total += float(np.sum(a * a))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for b in bundles:
            b.scale_(factor)
    return norm


class MlpNet:
    """ReLU MLP with per-parameter Adam state.

    Weights are (fan_in, fan_out) float64 matrices; forward input is a
    vector of length ``layer_dims[0]`` (or a batch of them), output a vector
    of length ``layer_dims[-1]``.
    """

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ConfigError("weights and biases must be non-empty and congruent")
        for idx, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ConfigError(f"layer {idx}: weight {w.shape} / bias {b.shape} mismatch")
            if idx > 0 and weights[idx - 1].shape[1] != w.shape[0]:
                raise ConfigError(f"layer {idx}: fan-in {w.shape[0]} does not chain")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.reset_adam_state()

    # -- construction -------------------------------------------------------

    @classmethod
    def he_uniform(cls, layer_dims, rng: np.random.Generator) -> "MlpNet":
        """Fan-in scaled uniform init, biases zero; fully seeded by ``rng``."""
        dims = list(layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigError(f"invalid layer dims {dims}")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, layer_dims) -> "MlpNet":
        dims = list(layer_dims)
        weights = [np.zeros((i, o)) for i, o in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(o) for o in dims[1:]]
        return cls(weights, biases)

    def reset_adam_state(self) -> None:
        self.m_weights = [np.zeros_like(w) for w in self.weights]
        self.v_weights = [np.zeros_like(w) for w in self.weights]
        self.m_biases = [np.zeros_like(b) for b in self.biases]
        self.v_biases = [np.zeros_like(b) for b in self.biases]
        self.step_count = 0

    def clone(self, with_adam: bool = False) -> "MlpNet":
        out = MlpNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])
        if with_adam:
            out.m_weights = [m.copy() for m in self.m_weights]
            out.v_weights = [v.copy() for v in self.v_weights]
            out.m_biases = [m.copy() for m in self.m_biases]
            out.v_biases = [v.copy() for v in self.v_biases]
            out.step_count = self.step_count
        return out

    # -- shape info ---------------------------------------------------------

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    # -- forward / backward -------------------------------------------------

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.shape[0] != self.in_dim:
            raise ConfigError(f"input length {x.shape} != {self.in_dim}")
        acts = kernels.forward_batch(np.ascontiguousarray(x[None, :]), self.weights, self.biases)
        return acts[-1][0]

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        return self.forward_batch_cached(x)[0]

    def forward_batch_cached(self, x: np.ndarray):
        """Batched forward returning (output, activation cache for backward)."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(f"batch input shape {x.shape} != (n, {self.in_dim})")
        acts = kernels.forward_batch(x, self.weights, self.biases)
        return acts[-1], acts

    def backward(self, x, upstream_grad) -> GradientBundle:
        """Exact gradients of upstream_grad . output(x) w.r.t. all parameters."""
        x = np.asarray(x, dtype=np.float64)
        g = np.asarray(upstream_grad, dtype=np.float64)
        if g.shape != (self.out_dim,):
            raise ConfigError(f"upstream grad shape {g.shape} != ({self.out_dim},)")
        return self.backward_batch(np.ascontiguousarray(x[None, :]), np.ascontiguousarray(g[None, :]))

    def backward_batch(self, x: np.ndarray, grad_out: np.ndarray, acts=None) -> GradientBundle:
        """Gradients of sum_b grad_out[b] . output[b], reusing ``acts`` if given."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ConfigError(f"grad_out shape {grad_out.shape} incompatible with output")
        if acts is None:
            acts = kernels.forward_batch(x, self.weights, self.biases)
        d_w, d_b = kernels.backward_batch(x, acts, self.weights, grad_out)
        return GradientBundle(d_w, d_b)

    # -- optimization -------------------------------------------------------

    def adam_step(self, grads: GradientBundle, lr: float,
                  beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                  eps: float = ADAM_EPS) -> None:
        """In-place bias-corrected Adam update; rejects non-finite gradients."""
        if lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        for idx, (w, g) in enumerate(zip(self.weights, grads.d_weights)):
            if g.shape != w.shape:
                raise ConfigError(f"gradient shape {g.shape} != weight shape {w.shape} (layer {idx})")
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite weight gradient in layer {idx}")
        for idx, (b, g) in enumerate(zip(self.biases, grads.d_biases)):
            if g.shape != b.shape:
                raise ConfigError(f"gradient shape {g.shape} != bias shape {b.shape} (layer {idx})")
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite bias gradient in layer {idx}")
        self.step_count += 1
        kernels.adam_step(
            self.weights + self.biases,
            list(grads.d_weights) + list(grads.d_biases),
            self.m_weights + self.m_biases,
            self.v_weights + self.v_biases,
            self.step_count, lr, beta1, beta2, eps,
        )

    def validate_finite(self) -> None:
        for group in (self.weights, self.biases, self.m_weights, self.v_weights,
                      self.m_biases, self.v_biases):
            for a in group:
                if not np.all(np.isfinite(a)):
                    raise DivergenceError("non-finite network parameter or moment")

    # -- checkpoint format --------------------------------------------------
    #
    # magic "OFMLPNET" | u16 version | u8 flags (bit0: adam present) |
    # u8 n_layers | u32 dims[n_layers+1] | per layer: W row-major, b |
    # [adam: u64 step | per layer: m_w, v_w, m_b, v_b]
    # All integers and floats little-endian; floats are 64-bit.

    def to_bytes(self, include_adam: bool = True) -> bytes:
        dims = self.layer_dims
        flags = 1 if include_adam else 0
        parts = [struct.pack("<8sHBB", _CKPT_MAGIC, _CKPT_VERSION, flags, len(self.weights))]
        parts.append(struct.pack(f"<{len(dims)}I", *dims))
        for w, b in zip(self.weights, self.biases):
            parts.append(w.astype("<f8").tobytes())
            parts.append(b.astype("<f8").tobytes())
        if include_adam:
            parts.append(struct.pack("<Q", self.step_count))
            for mw, vw, mb, vb in zip(self.m_weights, self.v_weights,
                                      self.m_biases, self.v_biases):
                parts.append(mw.astype("<f8").tobytes())
                parts.append(vw.astype("<f8").tobytes())
                parts.append(mb.astype("<f8").tobytes())
                parts.append(vb.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MlpNet":
        header = struct.calcsize("<8sHBB")
        if len(blob) < header:
            raise DataFormatError("checkpoint too short for header")
        magic, version, flags, n_layers = struct.unpack_from("<8sHBB", blob, 0)
        if magic != _CKPT_MAGIC:
            raise DataFormatError("not a network checkpoint (bad magic)")
        if version != _CKPT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        off = header
        try:
            dims = struct.unpack_from(f"<{n_layers + 1}I", blob, off)
        except struct.error as exc:
            raise DataFormatError("truncated checkpoint header") from exc
        off += 4 * (n_layers + 1)

        def take(shape):
            nonlocal off
            count = int(np.prod(shape))
            end = off + 8 * count
            if end > len(blob):
                raise DataFormatError("truncated checkpoint payload")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
            off = end
            return np.ascontiguousarray(arr, dtype=np.float64)

        weights = []
        biases = []
        for i in range(n_layers):
            weights.append(take((dims[i], dims[i + 1])))
            biases.append(take((dims[i + 1],)))
        net = cls(weights, biases)
        if flags & 1:
            if off + 8 > len(blob):
                raise DataFormatError("truncated Adam section")
            (net.step_count,) = struct.unpack_from("<Q", blob, off)
            off += 8
            for i in range(n_layers):
                net.m_weights[i] = take((dims[i], dims[i + 1]))
                net.v_weights[i] = take((dims[i], dims[i + 1]))
                net.m_biases[i] = take((dims[i + 1],))
                net.v_biases[i] = take((dims[i + 1],))
        if off != len(blob):
            raise DataFormatError("trailing bytes after checkpoint payload")
        return net

    def save(self, path, include_adam: bool = True) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(include_adam=include_adam))

    @classmethod
    def load(cls, path) -> "MlpNet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
