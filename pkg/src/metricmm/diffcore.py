"""Small differentiable toolkit: MLPs with hand-written backprop, Adam, and
a central finite-difference oracle.

Everything runs in float64. Inputs may be a single vector ``(d,)`` or a
batch ``(B, d)``; parameter gradients are summed over the batch, so callers
fold any ``1/B`` of a mean loss into ``output_grad``.

Weights are stored as ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
"""

from __future__ import annotations

import io
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from metricmm.errors import ConfigurationError, NumericalError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_MAGIC = b"MLP1"


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes ``(input, hidden..., output)`` and hidden activations.

    ``activations`` has one entry per hidden layer (defaults to ReLU); the
    output layer uses ``output_activation`` (identity unless stated).
    """

    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...] | None = None
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ConfigurationError(f"MlpSpec needs at least 2 layer sizes, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be >= 1, got {sizes}")
        acts = self.activations
        if acts is None:
            acts = ("relu",) * (len(sizes) - 2)
        elif isinstance(acts, str):
            acts = (acts,) * (len(sizes) - 2)
        acts = tuple(acts)
        if len(acts) != len(sizes) - 2:
            raise ConfigurationError(
                f"expected {len(sizes) - 2} hidden activations, got {len(acts)}"
            )
        for a in acts + (self.output_activation,):
            if a not in _ACT_CODES:
                raise ConfigurationError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def activation(self, k: int) -> str:
        return self.activations[k] if k < self.n_layers - 1 else self.output_activation

    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[k] * s[k + 1] + s[k + 1] for k in range(len(s) - 1))


@dataclass
class MlpParams:
    """Weights and biases of an MLP. Gradients use the same container."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        """Interleaved ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def names(self, prefix: str = "") -> list[str]:
        out = []
        for k in range(self.spec.n_layers):
            out += [f"{prefix}W{k}", f"{prefix}b{k}"]
        return out

    def copy(self) -> MlpParams:
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> MlpParams:
        return MlpParams(
            self.spec, [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases]
        )

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def scale_(self, c: float) -> MlpParams:
        for t in self.tensors():
            t *= c
        return self


@dataclass
class MlpCache:
    """Per-layer inputs and pre-activations recorded by :func:`mlp_forward`."""

    spec: MlpSpec
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    batched: bool = True


def mlp_init(spec: MlpSpec, seed) -> MlpParams:
    """Fan-in uniform init: ``W ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, zero biases."""
    if not isinstance(spec, MlpSpec):
        spec = MlpSpec(tuple(spec))
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _activation_grad(name: str, pre: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        # subgradient at 0 is 0
        return g * (pre > 0.0)
    if name == "tanh":
        t = np.tanh(pre)
        return g * (1.0 - t * t)
    return g


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.in_dim:
        raise ShapeError(f"MLP expects input dim {params.spec.in_dim}, got shape {x.shape}")
    return x, batched


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    x, batched = _as_batch(params, x)
    cache = MlpCache(params.spec, batched=batched)
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        pre = h @ w + b
        cache.preacts.append(pre)
        h = _activate(params.spec.activation(k), pre)
    return (h if batched else h[0]), cache


def mlp_apply(params: MlpParams, x) -> np.ndarray:
    """Forward pass without recording a cache."""
    x, batched = _as_batch(params, x)
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = _activate(params.spec.activation(k), h @ w + b)
    return h if batched else h[0]


def mlp_backward(params: MlpParams, cache: MlpCache, output_grad, need_input_grad: bool = True):
    """Reverse-mode pass. Returns ``(param_grads, input_grad)``.

    ``input_grad`` is ``None`` when ``need_input_grad`` is false (saves the
    first-layer ``g @ W.T`` product, which is the costly one for wide inputs).
    """
    if cache.spec != params.spec or len(cache.preacts) != params.spec.n_layers:
        raise ShapeError("cache was not produced by a forward pass of this MLP")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {cache.preacts[-1].shape}")
    n = params.spec.n_layers
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    input_grad = None
    for k in reversed(range(n)):
        g = _activation_grad(params.spec.activation(k), cache.preacts[k], g)
        gw[k] = cache.inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        if k > 0 or need_input_grad:
            g = g @ params.weights[k].T
    if need_input_grad:
        input_grad = g if cache.batched else g[0]
    return MlpParams(params.spec, gw, gb), input_grad


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(tensors: Sequence[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    if not lr >= 0:
        raise ConfigurationError(f"learning rate must be >= 0, got {lr}")
    return AdamState(
        m=[np.zeros_like(t) for t in tensors],
        v=[np.zeros_like(t) for t in tensors],
        lr=float(lr),
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam step, updating ``params`` and ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must have equal length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient {i} shape {g.shape} != parameter shape {params[i].shape}")
        # a finite sum implies finite entries
        if not np.isfinite(np.sum(g)) and not np.all(np.isfinite(g)):
            label = names[i] if names is not None else f"tensor[{i}]"
            raise NumericalError(f"non-finite gradient for parameter {label}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step = state.lr / c1
    inv_sqrt_c2 = 1.0 / np.sqrt(c2)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.square(g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # p -= lr * m_hat / (sqrt(v_hat) + eps)
        np.sqrt(v, out=tmp)
        tmp *= inv_sqrt_c2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp
    return params, state


# ---------------------------------------------------------------- oracles


def numerical_gradient(loss: Callable[[], float], tensors: Sequence[np.ndarray], h: float = 1e-4):
    """Central differences of ``loss()`` w.r.t. every entry of ``tensors``.

    The tensors are perturbed in place and restored.
    """
    out = []
    for t in tensors:
        g = np.zeros_like(t)
        flat = t.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss()
            flat[i] = orig - h
            fm = loss()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = 1e-8) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool


def grad_check(spec: MlpSpec, seed, tolerance: float = 1e-4, h: float = 1e-4, batch: int = 3) -> GradCheckReport:
    """Compare :func:`mlp_backward` with central differences at a random point.

    The loss is ``sum(G * mlp(X))`` for random ``X`` and ``G`` at a random
    parameter point (fan-in weights, small random biases). Inputs are
    redrawn until no ReLU pre-activation sits within ``10*h`` of the kink,
    so the finite-difference stencil never straddles it.
    """
    if not isinstance(spec, MlpSpec):
        spec = MlpSpec(tuple(spec))
    rng = np.random.default_rng(seed)
    params = mlp_init(spec, rng.integers(2**32))
    # nonzero biases: with zero biases a dead unit pins later pre-activations at the kink
    for b in params.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    for _ in range(1000):
        x = rng.normal(size=(batch, spec.in_dim))
        _, cache = mlp_forward(params, x)
        margins = [
            np.min(np.abs(pre)) for k, pre in enumerate(cache.preacts) if spec.activation(k) == "relu"
        ]
        if not margins or min(margins) > 10 * h * (1.0 + np.max(np.abs(x))):
            break
    g_out = rng.normal(size=(batch, spec.out_dim))
    _, cache = mlp_forward(params, x)
    grads, _ = mlp_backward(params, cache, g_out, need_input_grad=False)

    def loss() -> float:
        return float(np.sum(g_out * mlp_apply(params, x)))

    numeric = numerical_gradient(loss, params.tensors(), h)
    err = max_relative_error(grads.tensors(), numeric)
    return GradCheckReport(err, tolerance, err <= tolerance)


# ---------------------------------------------------------------- serialization
#
# Layout of one serialized MLP (all little-endian):
#   4 bytes   magic b"MLP1"
#   uint32    L = number of layer sizes
#   L*uint32  layer sizes
#   (L-1)*u8  activation code per layer (0 relu, 1 tanh, 2 identity), output layer last
#   float64   W0 (row-major fan_in x fan_out), b0, W1, b1, ...


def write_mlp(stream: BinaryIO, params: MlpParams) -> None:
    spec = params.spec
    sizes = spec.layer_sizes
    stream.write(_MAGIC)
    stream.write(struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes))
    codes = [_ACT_CODES[spec.activation(k)] for k in range(spec.n_layers)]
    stream.write(struct.pack(f"<{len(codes)}B", *codes))
    stream.writelines(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors())


def read_mlp(stream: BinaryIO) -> MlpParams:
    magic = stream.read(4)
    if magic != _MAGIC:
        raise ShapeError(f"bad MLP snapshot magic {magic!r}")
    (n,) = struct.unpack("<I", stream.read(4))
    sizes = struct.unpack(f"<{n}I", stream.read(4 * n))
    codes = struct.unpack(f"<{n - 1}B", stream.read(n - 1))
    acts = [ACTIVATIONS[c] for c in codes]
    spec = MlpSpec(tuple(sizes), tuple(acts[:-1]), acts[-1])
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(stream.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out)
        b = np.frombuffer(stream.read(8 * fan_out), dtype="<f8")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpParams(spec, weights, biases)


def mlp_to_bytes(params: MlpParams) -> bytes:
    buf = io.BytesIO()
    write_mlp(buf, params)
    return buf.getvalue()


def mlp_from_bytes(data: bytes) -> MlpParams:
    return read_mlp(io.BytesIO(data))
