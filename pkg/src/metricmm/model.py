"""Metric multimodal state estimation.

Per-modality encoders map observations into one latent space whose Euclidean
distances track the number of actions between states. A latent transition
model predicts the next latent, and the modalities are fused by inverse
distance to that prediction, so an encoding that disagrees with the dynamics
gets little weight.

Per-sample functions accept ``(..., d)`` arrays; batch reductions are done by
:func:`total_representation_loss`.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from metricmm.diffcore import (
    MlpParams,
    MlpSpec,
    mlp_apply,
    mlp_backward,
    mlp_forward,
    mlp_init,
)
from metricmm.errors import ConfigurationError, ShapeError, UsageError

EPS_LOG = 1e-8
DEFAULT_DELTA = 1e-5


@dataclass
class LossWeights:
    positive: float = 1.0  # lambda_1, L+
    negative: float = 1.0  # lambda_2, L-
    invariance: float = 1.0  # lambda_3, L_inv

    def __post_init__(self):
        for name in ("positive", "negative", "invariance"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class MetricMM:
    encoders: list[MlpParams]
    transition: MlpParams
    action_dim: int
    delta: float = DEFAULT_DELTA
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.encoders:
            raise ConfigurationError("need at least one encoder")
        d = {e.spec.out_dim for e in self.encoders}
        if len(d) != 1:
            raise ConfigurationError(f"encoders disagree on latent size: {sorted(d)}")
        d_z = d.pop()
        if self.transition.spec.in_dim != d_z + self.action_dim or self.transition.spec.out_dim != d_z:
            raise ConfigurationError("transition model must map (d_z + action_dim) -> d_z")
        if not self.delta > 0:
            raise ConfigurationError(f"fusion delta must be > 0, got {self.delta}")

    @property
    def d_z(self) -> int:
        return self.encoders[0].spec.out_dim

    @property
    def n_modalities(self) -> int:
        return len(self.encoders)

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(e.spec.in_dim for e in self.encoders)

    def tensors(self) -> list[np.ndarray]:
        out = []
        for e in self.encoders:
            out += e.tensors()
        return out + self.transition.tensors()

    def names(self) -> list[str]:
        out = []
        for i, e in enumerate(self.encoders):
            out += e.names(f"encoder{i}.")
        return out + self.transition.names("transition.")

    def encoder_param_count(self) -> int:
        return sum(e.n_params() for e in self.encoders)


def build_metricmm(
    input_dims: Sequence[int],
    action_dim: int,
    d_z: int = 16,
    hidden: Sequence[int] = (64, 64),
    transition_hidden: Sequence[int] = (64, 64),
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
    weights: LossWeights | None = None,
) -> MetricMM:
    rng = np.random.default_rng(seed)
    encoders = [mlp_init(MlpSpec((d, *hidden, d_z)), rng.integers(2**32)) for d in input_dims]
    transition = mlp_init(MlpSpec((d_z + action_dim, *transition_hidden, d_z)), rng.integers(2**32))
    return MetricMM(encoders, transition, action_dim, delta, weights or LossWeights())


# ---------------------------------------------------------------- encoding


def encode_modality(encoders: Sequence[MlpParams], i: int, obs_i) -> np.ndarray:
    return mlp_apply(encoders[i], obs_i)


def encode_all(encoders: Sequence[MlpParams], obs: Sequence) -> list[np.ndarray]:
    if len(obs) != len(encoders):
        raise ShapeError(f"expected {len(encoders)} modalities, got {len(obs)}")
    return [mlp_apply(e, o) for e, o in zip(encoders, obs)]


def mean_encode(encoders: Sequence[MlpParams], obs: Sequence) -> np.ndarray:
    return np.mean(encode_all(encoders, obs), axis=0)


def predict_transition(transition: MlpParams, z_prev, a_prev) -> np.ndarray:
    z_prev = np.asarray(z_prev, dtype=np.float64)
    a_prev = np.asarray(a_prev, dtype=np.float64)
    if a_prev.ndim < z_prev.ndim:
        a_prev = a_prev.reshape(z_prev.shape[:-1] + (-1,))
    return mlp_apply(transition, np.concatenate([z_prev, a_prev], axis=-1))


# ---------------------------------------------------------------- fusion


def fuse_idw(z_list, z_hat, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Inverse-distance weighted average of the ``z_list`` encodings around ``z_hat``."""
    z = np.asarray(z_list, dtype=np.float64)  # (N, ..., d)
    dist = np.linalg.norm(z - np.asarray(z_hat, dtype=np.float64), axis=-1)
    w = 1.0 / (dist + delta)
    return np.sum(w[..., None] * z, axis=0) / np.sum(w, axis=0)[..., None]


def fusion_weights(z_list, z_hat, delta: float = DEFAULT_DELTA) -> np.ndarray:
    z = np.asarray(z_list, dtype=np.float64)
    w = 1.0 / (np.linalg.norm(z - z_hat, axis=-1) + delta)
    return w / np.sum(w, axis=0)


def fuse_idw_backward(z_list, z_hat, delta: float, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss through :func:`fuse_idw`.

    Returns ``(grad_z_list, grad_z_hat)`` with the shapes of the inputs.
    """
    z = np.asarray(z_list, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    diff = z - z_hat
    dist = np.linalg.norm(diff, axis=-1)
    w = 1.0 / (dist + delta)
    wsum = np.sum(w, axis=0)
    fused = np.sum(w[..., None] * z, axis=0) / wsum[..., None]
    # d fused / d w_i = (z_i - fused) / W ;  d w_i / d z_i = -w_i^2 * diff_i / dist_i
    dw = np.sum((z - fused) * g, axis=-1) / wsum
    unit = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 0)
    through_w = (dw * -(w * w))[..., None] * unit
    grad_z = (w / wsum)[..., None] * g + through_w
    grad_hat = -np.sum(through_w, axis=0)
    return grad_z, grad_hat


# ---------------------------------------------------------------- losses


def loss_positive(z_t, z_next) -> np.ndarray:
    d = np.linalg.norm(np.asarray(z_next) - np.asarray(z_t), axis=-1)
    return (d - 1.0) ** 2


def loss_negative(z_t, z_r, eps_log: float = EPS_LOG) -> np.ndarray:
    d = np.linalg.norm(np.asarray(z_r) - np.asarray(z_t), axis=-1)
    return -np.log(np.maximum(d, eps_log))


def loss_transition(z_pred, z_next) -> np.ndarray:
    return np.mean((np.asarray(z_pred) - np.asarray(z_next)) ** 2, axis=-1)


def loss_invariance(z_list) -> np.ndarray:
    z = np.asarray(z_list, dtype=np.float64)
    if z.shape[0] < 2:
        raise ConfigurationError("invariance loss needs at least two modalities")
    pairs = list(combinations(range(z.shape[0]), 2))
    return sum(np.mean((z[i] - z[j]) ** 2, axis=-1) for i, j in pairs) / len(pairs)


@dataclass
class RepresentationBatch:
    obs: tuple[np.ndarray, ...]  # per modality (B, dim_i)
    actions: np.ndarray  # (B, action_dim), already in network input form
    next_obs: tuple[np.ndarray, ...]

    @property
    def size(self) -> int:
        return self.actions.shape[0]


@dataclass
class RepresentationLoss:
    total: float
    parts: dict
    grads: list[np.ndarray]  # aligned with MetricMM.tensors()
    z_t: np.ndarray = None  # mean encodings, kept for callers that reuse them
    z_next: np.ndarray = None
    z_next_pred: np.ndarray = None
    enc_t: np.ndarray = None  # (N, B, d)
    enc_next: np.ndarray = None


def total_representation_loss(
    model: MetricMM,
    batch: RepresentationBatch,
    weights: LossWeights | None = None,
    negatives: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> RepresentationLoss:
    """``L_T + l1*L+ + l2*L- + l3*L_inv`` over a batch, with gradients.

    ``negatives[b]`` picks the in-batch sample paired with ``b`` for L-; when
    omitted a fresh permutation is drawn from ``rng``.
    """
    weights = weights or model.weights
    B = batch.size
    N = model.n_modalities
    d = model.d_z
    if negatives is None:
        if rng is None:
            raise UsageError("pass either negatives or rng")
        negatives = rng.permutation(B)

    enc_caches, enc = [], []
    for e, o, on in zip(model.encoders, batch.obs, batch.next_obs):
        out, cache = mlp_forward(e, np.concatenate([np.asarray(o), np.asarray(on)], axis=0))
        enc_caches.append(cache)
        enc.append(out)
    enc = np.stack(enc)  # (N, 2B, d)
    enc_t, enc_n = enc[:, :B], enc[:, B:]
    z_t = enc_t.mean(axis=0)
    z_n = enc_n.mean(axis=0)

    g_zt = np.zeros_like(z_t)
    g_zn = np.zeros_like(z_n)
    g_enc_t = np.zeros_like(enc_t)

    # transition
    z_pred, t_cache = mlp_forward(model.transition, np.concatenate([z_t, batch.actions], axis=1))
    diff = z_pred - z_n
    l_t = float(np.mean(diff * diff))
    g_pred = 2.0 * diff / (B * d)
    g_zn -= g_pred
    t_grads, g_in = mlp_backward(model.transition, t_cache, g_pred)
    g_zt += g_in[:, :d]

    # positive
    step = z_n - z_t
    nrm = np.linalg.norm(step, axis=1)
    l_pos = float(np.mean((nrm - 1.0) ** 2))
    if weights.positive:
        coef = weights.positive * 2.0 * (nrm - 1.0) / B
        unit = np.divide(step, nrm[:, None], out=np.zeros_like(step), where=nrm[:, None] > 0)
        g_step = coef[:, None] * unit
        g_zn += g_step
        g_zt -= g_step

    # negative
    neg = np.asarray(negatives)
    far = z_t[neg] - z_t
    fn = np.linalg.norm(far, axis=1)
    l_neg = float(np.mean(-np.log(np.maximum(fn, EPS_LOG))))
    if weights.negative:
        live = fn > EPS_LOG
        coef = np.where(live, -weights.negative / (B * np.where(live, fn, 1.0) ** 2), 0.0)
        g_far = coef[:, None] * far
        np.add.at(g_zt, neg, g_far)
        g_zt -= g_far

    # invariance
    l_inv = 0.0
    if N >= 2:
        pairs = list(combinations(range(N), 2))
        for i, j in pairs:
            dd = enc_t[i] - enc_t[j]
            l_inv += float(np.mean(dd * dd)) / len(pairs)
            if weights.invariance:
                gd = weights.invariance * 2.0 * dd / (len(pairs) * B * d)
                g_enc_t[i] += gd
                g_enc_t[j] -= gd

    total = l_t + weights.positive * l_pos + weights.negative * l_neg + weights.invariance * l_inv

    grads = []
    for k, (e, cache) in enumerate(zip(model.encoders, enc_caches)):
        g_out = np.concatenate([g_enc_t[k] + g_zt / N, g_zn / N], axis=0)
        eg, _ = mlp_backward(e, cache, g_out, need_input_grad=False)
        grads += eg.tensors()
    grads += t_grads.tensors()

    parts = {"L_T": l_t, "L_plus": l_pos, "L_minus": l_neg, "L_inv": l_inv}
    return RepresentationLoss(total, parts, grads, z_t, z_n, z_pred, enc_t, enc_n)


# ---------------------------------------------------------------- estimation


def estimate_step(model: MetricMM, prev_z, prev_action, obs) -> np.ndarray:
    """Recursive estimate: mean encoding at t=0, IDW fusion around the prediction after.

    The estimator gets no information about which modalities are corrupted.
    """
    encs = encode_all(model.encoders, obs)
    if prev_z is None and prev_action is None:
        return np.mean(encs, axis=0)
    if prev_z is None or prev_action is None:
        raise UsageError("need both the previous estimate and the previous action after t=0")
    z_hat = predict_transition(model.transition, prev_z, prev_action)
    return fuse_idw(encs, z_hat, model.delta)


def fused_batch(model: MetricMM, enc: np.ndarray, z_hat: np.ndarray, has_prev: np.ndarray) -> np.ndarray:
    """Batch fusion where rows without a predecessor fall back to the mean encoding."""
    fused = fuse_idw(enc, z_hat, model.delta)
    return np.where(np.asarray(has_prev, dtype=bool)[:, None], fused, enc.mean(axis=0))


class MetricEstimator:
    """Stateful per-episode wrapper around :func:`estimate_step`."""

    def __init__(self, model: MetricMM, action_encoder=None):
        self.model = model
        self.action_encoder = action_encoder or (lambda a: np.asarray(a, dtype=np.float64).reshape(-1))
        self.z = None

    def reset(self) -> None:
        self.z = None

    def __call__(self, obs, prev_action=None) -> np.ndarray:
        if self.z is None:
            self.z = estimate_step(self.model, None, None, obs)
        else:
            self.z = estimate_step(self.model, self.z, self.action_encoder(prev_action), obs)
        return self.z
