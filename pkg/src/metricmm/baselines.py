"""Fusion baselines trained only through the RL objective.

Both keep per-modality encoders shaped like MetricMM's and fuse them
without any recursion: LinearComb mixes encodings with learned
per-dimension weights, ConCat projects their concatenation.

The builders bound the latent with tanh (on each encoder for LinearComb,
on the projection for ConCat). With only critic gradients shaping the
encoders an unbounded latent drifts to large norms and SAC stalls.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from metricmm.diffcore import MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init
from metricmm.errors import ConfigurationError, ShapeError


def _check_obs(encoders, obs):
    if len(obs) != len(encoders):
        raise ShapeError(f"expected {len(encoders)} modalities, got {len(obs)}")


@dataclass
class LinearCombFusion:
    encoders: list[MlpParams]
    mix: np.ndarray  # (N, d_z)

    kind = "linearcomb"

    def __post_init__(self):
        if self.mix.shape != (len(self.encoders), self.d_z):
            raise ConfigurationError(f"mix must have shape {(len(self.encoders), self.d_z)}")

    @property
    def d_z(self) -> int:
        return self.encoders[0].spec.out_dim

    def tensors(self) -> list[np.ndarray]:
        out = []
        for e in self.encoders:
            out += e.tensors()
        return out + [self.mix]

    def names(self) -> list[str]:
        out = []
        for i, e in enumerate(self.encoders):
            out += e.names(f"encoder{i}.")
        return out + ["mix"]

    def encoder_param_count(self) -> int:
        return sum(e.n_params() for e in self.encoders)

    def forward(self, obs: Sequence):
        _check_obs(self.encoders, obs)
        encs, caches = zip(*(mlp_forward(e, o) for e, o in zip(self.encoders, obs)))
        encs = np.stack(encs)
        mix = self.mix.reshape((len(self.encoders),) + (1,) * (encs.ndim - 2) + (self.d_z,))
        return np.sum(mix * encs, axis=0), (encs, caches)

    def backward(self, cache, grad_z) -> list[np.ndarray]:
        encs, caches = cache
        g = np.asarray(grad_z, dtype=np.float64)
        grads = []
        for i, (e, c) in enumerate(zip(self.encoders, caches)):
            eg, _ = mlp_backward(e, c, g * self.mix[i], need_input_grad=False)
            grads += eg.tensors()
        g_mix = (encs * g).reshape(len(self.encoders), -1, self.d_z).sum(axis=1)
        return grads + [g_mix]


@dataclass
class ConcatFusion:
    encoders: list[MlpParams]
    projection: MlpParams  # N*d_z -> d_z

    kind = "concat"

    def __post_init__(self):
        if self.projection.spec.in_dim != len(self.encoders) * self.encoders[0].spec.out_dim:
            raise ConfigurationError("projection input must equal N * d_z")

    @property
    def d_z(self) -> int:
        return self.projection.spec.out_dim

    def tensors(self) -> list[np.ndarray]:
        out = []
        for e in self.encoders:
            out += e.tensors()
        return out + self.projection.tensors()

    def names(self) -> list[str]:
        out = []
        for i, e in enumerate(self.encoders):
            out += e.names(f"encoder{i}.")
        return out + self.projection.names("projection.")

    def encoder_param_count(self) -> int:
        return sum(e.n_params() for e in self.encoders)

    def forward(self, obs: Sequence):
        _check_obs(self.encoders, obs)
        encs, caches = zip(*(mlp_forward(e, o) for e, o in zip(self.encoders, obs)))
        z, pcache = mlp_forward(self.projection, np.concatenate(encs, axis=-1))
        return z, (caches, pcache)

    def backward(self, cache, grad_z) -> list[np.ndarray]:
        caches, pcache = cache
        pg, g_cat = mlp_backward(self.projection, pcache, grad_z)
        grads = []
        d = self.encoders[0].spec.out_dim
        for i, (e, c) in enumerate(zip(self.encoders, caches)):
            eg, _ = mlp_backward(e, c, g_cat[..., i * d : (i + 1) * d], need_input_grad=False)
            grads += eg.tensors()
        return grads + pg.tensors()


def fuse_linear_comb(model: LinearCombFusion, obs) -> np.ndarray:
    return model.forward(obs)[0]


def fuse_concat(model: ConcatFusion, obs) -> np.ndarray:
    return model.forward(obs)[0]


def build_linear_comb(input_dims, d_z=16, hidden=(64, 64), seed=0, bounded=True) -> LinearCombFusion:
    rng = np.random.default_rng(seed)
    out = "tanh" if bounded else "identity"
    encoders = [mlp_init(MlpSpec((d, *hidden, d_z), output_activation=out), rng.integers(2**32)) for d in input_dims]
    return LinearCombFusion(encoders, np.full((len(encoders), d_z), 1.0 / len(encoders)))


def build_concat(input_dims, d_z=16, hidden=(64, 64), seed=0, bounded=True) -> ConcatFusion:
    rng = np.random.default_rng(seed)
    encoders = [mlp_init(MlpSpec((d, *hidden, d_z)), rng.integers(2**32)) for d in input_dims]
    out = "tanh" if bounded else "identity"
    projection = mlp_init(MlpSpec((len(encoders) * d_z, d_z), output_activation=out), rng.integers(2**32))
    return ConcatFusion(encoders, projection)


class StatelessEstimator:
    """Same call interface as :class:`metricmm.model.MetricEstimator`; no recursion."""

    def __init__(self, model):
        self.model = model

    def reset(self) -> None:
        pass

    def __call__(self, obs, prev_action=None) -> np.ndarray:
        return self.model.forward(obs)[0]
