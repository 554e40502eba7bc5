"""Soft Actor-Critic on latent states, written against :mod:`metricmm.diffcore`.

Critics see actions rescaled to [-1, 1]; the environment sees
``max_action * tanh(u)``.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from metricmm.diffcore import (
    MlpParams,
    MlpSpec,
    adam_init,
    adam_step,
    mlp_apply,
    mlp_backward,
    mlp_forward,
    mlp_init,
)
from metricmm.errors import ConfigurationError, NumericalError, ShapeError, UsageError

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
TANH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    alpha_lr: float = 3e-4
    buffer_capacity: int = 100_000
    batch_size: int = 256
    init_alpha: float = 0.1
    n_critics: int = 2
    target_entropy: float | None = None  # None -> -action_dim
    hidden: tuple[int, ...] = (64, 64)
    workers: int = 1
    encoder_tau: float = 0.05  # target-encoder rate for representations trained only by the critic

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError(f"tau must be in (0, 1], got {self.tau}")
        if not 0.0 < self.encoder_tau <= 1.0:
            raise ConfigurationError(f"encoder_tau must be in (0, 1], got {self.encoder_tau}")
        if self.buffer_capacity < self.batch_size:
            raise ConfigurationError("buffer capacity must be >= batch size")
        if self.n_critics < 1:
            raise ConfigurationError("need at least one critic")
        if self.init_alpha <= 0:
            raise ConfigurationError("initial alpha must be > 0")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def full_scale(cls, **overrides) -> SacConfig:
        """Networks at 3 x 256 instead of the desk-scale 2 x 64."""
        return cls(hidden=(256, 256, 256), **overrides)


# ---------------------------------------------------------------- replay


@dataclass
class ReplayBatch:
    obs: tuple[np.ndarray, ...]
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: tuple[np.ndarray, ...]
    dones: np.ndarray
    prev_obs: tuple[np.ndarray, ...]
    prev_actions: np.ndarray
    has_prev: np.ndarray
    indices: np.ndarray


class ReplayBuffer:
    """Ring buffer of transitions holding raw multimodal observations.

    Storage grows on demand up to ``capacity``. Each record also remembers
    whether the record pushed just before it is its time predecessor, so
    samples can carry ``(o_{t-1}, a_{t-1})`` for the recursive estimator.
    Push and sample take a lock, so one writer and one reader thread may
    share a buffer.
    """

    def __init__(self, capacity: int, modality_dims: Sequence[int], action_dim: int, dtype=np.float32):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be >= 1")
        self.capacity = int(capacity)
        self.modality_dims = tuple(int(d) for d in modality_dims)
        self.action_dim = int(action_dim)
        self.dtype = dtype
        self._alloc = 0
        self._obs = [np.zeros((0, d), dtype) for d in self.modality_dims]
        self._next = [np.zeros((0, d), dtype) for d in self.modality_dims]
        self._act = np.zeros((0, self.action_dim))
        self._rew = np.zeros(0)
        self._done = np.zeros(0)
        self._linked = np.zeros(0, dtype=bool)
        self.pos = 0
        self.size = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def _grow(self, need: int) -> None:
        new = min(self.capacity, max(need, 2 * self._alloc, 1024))
        extra = new - self._alloc

        def pad(a):
            return np.concatenate([a, np.zeros((extra,) + a.shape[1:], a.dtype)])

        self._obs = [pad(a) for a in self._obs]
        self._next = [pad(a) for a in self._next]
        self._act, self._rew, self._done, self._linked = map(pad, (self._act, self._rew, self._done, self._linked))
        self._alloc = new

    def push(self, obs, action, reward, next_obs, done, first: bool = False) -> None:
        if len(obs) != len(self.modality_dims) or len(next_obs) != len(self.modality_dims):
            raise ShapeError("observation modality count does not match the buffer")
        with self._lock:
            i = self.pos
            if i >= self._alloc:
                self._grow(i + 1)
            for k in range(len(self.modality_dims)):
                self._obs[k][i] = obs[k]
                self._next[k][i] = next_obs[k]
            self._act[i] = np.asarray(action, dtype=np.float64).reshape(-1)
            self._rew[i] = reward
            self._done[i] = float(done)
            self._linked[i] = (not first) and self.size > 0
            self.pos = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def contents(self) -> list[int]:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return list(range(self.size))
        return [(self.pos + k) % self.capacity for k in range(self.capacity)]

    def sample(self, batch_size: int, rng: np.random.Generator) -> ReplayBatch:
        with self._lock:
            if self.size < batch_size:
                raise UsageError(f"cannot sample {batch_size} from a buffer holding {self.size}")
            idx = rng.integers(0, self.size, size=batch_size)
            prev = (idx - 1) % self.capacity
            oldest = self.pos if self.size == self.capacity else 0
            has_prev = self._linked[idx] & (idx != oldest)
            prev = np.where(has_prev, prev, idx)
            as64 = lambda a: np.asarray(a, dtype=np.float64)
            return ReplayBatch(
                obs=tuple(as64(a[idx]) for a in self._obs),
                actions=self._act[idx].copy(),
                rewards=self._rew[idx].copy(),
                next_obs=tuple(as64(a[idx]) for a in self._next),
                dones=self._done[idx].copy(),
                prev_obs=tuple(as64(a[prev]) for a in self._obs),
                prev_actions=self._act[prev].copy(),
                has_prev=has_prev,
                indices=idx,
            )

    def observations(self, modality: int, limit: int | None = None) -> np.ndarray:
        """Stored observations of one modality (used as a hallucination bank)."""
        data = self._obs[modality][: self.size]
        return np.asarray(data if limit is None else data[:limit], dtype=np.float64)


def replay_push(buffer: ReplayBuffer, obs, action, reward, next_obs, done, first=False) -> None:
    buffer.push(obs, action, reward, next_obs, done, first)


def replay_sample(buffer: ReplayBuffer, rng: np.random.Generator, batch_size: int) -> ReplayBatch:
    return buffer.sample(batch_size, rng)


# ---------------------------------------------------------------- policy


@dataclass
class ActionSample:
    action: np.ndarray  # scaled to [-max_action, max_action]
    log_prob: np.ndarray  # (B,)
    squashed: np.ndarray  # tanh(u), in [-1, 1]
    mean: np.ndarray
    log_std: np.ndarray
    noise: np.ndarray
    clamped: np.ndarray  # log_std hit a bound (no gradient)
    cache: object = None


def gaussian_tanh_log_prob(noise, log_std, squashed, max_action: float) -> np.ndarray:
    """log pi(a|z) for ``a = max_action * tanh(mean + exp(log_std) * noise)``."""
    per_dim = -0.5 * noise**2 - log_std - HALF_LOG_2PI - np.log(1.0 - squashed**2 + TANH_EPS)
    return per_dim.sum(axis=-1) - noise.shape[-1] * math.log(max_action)


def sample_action(
    actor: MlpParams,
    z,
    rng: np.random.Generator | None,
    max_action: float = 1.0,
    deterministic: bool = False,
    noise: np.ndarray | None = None,
    keep_cache: bool = False,
) -> ActionSample:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    if not np.all(np.isfinite(zb)):
        raise NumericalError("non-finite latent passed to the actor")
    if keep_cache:
        out, cache = mlp_forward(actor, zb)
    else:
        out, cache = mlp_apply(actor, zb), None
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite actor output")
    d = out.shape[1] // 2
    mean, raw_log_std = out[:, :d], out[:, d:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    clamped = raw_log_std != log_std
    if deterministic:
        eps = np.zeros_like(mean)
    elif noise is not None:
        eps = np.asarray(noise, dtype=np.float64).reshape(mean.shape)
    else:
        eps = rng.standard_normal(mean.shape)
    u = mean + np.exp(log_std) * eps
    t = np.tanh(u)
    logp = gaussian_tanh_log_prob(eps, log_std, t, max_action)
    s = ActionSample(max_action * t, logp, t, mean, log_std, eps, clamped, cache)
    if single:
        s.action, s.log_prob = s.action[0], s.log_prob[0]
    return s


# ---------------------------------------------------------------- agent


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    if target.spec != online.spec:
        raise ShapeError("soft_update needs networks of the same shape")
    for t, o in zip(target.tensors(), online.tensors()):
        t *= 1.0 - tau
        t += tau * o
    return target


def min_target_q(critics_target: Sequence[MlpParams], z, a_scaled) -> np.ndarray:
    x = np.concatenate([z, a_scaled], axis=1)
    return np.min([mlp_apply(c, x)[:, 0] for c in critics_target], axis=0)


def compute_targets(
    rewards, dones, z_next, critics_target, actor, alpha: float, gamma: float, rng, max_action: float = 1.0
) -> np.ndarray:
    """``r + gamma * (1 - done) * (min_k Q'_k(z', a') - alpha * log pi(a'|z'))``, a' freshly sampled."""
    nxt = sample_action(actor, z_next, rng, max_action)
    q = min_target_q(critics_target, np.atleast_2d(z_next), np.atleast_2d(nxt.squashed))
    return np.asarray(rewards) + gamma * (1.0 - np.asarray(dones)) * (q - alpha * nxt.log_prob)


def critic_loss_and_grads(critics: Sequence[MlpParams], z, a_scaled, y, need_latent_grad: bool = False):
    """Sum over critics of ``mean((Q_k(z, a) - y)^2)`` and its gradients.

    Returns ``(loss, grads, latent_grad)`` where ``grads`` is flat over
    critics and ``latent_grad`` is d loss / dz (or None).
    """
    B = z.shape[0]
    x = np.concatenate([z, a_scaled], axis=1)
    grads, loss = [], 0.0
    latent_grad = np.zeros_like(z) if need_latent_grad else None
    for c in critics:
        q, cache = mlp_forward(c, x)
        err = q[:, 0] - y
        loss += float(np.mean(err * err))
        g, g_in = mlp_backward(c, cache, (2.0 * err / B)[:, None], need_input_grad=need_latent_grad)
        grads += g.tensors()
        if need_latent_grad:
            latent_grad += g_in[:, : z.shape[1]]
    return loss, grads, latent_grad


def actor_loss_and_grads(actor: MlpParams, critics: Sequence[MlpParams], z, s: ActionSample, alpha: float):
    """``mean(alpha * log pi - min_k Q_k(z, a))`` for the reparameterised sample ``s``.

    ``s`` must come from :func:`sample_action` with ``keep_cache=True``.
    Critics see actions in [-1, 1]; the latent is treated as a constant.
    """
    B, d_z = z.shape
    xa = np.concatenate([z, s.squashed], axis=1)
    outs = [mlp_forward(c, xa) for c in critics]
    qs = np.stack([o[0][:, 0] for o in outs])
    pick = np.argmin(qs, axis=0)
    q_min = qs[pick, np.arange(B)]
    dq_dt = np.zeros_like(s.squashed)
    for k, (c, (_, cache)) in enumerate(zip(critics, outs)):
        mask = (pick == k).astype(np.float64)[:, None]
        if not mask.any():
            continue
        _, g_in = mlp_backward(c, cache, mask)
        dq_dt += g_in[:, d_z:]
    t = s.squashed
    one_m = 1.0 - t * t
    # log pi depends on u through -log(1 - tanh(u)^2 + eps)
    dlogp_du = 2.0 * t * one_m / (one_m + TANH_EPS)
    std = np.exp(s.log_std)
    dJ_du = (alpha * dlogp_du - dq_dt * one_m) / B
    g_log_std = np.where(s.clamped, 0.0, dJ_du * std * s.noise - alpha / B)
    grads, _ = mlp_backward(actor, s.cache, np.concatenate([dJ_du, g_log_std], axis=1), need_input_grad=False)
    return float(np.mean(alpha * s.log_prob - q_min)), grads


class SacAgent:
    def __init__(self, latent_dim: int, action_dim: int, max_action: float, config: SacConfig, seed=0):
        self.config = config
        self.latent_dim = latent_dim
        self.action_dim = action_dim
        self.max_action = float(max_action)
        self.target_entropy = -float(action_dim) if config.target_entropy is None else config.target_entropy
        rng = np.random.default_rng(seed)
        self.actor = mlp_init(MlpSpec((latent_dim, *config.hidden, 2 * action_dim)), rng.integers(2**32))
        self.critics = [
            mlp_init(MlpSpec((latent_dim + action_dim, *config.hidden, 1)), rng.integers(2**32))
            for _ in range(config.n_critics)
        ]
        self.targets = [c.copy() for c in self.critics]
        self.log_alpha = np.array([math.log(config.init_alpha)])
        self.actor_opt = adam_init(self.actor.tensors(), config.actor_lr)
        self.critic_opt = adam_init(self._critic_tensors(), config.critic_lr)
        self.alpha_opt = adam_init([self.log_alpha], config.alpha_lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def _critic_tensors(self) -> list[np.ndarray]:
        return [t for c in self.critics for t in c.tensors()]

    def _critic_names(self) -> list[str]:
        return [n for k, c in enumerate(self.critics) for n in c.names(f"critic{k}.")]

    def act(self, z, rng, deterministic: bool = False) -> np.ndarray:
        return sample_action(self.actor, z, rng, self.max_action, deterministic).action

    def update(self, z, actions, rewards, z_next, dones, rng, need_latent_grad: bool = False) -> dict:
        """Critic step, actor step, temperature step, then target averaging.

        ``actions`` are environment-scale. With ``need_latent_grad`` the report
        carries ``latent_grad`` = d(critic loss)/dz for end-to-end training.
        """
        cfg = self.config
        z = np.asarray(z, dtype=np.float64)
        B = z.shape[0]
        a_in = np.asarray(actions, dtype=np.float64).reshape(B, -1) / self.max_action
        alpha = self.alpha
        try:
            y = compute_targets(rewards, dones, z_next, self.targets, self.actor, alpha, cfg.gamma, rng, self.max_action)

            critic_loss, critic_grads, latent_grad = critic_loss_and_grads(
                self.critics, z, a_in, y, need_latent_grad
            )
            adam_step(self._critic_tensors(), critic_grads, self.critic_opt, self._critic_names())

            s = sample_action(self.actor, z, rng, self.max_action, keep_cache=True)
            actor_loss, actor_grads = actor_loss_and_grads(self.actor, self.critics, z, s, alpha)
            adam_step(self.actor.tensors(), actor_grads.tensors(), self.actor_opt, self.actor.names("actor."))

            # temperature
            alpha_grad = -np.mean(s.log_prob + self.target_entropy)
            adam_step([self.log_alpha], [np.array([alpha_grad])], self.alpha_opt, ["log_alpha"])

            for tgt, c in zip(self.targets, self.critics):
                soft_update(tgt, c, cfg.tau)
        except NumericalError as exc:
            raise NumericalError(f"SAC update {self.updates}: {exc}") from exc
        self.updates += 1
        return {
            "critic_loss": critic_loss,
            "actor_loss": actor_loss,
            "alpha": self.alpha,
            "entropy": float(-np.mean(s.log_prob)),
            "latent_grad": latent_grad,
        }

    def networks(self) -> dict[str, MlpParams]:
        out = {"actor": self.actor}
        for k, (c, t) in enumerate(zip(self.critics, self.targets)):
            out[f"critic{k}"] = c
            out[f"target{k}"] = t
        return out
