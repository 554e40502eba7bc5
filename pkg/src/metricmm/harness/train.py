"""Training loops: joint representation + SAC on the pendulum, and
representation-only training on gridworld random walks."""

from __future__ import annotations

import copy
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metricmm.corrupt import forbid_corruption
from metricmm.diffcore import adam_init, adam_step, mlp_backward, mlp_forward
from metricmm.envs.gridworld import GridWorldEnv, load_map
from metricmm.envs.pendulum import PendulumEnv, PendulumParams
from metricmm.errors import NumericalError
from metricmm.harness.config import TrainConfig
from metricmm.harness.csvio import CURVE_COLUMNS, write_csv
from metricmm.harness.models import (
    build_representation,
    encode_actions,
    make_estimator,
    save_run,
)
from metricmm.model import (
    MetricMM,
    RepresentationBatch,
    fuse_idw,
    fuse_idw_backward,
    fused_batch,
    mean_encode,
    predict_transition,
    total_representation_loss,
)
from metricmm.sac import ReplayBuffer, SacAgent

log = logging.getLogger(__name__)

# stream tags for np.random.SeedSequence([seed, tag, ...])
TAG_MODEL, TAG_AGENT, TAG_ENV, TAG_UPDATES, TAG_EVAL, TAG_DATA, TAG_HELDOUT = range(7)


def stream(seed: int, tag: int, *more: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, more)]))


def int_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0])


@dataclass
class TrainResult:
    seed: int
    checkpoint: Path
    curve: Path
    rows: list = field(default_factory=list)


def make_pendulum_env(cfg: TrainConfig) -> PendulumEnv:
    return PendulumEnv(PendulumParams(sigma=cfg.sigma), episode_length=cfg.episode_length)


def run_train(cfg: TrainConfig) -> list[TrainResult]:
    """Train every seed in ``cfg.seeds``; corruption is forbidden throughout."""
    results = []
    with forbid_corruption():
        for seed in cfg.seeds:
            if cfg.env == "gridworld":
                results.append(train_gridworld(cfg, seed))
            else:
                results.append(train_pendulum(cfg, seed))
    return results


def run_episode(env, estimator, agent, rng, corruptor=None, deterministic=True, state=None) -> float:
    """Roll out one episode; the estimator sees (possibly corrupted) observations."""
    obs = env.reset(rng, state)
    estimator.reset()
    if corruptor is not None:
        corruptor.reset()
        obs = corruptor(obs, 0)
    z = estimator(obs)
    total, t, done = 0.0, 0, False
    while not done:
        a = agent.act(z, rng, deterministic=deterministic)
        obs, r, done = env.step(a)
        total += r
        t += 1
        if corruptor is not None:
            obs = corruptor(obs, t)
        z = estimator(obs, a)
    return total


def evaluate(env, estimator, agent, seed: int, episodes: int, corruptor=None, deterministic=True, tag=TAG_EVAL):
    returns = []
    for k in range(episodes):
        rng = stream(seed, tag, k)
        returns.append(run_episode(env, estimator, agent, rng, corruptor, deterministic))
    return np.array(returns)


class PendulumTrainer:
    """One seed of end-to-end training. Kept as a class so tests can step it."""

    def __init__(self, cfg: TrainConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.env = make_pendulum_env(cfg)
        self.eval_env = make_pendulum_env(cfg)
        self.rep = build_representation(cfg, self.env.modality_dims, self.env.action_dim, int_seed(seed, TAG_MODEL))
        self.is_metric = isinstance(self.rep, MetricMM)
        self.agent = SacAgent(cfg.d_z, self.env.action_dim, self.env.max_action, cfg.sac, int_seed(seed, TAG_AGENT))
        self.buffer = ReplayBuffer(cfg.sac.buffer_capacity, self.env.modality_dims, self.env.action_dim)
        lr = cfg.repr_lr if self.is_metric else cfg.sac.critic_lr
        self.rep_opt = adam_init(self.rep.tensors(), lr)
        self.joint_opt = adam_init(self.rep.tensors(), cfg.sac.critic_lr) if (self.is_metric and cfg.joint_gradients) else None
        # slow copy that encodes next states for the bootstrap target of critic-only representations
        self.rep_target = None if self.is_metric else copy.deepcopy(self.rep)
        self.estimator = make_estimator(self.rep, "pendulum", self.env.max_action)
        self.eval_estimator = make_estimator(self.rep, "pendulum", self.env.max_action)
        self.env_rng = stream(seed, TAG_ENV)
        self.update_rng = stream(seed, TAG_UPDATES)
        self.steps = 0
        self.episode_return = 0.0
        self.train_returns: list[float] = []
        self.loss_log: list[dict] = []
        self.rows: list[dict] = []
        # guards parameters when rollout and updates run on separate threads
        self.lock = threading.Lock()
        self.updates_owed = 0
        self.updates_done = 0
        self.workers = 1
        self._begin_episode()

    def _begin_episode(self):
        self.obs = self.env.reset(self.env_rng)
        with self.lock:
            self.estimator.reset()
            self.z = self.estimator(self.obs)
        self.first = True
        self.episode_return = 0.0

    def env_step(self):
        if self.steps < self.cfg.warmup_steps:
            a = self.env_rng.uniform(-self.env.max_action, self.env.max_action, size=self.env.action_dim)
        else:
            with self.lock:
                a = self.agent.act(self.z, self.env_rng)
        next_obs, r, done = self.env.step(a)
        # time-limit ends are not terminal
        self.buffer.push(self.obs, a, r, next_obs, False, first=self.first)
        self.first = False
        self.episode_return += r
        with self.lock:
            self.z = self.estimator(next_obs, a)
        self.obs = next_obs
        self.steps += 1
        if len(self.buffer) >= self.cfg.sac.batch_size and self.steps > self.cfg.warmup_steps // 2:
            self.updates_owed += 1
        if done:
            self.train_returns.append(self.episode_return)
            self._begin_episode()

    def update(self) -> dict:
        cfg = self.cfg
        batch = self.buffer.sample(cfg.sac.batch_size, self.update_rng)
        acts = encode_actions("pendulum", batch.actions, self.env.max_action)
        report = {}
        if self.is_metric:
            rep = self.rep
            loss = total_representation_loss(
                rep, RepresentationBatch(batch.obs, acts, batch.next_obs), rng=self.update_rng
            )
            z_prev = mean_encode(rep.encoders, batch.prev_obs)
            z_hat = predict_transition(rep.transition, z_prev, encode_actions("pendulum", batch.prev_actions, self.env.max_action))
            z_t = fused_batch(rep, loss.enc_t, z_hat, batch.has_prev)
            z_next = fuse_idw(loss.enc_next, loss.z_next_pred, rep.delta)
            adam_step(rep.tensors(), loss.grads, self.rep_opt, rep.names())
            sac = self.agent.update(z_t, batch.actions, batch.rewards, z_next, batch.dones, self.update_rng,
                                    need_latent_grad=cfg.joint_gradients)
            if cfg.joint_gradients:
                self._joint_encoder_step(batch, z_hat, sac["latent_grad"])
            report.update(loss.parts, repr_loss_total=loss.total)
        else:
            z_t, cache = self.rep.forward(batch.obs)
            z_next = self.rep_target.forward(batch.next_obs)[0]
            sac = self.agent.update(z_t, batch.actions, batch.rewards, z_next, batch.dones, self.update_rng,
                                    need_latent_grad=True)
            grads = self.rep.backward(cache, sac["latent_grad"])
            adam_step(self.rep.tensors(), grads, self.rep_opt, self.rep.names())
            tau = cfg.sac.encoder_tau
            for t, o in zip(self.rep_target.tensors(), self.rep.tensors()):
                t *= 1.0 - tau
                t += tau * o
        report.update({k: sac[k] for k in ("critic_loss", "actor_loss", "alpha")})
        return report

    def _joint_encoder_step(self, batch, z_hat, latent_grad):
        """Push the critic's latent gradient through fusion into the encoders (prediction held fixed)."""
        rep = self.rep
        outs = [mlp_forward(e, o) for e, o in zip(rep.encoders, batch.obs)]
        enc = np.stack([o[0] for o in outs])
        g_enc, _ = fuse_idw_backward(enc, z_hat, rep.delta, latent_grad)
        no_prev = ~np.asarray(batch.has_prev, dtype=bool)
        g_enc[:, no_prev] = latent_grad[no_prev] / rep.n_modalities
        grads = []
        for k, (e, (_, cache)) in enumerate(zip(rep.encoders, outs)):
            eg, _ = mlp_backward(e, cache, g_enc[k], need_input_grad=False)
            grads += eg.tensors()
        grads += [np.zeros_like(t) for t in rep.transition.tensors()]
        adam_step(rep.tensors(), grads, self.joint_opt, rep.names())

    def train_step(self):
        self.env_step()
        if self.updates_owed > self.updates_done:
            self.loss_log.append(self.update())
            self.updates_done += 1

    def learner_step(self) -> bool:
        """One update from the learner thread if one is owed; False when idle."""
        if self.updates_owed <= self.updates_done:
            return False
        with self.lock:
            self.loss_log.append(self.update())
        self.updates_done += 1
        return True

    def evaluate(self, episodes=None) -> np.ndarray:
        return evaluate(self.eval_env, self.eval_estimator, self.agent, self.seed, episodes or self.cfg.eval_episodes)

    def curve_row(self, epoch: int) -> dict:
        with self.lock:
            return self._curve_row(epoch)

    def _curve_row(self, epoch: int) -> dict:
        rets = self.evaluate()
        recent = self.train_returns[-10:]
        row = {
            "epoch": epoch,
            "env_steps": self.steps,
            "train_return": float(np.mean(recent)) if recent else math.nan,
            "eval_return_mean": float(np.mean(rets)),
            "eval_return_std": float(np.std(rets)),
        }
        for key in ("critic_loss", "actor_loss", "alpha", "repr_loss_total", "L_T", "L_plus", "L_minus", "L_inv"):
            vals = [d[key] for d in self.loss_log if key in d]
            row[key] = float(np.mean(vals)) if vals else math.nan
        self.loss_log = []
        return row

    def meta(self) -> dict:
        return {
            "env": "pendulum",
            "estimator": self.cfg.estimator,
            "seed": self.seed,
            "env_steps": self.steps,
            "max_action": self.env.max_action,
            "sac": self.cfg.to_dict()["sac"],
            "config": self.cfg.to_dict(),
            "workers": self.workers,
        }


def train_pendulum(cfg: TrainConfig, seed: int) -> TrainResult:
    out = Path(cfg.out_dir)
    ckpt = out / f"{cfg.estimator}_seed{seed}.ckpt"
    curve = out / f"{cfg.estimator}_seed{seed}_curve.csv"
    tr = PendulumTrainer(cfg, seed)
    threaded = cfg.sac.workers > 1 and not cfg.deterministic
    if cfg.sac.workers > 1 and cfg.deterministic:
        log.warning("deterministic mode runs one worker; ignoring workers=%d", cfg.sac.workers)
    tr.workers = 2 if threaded else 1
    start = time.perf_counter()
    epoch = 0
    save_run(ckpt, tr.meta(), tr.rep, tr.agent)
    write_csv(curve, CURVE_COLUMNS, tr.rows)

    def checkpoint_if_due():
        nonlocal epoch
        if tr.steps % cfg.eval_every == 0 or tr.steps == cfg.total_steps:
            epoch += 1
            row = tr.curve_row(epoch)
            tr.rows.append(row)
            log.info("seed %d step %d eval %.1f (%.0fs)", seed, tr.steps, row["eval_return_mean"], time.perf_counter() - start)
            with tr.lock:
                save_run(ckpt, tr.meta(), tr.rep, tr.agent)
            write_csv(curve, CURVE_COLUMNS, tr.rows)

    try:
        if threaded:
            _run_threaded(tr, cfg, checkpoint_if_due)
        else:
            while tr.steps < cfg.total_steps:
                tr.train_step()
                checkpoint_if_due()
    except NumericalError:
        log.error("numerical failure at step %d; keeping last checkpoint %s", tr.steps, ckpt)
        raise
    return TrainResult(seed, ckpt, curve, tr.rows)


def _run_threaded(tr: PendulumTrainer, cfg: TrainConfig, checkpoint_if_due, max_lag: int = 64) -> None:
    """Rollout on this thread, gradient updates on a second one; they meet at the replay buffer."""
    stop = threading.Event()
    failure: list[BaseException] = []

    def learner():
        try:
            while not stop.is_set() or tr.updates_done < tr.updates_owed:
                if not tr.learner_step():
                    time.sleep(1e-4)
        except BaseException as exc:  # surfaced on the rollout thread
            failure.append(exc)
            stop.set()

    worker = threading.Thread(target=learner, name="sac-learner", daemon=True)
    worker.start()
    try:
        while tr.steps < cfg.total_steps and not failure:
            while tr.updates_owed - tr.updates_done > max_lag and not failure:
                time.sleep(1e-4)
            tr.env_step()
            if tr.steps % cfg.eval_every == 0 or tr.steps == cfg.total_steps:
                while tr.updates_done < tr.updates_owed and not failure:
                    time.sleep(1e-4)
            checkpoint_if_due()
    finally:
        stop.set()
        worker.join()
    if failure:
        raise failure[0]


# ---------------------------------------------------------------- gridworld


@dataclass
class WalkData:
    obs: tuple[np.ndarray, np.ndarray]
    actions: np.ndarray  # int
    next_obs: tuple[np.ndarray, np.ndarray]
    cells: np.ndarray  # (T, 2) position before the step
    next_cells: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def random_walks(env: GridWorldEnv, transitions: int, rng: np.random.Generator) -> WalkData:
    obs_a, obs_b, nxt_a, nxt_b, acts, cells, ncells = [], [], [], [], [], [], []
    while len(acts) < transitions:
        obs = env.reset(rng)
        done = False
        while not done and len(acts) < transitions:
            a = int(rng.integers(env.n_actions))
            cells.append(env.world.position)
            nxt, _, done = env.step(a)
            ncells.append(env.world.position)
            obs_a.append(obs[0]); obs_b.append(obs[1])
            nxt_a.append(nxt[0]); nxt_b.append(nxt[1])
            acts.append(a)
            obs = nxt
    return WalkData(
        (np.array(obs_a), np.array(obs_b)),
        np.array(acts, dtype=np.int64),
        (np.array(nxt_a), np.array(nxt_b)),
        np.array(cells, dtype=np.int64),
        np.array(ncells, dtype=np.int64),
    )


def make_grid_env(cfg: TrainConfig) -> GridWorldEnv:
    walls = load_map(cfg.map_path) if cfg.map_path else None
    return GridWorldEnv(walls, episode_length=cfg.walk_length)


def train_gridworld(cfg: TrainConfig, seed: int) -> TrainResult:
    """Representation-only training on random-walk transitions (no RL)."""
    out = Path(cfg.out_dir)
    ckpt = out / f"{cfg.estimator}_gridworld_seed{seed}.ckpt"
    curve = out / f"{cfg.estimator}_gridworld_seed{seed}_curve.csv"
    env = make_grid_env(cfg)
    rep = build_representation(cfg, env.modality_dims, env.action_dim, int_seed(seed, TAG_MODEL))
    opt = adam_init(rep.tensors(), cfg.repr_lr)
    data = random_walks(env, cfg.dataset_transitions, stream(seed, TAG_DATA)) if cfg.gradient_steps else None
    rng = stream(seed, TAG_UPDATES)
    rows, acc = [], []
    meta = {"env": "gridworld", "estimator": cfg.estimator, "seed": seed, "walls": env.walls.astype(int).tolist(),
            "config": cfg.to_dict()}
    save_run(ckpt, dict(meta, gradient_steps=0), rep, None)
    write_csv(curve, CURVE_COLUMNS, rows)
    for step in range(1, cfg.gradient_steps + 1):
        idx = rng.integers(0, len(data), size=cfg.repr_batch_size)
        batch = RepresentationBatch(
            tuple(o[idx] for o in data.obs), encode_actions("gridworld", data.actions[idx]), tuple(o[idx] for o in data.next_obs)
        )
        loss = total_representation_loss(rep, batch, rng=rng)
        adam_step(rep.tensors(), loss.grads, opt, rep.names())
        acc.append(dict(loss.parts, repr_loss_total=loss.total))
        if step % cfg.eval_every == 0 or step == cfg.gradient_steps:
            row = {c: math.nan for c in CURVE_COLUMNS}
            row.update(epoch=len(rows) + 1, env_steps=len(data))
            for key in ("repr_loss_total", "L_T", "L_plus", "L_minus", "L_inv"):
                row[key] = float(np.mean([d[key] for d in acc]))
            acc = []
            rows.append(row)
            save_run(ckpt, dict(meta, gradient_steps=step), rep, None)
            write_csv(curve, CURVE_COLUMNS, rows)
    return TrainResult(seed, ckpt, curve, rows)
