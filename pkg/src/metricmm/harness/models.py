"""Building, saving and restoring estimators and agents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metricmm.baselines import (
    ConcatFusion,
    LinearCombFusion,
    StatelessEstimator,
    build_concat,
    build_linear_comb,
)
from metricmm.checkpoint import load_checkpoint, save_checkpoint
from metricmm.envs.gridworld import one_hot_action
from metricmm.errors import ConfigurationError
from metricmm.model import LossWeights, MetricEstimator, MetricMM, build_metricmm
from metricmm.sac import SacAgent, SacConfig

FORMAT_VERSION = 1


def action_encoder(env_name: str, max_action: float = 2.0):
    """Map one environment action to the transition-model input vector."""
    if env_name == "gridworld":
        return lambda a: one_hot_action(int(np.asarray(a).reshape(-1)[0]))
    return lambda a: np.asarray(a, dtype=np.float64).reshape(-1) / max_action


def encode_actions(env_name: str, actions: np.ndarray, max_action: float = 2.0) -> np.ndarray:
    a = np.asarray(actions)
    if env_name == "gridworld":
        return one_hot_action(a.reshape(-1).astype(np.int64))
    return a.reshape(a.shape[0], -1).astype(np.float64) / max_action


def build_representation(cfg, input_dims, action_dim: int, seed):
    if cfg.estimator.startswith("metricmm"):
        return build_metricmm(
            input_dims, action_dim, cfg.d_z, cfg.hidden, cfg.transition_hidden, seed, cfg.delta, cfg.loss_weights()
        )
    if cfg.estimator == "linearcomb":
        return build_linear_comb(input_dims, cfg.d_z, cfg.hidden, seed)
    if cfg.estimator == "concat":
        return build_concat(input_dims, cfg.d_z, cfg.hidden, seed)
    raise ConfigurationError(f"estimator: unknown estimator {cfg.estimator!r}")


def make_estimator(rep, env_name: str, max_action: float = 2.0):
    if isinstance(rep, MetricMM):
        return MetricEstimator(rep, action_encoder(env_name, max_action))
    return StatelessEstimator(rep)


@dataclass
class RunArtifacts:
    meta: dict
    representation: object
    agent: SacAgent | None


def save_run(path, meta: dict, rep, agent: SacAgent | None) -> None:
    mlps, arrays = {}, {}
    for i, e in enumerate(rep.encoders):
        mlps[f"encoder{i}"] = e
    if isinstance(rep, MetricMM):
        kind = "metricmm"
        mlps["transition"] = rep.transition
        meta = dict(meta, delta=rep.delta, action_dim=rep.action_dim,
                    lambdas=[rep.weights.positive, rep.weights.negative, rep.weights.invariance])
    elif isinstance(rep, LinearCombFusion):
        kind = "linearcomb"
        arrays["mix"] = rep.mix
    elif isinstance(rep, ConcatFusion):
        kind = "concat"
        mlps["projection"] = rep.projection
    else:
        raise ConfigurationError(f"cannot checkpoint {type(rep).__name__}")
    meta = dict(
        meta,
        format_version=FORMAT_VERSION,
        representation_kind=kind,
        n_modalities=len(rep.encoders),
        d_z=int(rep.encoders[0].spec.out_dim) if kind != "concat" else int(rep.projection.spec.out_dim),
        input_dims=[int(e.spec.in_dim) for e in rep.encoders],
    )
    if agent is not None:
        for name, net in agent.networks().items():
            mlps[f"sac.{name}"] = net
        arrays["sac.log_alpha"] = agent.log_alpha
    save_checkpoint(path, meta, mlps, arrays)


def load_run(path) -> RunArtifacts:
    meta, mlps, arrays = load_checkpoint(path)
    n = meta["n_modalities"]
    encoders = [mlps[f"encoder{i}"] for i in range(n)]
    kind = meta["representation_kind"]
    if kind == "metricmm":
        rep = MetricMM(encoders, mlps["transition"], meta["action_dim"], meta["delta"], LossWeights(*meta["lambdas"]))
    elif kind == "linearcomb":
        rep = LinearCombFusion(encoders, arrays["mix"].copy())
    elif kind == "concat":
        rep = ConcatFusion(encoders, mlps["projection"])
    else:
        raise ConfigurationError(f"unknown representation kind {kind!r} in {path}")
    agent = None
    if "sac.actor" in mlps:
        sac_cfg = SacConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in meta["sac"].items()})
        actor = mlps["sac.actor"]
        agent = SacAgent(actor.spec.in_dim, actor.spec.out_dim // 2, meta["max_action"], sac_cfg, 0)
        agent.actor = actor
        agent.critics = [mlps[f"sac.critic{k}"] for k in range(sac_cfg.n_critics)]
        agent.targets = [mlps[f"sac.target{k}"] for k in range(sac_cfg.n_critics)]
        agent.log_alpha = arrays["sac.log_alpha"].copy()
    return RunArtifacts(meta, rep, agent)
