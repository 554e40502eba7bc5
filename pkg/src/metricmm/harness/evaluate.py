"""Corrupted-observation evaluation of trained checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from metricmm.corrupt import (
    CorruptionContext,
    CorruptionKind,
    CorruptionSpec,
    ModalityInfo,
    ObservationCorruptor,
    validate_spec,
)
from metricmm.envs.pendulum import PendulumEnv, PendulumParams
from metricmm.errors import ConfigurationError
from metricmm.harness.config import EvalSpec
from metricmm.harness.csvio import EVAL_COLUMNS, write_csv
from metricmm.harness.models import load_run, make_estimator
from metricmm.harness.train import run_episode, stream

log = logging.getLogger(__name__)

TAG_EVAL_EPISODE, TAG_EVAL_CORRUPT, TAG_BANK = 100, 101, 102
CLEAN = CorruptionSpec(CorruptionKind.FAILURE, 0.0, 1, (0,))


def pendulum_modalities(env: PendulumEnv) -> list[ModalityInfo]:
    ranges = env.modality_ranges()
    return [
        ModalityInfo(image_shape=env.image_shape, value_range=ranges[0], scale=1.0),
        ModalityInfo(image_shape=None, value_range=ranges[1], scale=1.0),
    ]


@dataclass
class LoadedPolicy:
    path: str
    estimator_kind: str
    seed: int
    env: PendulumEnv
    estimator: object
    agent: object


def load_policy(path) -> LoadedPolicy:
    art = load_run(path)
    if art.agent is None or art.meta.get("env") != "pendulum":
        raise ConfigurationError(f"checkpoint {path} has no pendulum policy")
    cfg = art.meta["config"]
    env = PendulumEnv(PendulumParams(sigma=cfg["sigma"]), episode_length=cfg["episode_length"])
    est = make_estimator(art.representation, "pendulum", env.max_action)
    return LoadedPolicy(str(path), art.meta["estimator"], int(art.meta["seed"]), env, est, art.agent)


def observation_bank(policy: LoadedPolicy, size: int, seed: int) -> list[np.ndarray]:
    """Clean observations visited by the trained policy (in-distribution)."""
    env, est, agent = policy.env, policy.estimator, policy.agent
    per_mod = [[] for _ in env.modality_dims]
    ep = 0
    while len(per_mod[0]) < size:
        rng = stream(seed, TAG_BANK, policy.seed, ep)
        obs = env.reset(rng)
        est.reset()
        z = est(obs)
        done = False
        while not done and len(per_mod[0]) < size:
            for k, o in enumerate(obs):
                per_mod[k].append(o)
            a = agent.act(z, rng)
            obs, _, done = env.step(a)
            z = est(obs, a)
        ep += 1
    return [np.array(m) for m in per_mod]


def evaluate_policy(policy: LoadedPolicy, spec: CorruptionSpec | None, episodes: int, seed: int,
                    bank=None, deterministic=True) -> np.ndarray:
    """Returns over ``episodes``; episode k uses the same start state for every spec."""
    modalities = pendulum_modalities(policy.env)
    returns = []
    for k in range(episodes):
        rng = stream(seed, TAG_EVAL_EPISODE, policy.seed, k)
        corruptor = None
        if spec is not None and spec.p > 0:
            ctx = CorruptionContext(modalities, stream(seed, TAG_EVAL_CORRUPT, policy.seed, k), bank)
            corruptor = ObservationCorruptor(spec, ctx)
        returns.append(run_episode(policy.env, policy.estimator, policy.agent, rng, corruptor, deterministic))
    return np.array(returns)


def run_eval(spec: EvalSpec) -> list[dict]:
    policies = [load_policy(p) for p in spec.checkpoints]
    modalities = pendulum_modalities(policies[0].env)
    needs_bank = any(c.kind is CorruptionKind.HALLUCINATION for c in spec.corruptions)
    dummy_bank = [np.zeros((1, d)) for d in policies[0].env.modality_dims] if needs_bank else None
    for c in spec.corruptions:
        validate_spec(c, CorruptionContext(modalities, np.random.default_rng(0), dummy_bank))

    banks = {}
    if needs_bank:
        for pol in policies:
            banks[pol.path] = observation_bank(pol, spec.bank_size, spec.seed)

    rows = []
    kinds = sorted({p.estimator_kind for p in policies})
    for est_kind in kinds:
        group = [p for p in policies if p.estimator_kind == est_kind]
        seeds = ";".join(str(p.seed) for p in group)
        settings = [None] + [c for c in spec.corruptions if c.p > 0]
        for c in settings:
            rets = np.concatenate([
                evaluate_policy(p, c, spec.episodes, spec.seed, banks.get(p.path), spec.deterministic_actions)
                for p in group
            ])
            rows.append({
                "estimator": est_kind,
                "kind": "none" if c is None else c.kind.value,
                "p": 0.0 if c is None else float(c.p),
                "K": 1 if c is None else c.K,
                "targets": "" if c is None else "+".join(map(str, c.targets)),
                "episodes": len(rets),
                "seeds": seeds,
                "return_mean": float(np.mean(rets)),
                "return_std": float(np.std(rets)),
            })
            log.info("%s %s p=%s: %.1f +- %.1f", est_kind, rows[-1]["kind"], rows[-1]["p"], rows[-1]["return_mean"], rows[-1]["return_std"])
    write_csv(spec.out_path, EVAL_COLUMNS, rows)
    return rows


def relative_drop(clean: float, corrupted: float) -> float:
    """``(clean - corrupted) / |clean|``; smaller means more robust."""
    return (clean - corrupted) / abs(clean)
