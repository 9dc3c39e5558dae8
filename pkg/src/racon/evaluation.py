"""Evaluation metrics: velocity error, termination/length rates, feature-space
Fréchet distance, and multimodality, plus episode recording and reporting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import features
from .motion import CharacterFrame, CharacterState, Goal
from .retrieval import RetrievalEnv
from .surrogate import SurrogateEnv
from .training import TrainNets, action_to_control, ctrl_observation, retr_observation
from .nets import forward, squash_actions

REPORT_KEYS = ("mve", "mve_retr", "trate", "len", "fid", "mmodality")


@dataclass
class EpisodeRecord:
    """Per-tick post-step states with the goal active at each tick."""

    states: list[CharacterState]
    goals: list[Goal]
    terminated: bool
    max_ticks: int

    def __post_init__(self):
        if len(self.states) != len(self.goals):
            raise ValueError("states and goals must align tick-for-tick")
        if len(self.states) > self.max_ticks:
            raise ValueError("episode exceeds its configured maximum length")

    def to_dict(self) -> dict:
        return {
            "terminated": self.terminated,
            "max_ticks": self.max_ticks,
            "states": [
                {"t": s.time_index, **s.frame.to_dict()} for s in self.states
            ],
            "goals": [
                {"v": g.desired_velocity.tolist(), "facing": g.desired_facing}
                for g in self.goals
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        states = [
            CharacterState(frame=CharacterFrame.from_dict(sd), time_index=sd["t"])
            for sd in d["states"]
        ]
        goals = [Goal(desired_velocity=gd["v"], desired_facing=gd["facing"]) for gd in d["goals"]]
        return cls(states=states, goals=goals, terminated=d["terminated"], max_ticks=d["max_ticks"])


def save_records(records: list[EpisodeRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")


def load_records(path) -> list[EpisodeRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(EpisodeRecord.from_dict(json.loads(line)))
    return records


def mve(records: list[EpisodeRecord]) -> float:
    """Mean horizontal velocity error against the commanded velocity, m/s."""
    if not records:
        raise ValueError("mve needs at least one episode record")
    total = 0.0
    count = 0
    for rec in records:
        for state, goal in zip(rec.states, rec.goals):
            total += float(
                np.linalg.norm(state.frame.root_linvel[:2] - goal.desired_velocity)
            )
            count += 1
    return total / count


def trate_len(records: list[EpisodeRecord]) -> tuple[float, float]:
    """(termination rate %, mean episode length as % of maximum)."""
    if not records:
        raise ValueError("trate_len needs at least one episode record")
    trate = 100.0 * sum(1 for r in records if r.terminated) / len(records)
    length = 100.0 * float(np.mean([len(r.states) / r.max_ticks for r in records]))
    return trate, length


def states_to_disc_features(states: list[CharacterState]) -> np.ndarray:
    """Sliding three-state windows featurized for the discriminator space."""
    if len(states) < 3:
        raise ValueError("need at least 3 states for one transition window")
    return np.stack(
        [
            features.extract_disc_observation((states[i], states[i + 1], states[i + 2]))
            for i in range(len(states) - 2)
        ]
    )


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def feature_fid(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Gaussian Fréchet distance between two feature sample sets (n, D).

    Matrix square roots use symmetric eigendecompositions with negative
    eigenvalues clamped to zero, so the result is finite and >= 0.
    """
    set_a = np.asarray(set_a, dtype=float)
    set_b = np.asarray(set_b, dtype=float)
    dim = set_a.shape[1]
    if set_a.shape[0] <= dim or set_b.shape[0] <= dim:
        raise ValueError(f"each set needs more than {dim} samples for a full-rank covariance")
    mu_a, mu_b = set_a.mean(axis=0), set_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(set_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(set_b, rowvar=False))
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise ValueError("non-finite covariance")
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    fid = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(fid, 0.0)


def mmodality(run_harness, goals: list[Goal], m: int) -> float:
    """Mean pairwise distance between episode-mean features across m repeats.

    run_harness(goal, repeat_index) must return the episode-mean feature
    vector of one rollout; repeats differ only in their noise seed.
    """
    if m < 2:
        raise ValueError("multimodality needs at least 2 repeats per goal")
    per_goal = []
    for goal in goals:
        feats = np.stack([np.asarray(run_harness(goal, rep), dtype=float) for rep in range(m)])
        dists = [
            float(np.linalg.norm(feats[i] - feats[j]))
            for i in range(m)
            for j in range(i + 1, m)
        ]
        per_goal.append(float(np.mean(dists)))
    return float(np.mean(per_goal))


def emit_report(metrics: dict, path) -> None:
    if not metrics:
        raise ValueError("refusing to write an empty report")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- policy evaluation harness ---------------------------------------------------


def run_policy_episodes(
    nets: TrainNets,
    retr_env: RetrievalEnv,
    env_params,
    reward_weights,
    db_name: str,
    goals: list[Goal],
    episodes: int,
    ticks: int,
    seed: int,
    sample_actions: bool = True,
) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """Roll the trained policies; returns (simulated, retrieved-stream) records.

    Goals cycle over the provided list; each episode keeps one goal. The
    retrieved stream reuses the simulated episode's goal trace so its velocity
    error is measured against the same commands.
    """
    sim_records: list[EpisodeRecord] = []
    retr_records: list[EpisodeRecord] = []
    db = retr_env.databases[db_name]
    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, ep]))
        env = SurrogateEnv(env_params, rng)
        goal = goals[ep % len(goals)]
        state = env.reset(db)
        retr_state = retr_env.initial_state(db_name)
        sim_states: list[CharacterState] = []
        ref_states: list[CharacterState] = []
        goal_trace: list[Goal] = []
        terminated = False
        for _ in range(ticks):
            if retr_state.retr_flag:
                robs = retr_observation(state, goal, db.norm_stats)
                rmean, _ = forward(nets.retr_pi.mlp, robs[None, :])
                if sample_actions:
                    rz = rmean + np.exp(nets.retr_pi.log_std) * rng.standard_normal(rmean.shape)
                else:
                    rz = rmean
                weights = squash_actions(rz)[0]
            else:
                weights = None
            retr_state, ref = retr_env.step(retr_state, weights, state, goal)
            obs = ctrl_observation(state, goal, ref)
            mean, _ = forward(nets.ctrl_pi.mlp, obs[None, :])
            if sample_actions:
                z = mean + np.exp(nets.ctrl_pi.log_std) * rng.standard_normal(mean.shape)
            else:
                z = mean
            state = env.step(state, action_to_control(z[0], state.frame.yaw))
            sim_states.append(state)
            ref_states.append(ref)
            goal_trace.append(goal)
            if env.termination_check(state, goal):
                terminated = True
                break
        sim_records.append(
            EpisodeRecord(states=sim_states, goals=goal_trace, terminated=terminated, max_ticks=ticks)
        )
        retr_records.append(
            EpisodeRecord(
                states=ref_states, goals=goal_trace, terminated=terminated, max_ticks=ticks
            )
        )
    return sim_records, retr_records


def episode_mean_features(record: EpisodeRecord) -> np.ndarray:
    return states_to_disc_features(record.states).mean(axis=0)


def evaluate_checkpoint_metrics(
    nets: TrainNets,
    retr_env: RetrievalEnv,
    env_params,
    reward_weights,
    db_name: str,
    episodes: int = 100,
    ticks: int = 300,
    seed: int = 0,
    goal_speed_max: float = 2.0,
    mmodality_goals: int = 4,
    mmodality_repeats: int = 4,
) -> dict:
    """Full metric sweep mirroring the headline evaluation table."""
    goal_rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    goals = []
    for _ in range(episodes):
        angle = goal_rng.uniform(-math.pi, math.pi)
        speed = goal_rng.uniform(0.0, goal_speed_max)
        goals.append(Goal(desired_velocity=(speed * math.cos(angle), speed * math.sin(angle))))
    sim_records, retr_records = run_policy_episodes(
        nets, retr_env, env_params, reward_weights, db_name, goals, episodes, ticks, seed
    )
    trate, length = trate_len(sim_records)

    sim_feats = np.concatenate([states_to_disc_features(r.states) for r in sim_records])
    db = retr_env.databases[db_name]
    demo_states = [
        [CharacterState(frame=f, time_index=i) for i, f in enumerate(c.frames)]
        for c in db.clips
    ]
    demo_feats = np.concatenate([states_to_disc_features(s) for s in demo_states])

    def harness(goal: Goal, rep: int) -> np.ndarray:
        sim, _ = run_policy_episodes(
            nets,
            retr_env,
            env_params,
            reward_weights,
            db_name,
            [goal],
            episodes=1,
            ticks=min(ticks, 120),
            seed=seed * 10_000 + rep + 1,
        )
        return episode_mean_features(sim[0])

    mm = mmodality(harness, goals[:mmodality_goals], mmodality_repeats)
    return {
        "mve": mve(sim_records),
        "mve_retr": mve(retr_records),
        "trate": trate,
        "len": length,
        "fid": feature_fid(sim_feats, demo_feats),
        "mmodality": mm,
        "episodes": episodes,
        "ticks": ticks,
    }
