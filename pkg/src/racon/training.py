"""Two-level training loop: a retriever deciding every H ticks and a controller
acting every tick, both optimized with clipped-surrogate PPO and GAE, sharing
one retrieval-augmented discriminator for their prior rewards.

Observation layouts (E = 4 end effectors):
  controller: own pose block (37) + goal block (3) + reference block (41) = 81
  retriever:  own pose block (37) + goal block (3) + normalized raw query (30) = 70
The controller action is 16-dim: planar acceleration (2), yaw rate (1), height
target (1) and end effector targets (12), emitted as offsets around a neutral
standing pose.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import features, geom, kernels
from .features import NormStats
from .motion import CharacterState, Goal, MotionClip
from .motion_prior import (
    DiscBuffers,
    assemble_demo_window,
    disc_probs,
    update_discriminator,
)
from .nets import (
    AdamState,
    GaussianPolicy,
    Mlp,
    adam_step,
    backward,
    forward,
    mlp_init,
    policy_entropy,
    policy_init,
    policy_log_prob,
    squash_actions,
)
from .retrieval import RetrievalDatabase, RetrievalEnv, load_database
from .rewards import (
    RewardWeights,
    controller_reward,
    goal_reward,
    prior_reward,
    reference_reward,
    retriever_reward,
)
from .surrogate import ControlAction, EnvParams, SurrogateEnv

ACTION_DIM = 16
NEUTRAL_ENDPOINTS = np.array(
    [
        [0.0, 0.32, -0.12],
        [0.0, -0.32, -0.12],
        [0.0, 0.11, -0.86],
        [0.0, -0.11, -0.86],
    ]
)
NEUTRAL_ENDPOINTS.setflags(write=False)

CHECKPOINT_VERSION = 1


# --- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    databases: list = field(default_factory=list)  # .radb paths
    seed: int = 0
    iterations: int = 50
    env_count: int = 16
    horizon: int = 150
    retrieval_period: int = 15
    gamma: float = 0.97
    gae_lambda: float = 0.95
    lr: float = 5e-5
    ppo_clip: float = 0.2
    epochs: int = 4
    minibatch: int = 512
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    hidden: tuple = (256, 128)
    init_log_std: float = -1.0
    v_max: float = 8.0
    goal_speed_max: float = 2.0
    goal_resample_ticks: tuple = (90, 300)
    disc_steps: int = 8
    disc_batch: int = 256
    disc_lr: float = 1e-4
    gp_weight: float = 10.0
    buffer_capacity: int = 50_000
    reward: RewardWeights = field(default_factory=RewardWeights)
    env: EnvParams = field(default_factory=EnvParams)
    learnable_retriever: bool = True
    ra_disc: bool = True
    disc_window: tuple = (0, 0)  # extra (past, future) states per window
    checkpoint_every: int = 25

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.ppo_clip <= 0.0:
            raise ValueError("ppo_clip must be > 0")
        if self.goal_speed_max > self.v_max:
            raise ValueError("goal_speed_max cannot exceed v_max")
        self.hidden = tuple(self.hidden)
        self.goal_resample_ticks = tuple(self.goal_resample_ticks)
        self.disc_window = tuple(self.disc_window)
        if len(self.disc_window) != 2 or any(v < 0 for v in self.disc_window):
            raise ValueError("disc_window must be two non-negative extensions")
        if not self.ra_disc and self.disc_window != (0, 0):
            raise ValueError("window extension requires the RA discriminator arm")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["goal_resample_ticks"] = list(self.goal_resample_ticks)
        d["disc_window"] = list(self.disc_window)
        d["env"]["height_range"] = list(self.env.height_range)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "reward" in d and isinstance(d["reward"], dict):
            d["reward"] = RewardWeights(**d["reward"])
        if "env" in d and isinstance(d["env"], dict):
            env = dict(d["env"])
            if "height_range" in env:
                env["height_range"] = tuple(env["height_range"])
            d["env"] = EnvParams(**env)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(config.to_json().encode("utf-8")).hexdigest()


# --- observations and the action adapter ----------------------------------------


def goal_block(frame, goal: Goal) -> np.ndarray:
    yaw = frame.yaw
    vel = geom.rotate_xy(goal.desired_velocity, -yaw)
    face_err = geom.wrap_pi(features.desired_facing(goal, yaw) - yaw)
    return np.concatenate([vel, [face_err]])


def reference_block(frame, ref_frame) -> np.ndarray:
    yaw = frame.yaw
    dpos = geom.rotate_xy(ref_frame.root_pos - frame.root_pos, -yaw)
    dyaw = geom.wrap_pi(ref_frame.yaw - yaw)
    rot_local = geom.quat_to_matrix(
        geom.quat_mul(geom.quat_from_yaw(-yaw), ref_frame.root_rot)
    )
    return np.concatenate(
        [
            dpos,
            [dyaw],
            geom.rotate_xy(ref_frame.root_linvel, -yaw),
            ref_frame.root_angvel,
            [ref_frame.height],
            rot_local[:, 0],
            rot_local[:, 1],
            ref_frame.endpoints.ravel(),
            ref_frame.endpoint_vels.ravel(),
        ]
    )


def ctrl_observation(state: CharacterState, goal: Goal, ref: CharacterState) -> np.ndarray:
    frame = state.frame
    return np.concatenate(
        [
            features.state_block(frame, frame.yaw),
            goal_block(frame, goal),
            reference_block(frame, ref.frame),
        ]
    )


def retr_observation(state: CharacterState, goal: Goal, stats: NormStats) -> np.ndarray:
    frame = state.frame
    raw = features.extract_raw_query(state, goal)
    return np.concatenate(
        [features.state_block(frame, frame.yaw), goal_block(frame, goal), stats.normalize(raw)]
    )


CTRL_OBS_DIM = 37 + 3 + 41
RETR_OBS_DIM = 37 + 3 + features.KEY_DIM


def action_to_control(z: np.ndarray, yaw: float = 0.0) -> ControlAction:
    """Map a raw policy output to actuator targets around the neutral pose.

    The policy's observations are yaw-local, so its planar acceleration is
    commanded in the character's yaw frame and rotated to world here.
    """
    z = np.asarray(z, dtype=float)
    return ControlAction(
        target_root_accel=geom.rotate_xy(3.0 * z[0:2], yaw),
        target_yaw_rate=1.5 * float(z[2]),
        target_height=0.9 + 0.25 * float(z[3]),
        target_endpoints=NEUTRAL_ENDPOINTS + 0.4 * z[4:16].reshape(4, 3),
    )


# --- GAE -------------------------------------------------------------------------


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """Raw (unnormalized) GAE advantages and returns.

    values has one more entry than rewards: the bootstrap value at the horizon
    end. Terminal steps cut both the bootstrap and the trace.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones)
    if values.shape[0] != rewards.shape[0] + 1 or dones.shape[0] != rewards.shape[0]:
        raise ValueError("expected len(values) == len(rewards) + 1 == len(dones) + 1")
    not_done = 1.0 - dones.astype(float)
    adv = kernels.gae_scan(rewards, values, not_done, float(gamma), float(lam))
    return adv, adv + values[:-1]


# --- PPO -------------------------------------------------------------------------


@dataclass
class PpoStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    mean_kl: float = 0.0
    clip_frac: float = 0.0


def policy_loss_and_grads(
    policy: GaussianPolicy,
    obs: np.ndarray,
    z: np.ndarray,
    logp_old: np.ndarray,
    adv: np.ndarray,
    clip_eps: float,
    entropy_coef: float,
):
    """Clipped-surrogate loss with exact gradients for the mean net and log_std."""
    mean, cache = forward(policy.mlp, obs)
    std = np.exp(policy.log_std)
    t = (z - mean) / std
    logp_new = policy_log_prob(policy, z, mean)
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    loss = -float(np.mean(surrogate)) - entropy_coef * policy_entropy(policy)

    n = obs.shape[0]
    active = unclipped <= clipped  # gradient flows through the unclipped branch
    g_logp = -(active * ratio * adv) / n
    g_mean = g_logp[:, None] * (t / std)
    g_logstd = np.sum(g_logp[:, None] * (t * t - 1.0), axis=0) - entropy_coef
    grads, _ = backward(cache, g_mean)
    kl = float(np.mean(logp_old - logp_new))
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip_eps))
    return loss, grads, g_logstd, kl, clip_frac


def value_loss_and_grads(mlp: Mlp, obs: np.ndarray, returns: np.ndarray):
    v, cache = forward(mlp, obs)
    err = v[:, 0] - returns
    loss = float(np.mean(err * err))
    grads, _ = backward(cache, (2.0 * err / err.shape[0])[:, None])
    return loss, grads


def ppo_update(
    policy: GaussianPolicy,
    value_mlp: Mlp,
    policy_adam: AdamState,
    value_adam: AdamState,
    batch: dict,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> PpoStats:
    """Multi-epoch minibatch PPO step on one policy/value pair."""
    obs = batch["obs"]
    z = batch["z"]
    logp_old = batch["logp"]
    adv = batch["adv"]
    returns = batch["returns"]
    n = obs.shape[0]
    if n == 0:
        return PpoStats()
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    stats = PpoStats(entropy=policy_entropy(policy))
    updates = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start : start + cfg.minibatch]
            loss, grads, g_logstd, kl, clip_frac = policy_loss_and_grads(
                policy, obs[idx], z[idx], logp_old[idx], adv[idx], cfg.ppo_clip, cfg.entropy_coef
            )
            adam_step(policy.params(), grads.params() + [g_logstd], policy_adam, cfg.lr)
            policy.clamp_log_std()
            v_loss, v_grads = value_loss_and_grads(value_mlp, obs[idx], returns[idx])
            v_scaled = [cfg.value_coef * g for g in v_grads.params()]
            adam_step(value_mlp.params(), v_scaled, value_adam, cfg.lr)
            stats.policy_loss += loss
            stats.value_loss += v_loss
            stats.mean_kl += kl
            stats.clip_frac += clip_frac
            updates += 1
    if updates:
        stats.policy_loss /= updates
        stats.value_loss /= updates
        stats.mean_kl /= updates
        stats.clip_frac /= updates
    return stats


# --- rollout ---------------------------------------------------------------------


@dataclass
class TrainNets:
    ctrl_pi: GaussianPolicy
    ctrl_v: Mlp
    retr_pi: GaussianPolicy
    retr_v: Mlp
    disc: Mlp


def init_nets(cfg: TrainConfig, rng: np.random.Generator) -> TrainNets:
    return TrainNets(
        ctrl_pi=policy_init(
            CTRL_OBS_DIM, ACTION_DIM, rng, hidden=cfg.hidden, log_std=cfg.init_log_std
        ),
        ctrl_v=mlp_init(CTRL_OBS_DIM, 1, rng, hidden=cfg.hidden),
        retr_pi=policy_init(
            RETR_OBS_DIM,
            features.KEY_DIM,
            rng,
            hidden=cfg.hidden,
            log_std=cfg.init_log_std,
            squash=True,
        ),
        retr_v=mlp_init(RETR_OBS_DIM, 1, rng, hidden=cfg.hidden),
        disc=mlp_init(features.disc_window_dim(*cfg.disc_window), 1, rng, hidden=cfg.hidden),
    )


def init_adams(nets: TrainNets) -> dict:
    return {
        "ctrl_pi": AdamState.for_params(nets.ctrl_pi.params()),
        "ctrl_v": AdamState.for_params(nets.ctrl_v.params()),
        "retr_pi": AdamState.for_params(nets.retr_pi.params()),
        "retr_v": AdamState.for_params(nets.retr_v.params()),
        "disc": AdamState.for_params(nets.disc.params()),
    }


@dataclass
class RolloutBatch:
    ctrl_obs: np.ndarray
    ctrl_z: np.ndarray
    ctrl_logp: np.ndarray
    ctrl_value: np.ndarray
    ctrl_reward: np.ndarray
    ctrl_done: np.ndarray
    ctrl_bootstrap: np.ndarray
    retr_obs: list
    retr_z: list
    retr_logp: list
    retr_value: list
    retr_reward: list
    retr_done: list
    retr_bootstrap: np.ndarray
    goal_r: np.ndarray
    goal_r_tilde: np.ndarray
    prior_retr: np.ndarray
    speed_err_sim: np.ndarray
    speed_err_retr: np.ndarray
    episodes_started: int
    episodes_terminated: int
    db_episodes: dict
    goal_gaps: list


def goal_performance(batch: RolloutBatch) -> float:
    """Mean per-tick goal reward over the rollout (the logged learning signal)."""
    return float(np.mean(batch.goal_r))


@dataclass
class _Slot:
    env: SurrogateEnv
    goal_rng: np.random.Generator
    db_name: str = ""
    state: CharacterState | None = None
    retr_state: object = None
    goal: Goal | None = None
    goal_timer: int = 0
    pending: dict | None = None
    nonra_prev: tuple | None = None  # (tick, s_t) awaiting the next simulated state
    history: list = field(default_factory=list)  # past sim states for extended windows


def _sample_goal(rng: np.random.Generator, cfg: TrainConfig) -> tuple[Goal, int]:
    angle = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(0.0, cfg.goal_speed_max)
    gap = int(rng.integers(cfg.goal_resample_ticks[0], cfg.goal_resample_ticks[1] + 1))
    return Goal(desired_velocity=(speed * math.cos(angle), speed * math.sin(angle))), gap


def hrl_rollout(
    nets: TrainNets,
    envs: list[SurrogateEnv],
    retr_env: RetrievalEnv,
    buffers: DiscBuffers,
    cfg: TrainConfig,
    policy_rng: np.random.Generator,
    goal_rngs: list[np.random.Generator],
    db_rng: np.random.Generator,
) -> RolloutBatch:
    """Collect cfg.horizon synchronized ticks from every environment."""
    n_env = len(envs)
    horizon = cfg.horizon
    w = cfg.reward
    before, after = cfg.disc_window
    db_names = sorted(retr_env.databases)

    ctrl_obs = np.zeros((n_env, horizon, CTRL_OBS_DIM))
    ctrl_z = np.zeros((n_env, horizon, ACTION_DIM))
    ctrl_logp = np.zeros((n_env, horizon))
    ctrl_value = np.zeros((n_env, horizon))
    ctrl_reward = np.zeros((n_env, horizon))
    ctrl_done = np.zeros((n_env, horizon), dtype=bool)
    goal_r = np.zeros((n_env, horizon))
    goal_r_tilde = np.zeros((n_env, horizon))
    prior_retr_trace = np.zeros((n_env, horizon))
    speed_err_sim = np.zeros((n_env, horizon))
    speed_err_retr = np.zeros((n_env, horizon))

    retr_records = [
        {"obs": [], "z": [], "logp": [], "value": [], "reward": [], "done": []}
        for _ in range(n_env)
    ]
    retr_bootstrap = np.zeros(n_env)

    episodes_started = 0
    episodes_terminated = 0
    db_episodes: dict[str, int] = {name: 0 for name in db_names}
    goal_gaps: list[int] = []

    slots: list[_Slot] = []
    for e in range(n_env):
        slot = _Slot(env=envs[e], goal_rng=goal_rngs[e])
        slot.db_name = db_names[int(db_rng.integers(0, len(db_names)))]
        slot.state = slot.env.reset(retr_env.databases[slot.db_name])
        slot.retr_state = retr_env.initial_state(slot.db_name)
        slot.goal, slot.goal_timer = _sample_goal(slot.goal_rng, cfg)
        goal_gaps.append(slot.goal_timer)
        slots.append(slot)
        episodes_started += 1
        db_episodes[slot.db_name] += 1

    def finalize_pending(e: int, done: bool):
        slot = slots[e]
        if slot.pending is None:
            return
        rec = retr_records[e]
        rec["obs"].append(slot.pending["obs"])
        rec["z"].append(slot.pending["z"])
        rec["logp"].append(slot.pending["logp"])
        rec["value"].append(slot.pending["value"])
        rec["reward"].append(slot.pending["reward"])
        rec["done"].append(done)
        slot.pending = None

    def past_states(e: int) -> tuple:
        if before == 0:
            return ()
        slot = slots[e]
        pad_src = slot.history[0] if slot.history else slot.state
        return tuple([pad_src] * (before - len(slot.history)) + slot.history)

    def flush_nonra(e: int, third: CharacterState):
        slot = slots[e]
        if slot.nonra_prev is None:
            return
        tick, s_prev, s_cur = slot.nonra_prev
        obs = features.extract_disc_observation((s_prev, s_cur, third))
        d = disc_probs(nets.disc, obs[None, :])[0]
        ctrl_reward[e, tick] += w.prior_ctrl * prior_reward(d, w.alpha, w.eps)
        buffers.fake.push(obs)
        slot.nonra_prev = None

    for t in range(horizon):
        # Retrieval decisions for the envs whose flag is up.
        decide = [e for e in range(n_env) if slots[e].retr_state.retr_flag]
        weights_by_env: dict[int, np.ndarray] = {}
        if decide:
            robs = np.stack(
                [
                    retr_observation(
                        slots[e].state,
                        slots[e].goal,
                        retr_env.databases[slots[e].db_name].norm_stats,
                    )
                    for e in decide
                ]
            )
            for e in decide:
                finalize_pending(e, done=False)
            if cfg.learnable_retriever:
                rmean, _ = forward(nets.retr_pi.mlp, robs)
                std = np.exp(nets.retr_pi.log_std)
                rz = rmean + std * policy_rng.standard_normal(rmean.shape)
                rlogp = policy_log_prob(nets.retr_pi, rz, rmean)
                weights = squash_actions(rz)
                rvalues, _ = forward(nets.retr_v, robs)
                for i, e in enumerate(decide):
                    weights_by_env[e] = weights[i]
                    slots[e].pending = {
                        "obs": robs[i],
                        "z": rz[i],
                        "logp": float(rlogp[i]),
                        "value": float(rvalues[i, 0]),
                        "reward": 0.0,
                    }
            else:
                ones = np.ones(features.KEY_DIM)
                for i, e in enumerate(decide):
                    weights_by_env[e] = ones

        refs: list[CharacterState] = []
        for e, slot in enumerate(slots):
            slot.retr_state, ref = retr_env.step(
                slot.retr_state,
                weights_by_env.get(e),
                slot.state,
                slot.goal,
            )
            refs.append(ref)

        # Controller actions, batched across environments.
        obs_t = np.stack(
            [ctrl_observation(slot.state, slot.goal, refs[e]) for e, slot in enumerate(slots)]
        )
        mean, _ = forward(nets.ctrl_pi.mlp, obs_t)
        std = np.exp(nets.ctrl_pi.log_std)
        z_t = mean + std * policy_rng.standard_normal(mean.shape)
        logp_t = policy_log_prob(nets.ctrl_pi, z_t, mean)
        values_t, _ = forward(nets.ctrl_v, obs_t)

        next_states = []
        terms = []
        for e, slot in enumerate(slots):
            nxt = slot.env.step(slot.state, action_to_control(z_t[e], slot.state.frame.yaw))
            next_states.append(nxt)
            terms.append(slot.env.termination_check(nxt, slot.goal))

        # Prior rewards from the discriminator on this tick's fake windows.
        lookaheads = [
            tuple(retr_env.peek_ahead(slot.retr_state, k) for k in range(1, 2 + after))
            for slot in slots
        ]
        retr_fake = np.stack(
            [
                features.extract_disc_observation(
                    past_states(e) + (slots[e].state, refs[e]) + lookaheads[e]
                )
                for e in range(n_env)
            ]
        )
        retr_prior = np.array(
            [prior_reward(d, w.alpha, w.eps) for d in disc_probs(nets.disc, retr_fake)]
        )
        if cfg.ra_disc:
            ctrl_fake = np.stack(
                [
                    features.extract_disc_observation(
                        past_states(e) + (slots[e].state, next_states[e]) + lookaheads[e]
                    )
                    for e in range(n_env)
                ]
            )
            ctrl_prior = np.array(
                [prior_reward(d, w.alpha, w.eps) for d in disc_probs(nets.disc, ctrl_fake)]
            )
            buffers.fake.push(ctrl_fake)
            buffers.fake.push(retr_fake)
        else:
            ctrl_prior = np.zeros(n_env)  # filled one tick late via flush_nonra

        for e, slot in enumerate(slots):
            nxt = next_states[e]
            goal = slot.goal
            r_g = goal_reward(goal, nxt, w)
            r_ref = reference_reward(nxt, refs[e], w)
            r_g_tilde = goal_reward(goal, refs[e], w)

            ctrl_obs[e, t] = obs_t[e]
            ctrl_z[e, t] = z_t[e]
            ctrl_logp[e, t] = logp_t[e]
            ctrl_value[e, t] = values_t[e, 0]
            goal_r[e, t] = r_g
            goal_r_tilde[e, t] = r_g_tilde
            prior_retr_trace[e, t] = retr_prior[e]
            speed_err_sim[e, t] = float(
                np.linalg.norm(nxt.frame.root_linvel[:2] - goal.desired_velocity)
            )
            speed_err_retr[e, t] = float(
                np.linalg.norm(refs[e].frame.root_linvel[:2] - goal.desired_velocity)
            )
            if cfg.ra_disc:
                ctrl_reward[e, t] = controller_reward(r_g, r_ref, ctrl_prior[e], w)
            else:
                # Prior lands when the next simulated state is known.
                ctrl_reward[e, t] = w.goal * r_g + w.reference * r_ref
                flush_nonra(e, nxt)
                slot.nonra_prev = (t, slot.state, nxt)

            if slot.pending is not None:
                slot.pending["reward"] += retriever_reward(r_g_tilde, retr_prior[e], w)

            if terms[e]:
                ctrl_done[e, t] = True
                episodes_terminated += 1
                finalize_pending(e, done=True)
                if slot.nonra_prev is not None:
                    # No continuation exists; fall back to duplicating the last state.
                    flush_nonra(e, slot.nonra_prev[2])
                slot.db_name = db_names[int(db_rng.integers(0, len(db_names)))]
                slot.state = slot.env.reset(retr_env.databases[slot.db_name])
                slot.retr_state = retr_env.initial_state(slot.db_name)
                slot.goal, slot.goal_timer = _sample_goal(slot.goal_rng, cfg)
                goal_gaps.append(slot.goal_timer)
                slot.history.clear()
                episodes_started += 1
                db_episodes[slot.db_name] += 1
            else:
                if before > 0:
                    slot.history.append(slot.state)
                    if len(slot.history) > before:
                        del slot.history[0]
                slot.state = nxt
                slot.goal_timer -= 1
                if slot.goal_timer <= 0:
                    slot.goal, slot.goal_timer = _sample_goal(slot.goal_rng, cfg)
                    goal_gaps.append(slot.goal_timer)

    # Horizon end: bootstrap values and retriever finalization.
    ctrl_bootstrap = np.zeros(n_env)
    final_obs = []
    for e, slot in enumerate(slots):
        if slot.nonra_prev is not None:
            flush_nonra(e, slot.nonra_prev[2])
        ref = retr_env.peek_next(slot.retr_state)
        final_obs.append(ctrl_observation(slot.state, slot.goal, ref))
    final_values, _ = forward(nets.ctrl_v, np.stack(final_obs))
    for e in range(n_env):
        if not ctrl_done[e, -1]:
            ctrl_bootstrap[e] = final_values[e, 0]

    for e, slot in enumerate(slots):
        if slot.pending is None:
            retr_bootstrap[e] = 0.0
            continue
        if slot.retr_state.retr_flag:
            # The span is complete; bootstrap from a fresh decision observation.
            finalize_pending(e, done=False)
            obs = retr_observation(
                slot.state, slot.goal, retr_env.databases[slot.db_name].norm_stats
            )
            v, _ = forward(nets.retr_v, obs[None, :])
            retr_bootstrap[e] = float(v[0, 0])
        else:
            # Partial span: drop it and bootstrap from its starting value.
            retr_bootstrap[e] = slot.pending["value"]
            slot.pending = None

    return RolloutBatch(
        ctrl_obs=ctrl_obs,
        ctrl_z=ctrl_z,
        ctrl_logp=ctrl_logp,
        ctrl_value=ctrl_value,
        ctrl_reward=ctrl_reward,
        ctrl_done=ctrl_done,
        ctrl_bootstrap=ctrl_bootstrap,
        retr_obs=[np.array(r["obs"]) for r in retr_records],
        retr_z=[np.array(r["z"]) for r in retr_records],
        retr_logp=[np.array(r["logp"]) for r in retr_records],
        retr_value=[np.array(r["value"]) for r in retr_records],
        retr_reward=[np.array(r["reward"]) for r in retr_records],
        retr_done=[np.array(r["done"], dtype=bool) for r in retr_records],
        retr_bootstrap=retr_bootstrap,
        goal_r=goal_r,
        goal_r_tilde=goal_r_tilde,
        prior_retr=prior_retr_trace,
        speed_err_sim=speed_err_sim,
        speed_err_retr=speed_err_retr,
        episodes_started=episodes_started,
        episodes_terminated=episodes_terminated,
        db_episodes=db_episodes,
        goal_gaps=goal_gaps,
    )


# --- training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list
    nets: TrainNets
    adams: dict
    config: TrainConfig
    buffers: DiscBuffers
    checkpoint_path: str | None = None
    databases: dict | None = None


def _iteration_rngs(cfg: TrainConfig, iteration: int):
    def rng(*tag):
        return np.random.default_rng(np.random.SeedSequence([cfg.seed, iteration, *tag]))

    env_rngs = [rng(100, e) for e in range(cfg.env_count)]
    goal_rngs = [rng(200, e) for e in range(cfg.env_count)]
    return {
        "envs": env_rngs,
        "goals": goal_rngs,
        "policy": rng(1),
        "db": rng(2),
        "disc": rng(3),
        "shuffle_ctrl": rng(4),
        "shuffle_retr": rng(5),
    }


def demo_matrix(clips: list[MotionClip], before: int = 0, after: int = 0) -> np.ndarray:
    """All demonstration transition windows, one observation row each."""
    rows = []
    span = 3 + before + after
    for clip in clips:
        for t in range(before, len(clip.frames) - span + 1 + before):
            rows.append(assemble_demo_window(clip, t, before, after).obs)
    return np.stack(rows)


def load_databases(cfg: TrainConfig) -> dict[str, RetrievalDatabase]:
    dbs = {}
    for path in cfg.databases:
        db = load_database(path)
        dbs[db.name] = db
    return dbs


def run_iteration(
    nets: TrainNets,
    adams: dict,
    envs: list[SurrogateEnv],
    retr_env: RetrievalEnv,
    buffers: DiscBuffers,
    cfg: TrainConfig,
    iteration: int,
) -> dict:
    """One rollout/update cycle; fully seeded by (cfg.seed, iteration)."""
    rngs = _iteration_rngs(cfg, iteration)
    for e, env in enumerate(envs):
        env.rng = rngs["envs"][e]
    batch = hrl_rollout(
        nets, envs, retr_env, buffers, cfg, rngs["policy"], rngs["goals"], rngs["db"]
    )

    disc_stats = update_discriminator(
        buffers,
        nets.disc,
        adams["disc"],
        cfg.disc_steps,
        rngs["disc"],
        lr=cfg.disc_lr,
        batch_size=cfg.disc_batch,
        gp_weight=cfg.gp_weight,
    )

    n_env, horizon = batch.ctrl_reward.shape
    adv = np.zeros_like(batch.ctrl_reward)
    ret = np.zeros_like(batch.ctrl_reward)
    for e in range(n_env):
        values = np.concatenate([batch.ctrl_value[e], [batch.ctrl_bootstrap[e]]])
        adv[e], ret[e] = compute_gae(
            batch.ctrl_reward[e], values, batch.ctrl_done[e], cfg.gamma, cfg.gae_lambda
        )
    ctrl_batch = {
        "obs": batch.ctrl_obs.reshape(-1, CTRL_OBS_DIM),
        "z": batch.ctrl_z.reshape(-1, ACTION_DIM),
        "logp": batch.ctrl_logp.ravel(),
        "adv": adv.ravel(),
        "returns": ret.ravel(),
    }
    ctrl_stats = ppo_update(
        nets.ctrl_pi,
        nets.ctrl_v,
        adams["ctrl_pi"],
        adams["ctrl_v"],
        ctrl_batch,
        cfg,
        rngs["shuffle_ctrl"],
    )

    retr_stats = PpoStats()
    if cfg.learnable_retriever:
        gamma_retr = cfg.gamma**cfg.retrieval_period
        r_obs, r_z, r_logp, r_adv, r_ret = [], [], [], [], []
        for e in range(n_env):
            if batch.retr_reward[e].shape[0] == 0:
                continue
            values = np.concatenate([batch.retr_value[e], [batch.retr_bootstrap[e]]])
            a, r = compute_gae(
                batch.retr_reward[e], values, batch.retr_done[e], gamma_retr, cfg.gae_lambda
            )
            r_obs.append(batch.retr_obs[e])
            r_z.append(batch.retr_z[e])
            r_logp.append(batch.retr_logp[e])
            r_adv.append(a)
            r_ret.append(r)
        if r_obs:
            retr_batch = {
                "obs": np.concatenate(r_obs),
                "z": np.concatenate(r_z),
                "logp": np.concatenate(r_logp),
                "adv": np.concatenate(r_adv),
                "returns": np.concatenate(r_ret),
            }
            retr_stats = ppo_update(
                nets.retr_pi,
                nets.retr_v,
                adams["retr_pi"],
                adams["retr_v"],
                retr_batch,
                cfg,
                rngs["shuffle_retr"],
            )

    return {
        "iteration": iteration,
        "goal_return": goal_performance(batch),
        "disc_real": disc_stats.demo_mean,
        "disc_fake": disc_stats.fake_mean,
        "disc_loss": disc_stats.loss,
        "disc_gp": disc_stats.gp_penalty,
        "trate": 100.0 * batch.episodes_terminated / max(1, batch.episodes_started),
        "mve_sim": float(np.mean(batch.speed_err_sim)),
        "mve_retr": float(np.mean(batch.speed_err_retr)),
        "ctrl_kl": ctrl_stats.mean_kl,
        "ctrl_clip_frac": ctrl_stats.clip_frac,
        "ctrl_policy_loss": ctrl_stats.policy_loss,
        "ctrl_value_loss": ctrl_stats.value_loss,
        "retr_kl": retr_stats.mean_kl,
        "retr_policy_loss": retr_stats.policy_loss,
        "db_episodes": dict(batch.db_episodes),
        "episodes": batch.episodes_started,
    }


def train(
    cfg: TrainConfig,
    out_dir: str | None = None,
    databases: dict[str, RetrievalDatabase] | None = None,
    resume_from: str | None = None,
    log_fn=None,
) -> TrainResult:
    """Full training run; every random draw descends from (seed, iteration)."""
    if databases is None:
        databases = load_databases(cfg)
    if not databases:
        raise ValueError("no retrieval databases configured")
    retr_env = RetrievalEnv(databases, period=cfg.retrieval_period)
    envs = [
        SurrogateEnv(cfg.env, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0, e])))
        for e in range(cfg.env_count)
    ]

    start_iteration = 0
    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        nets, adams, buffers = bundle.nets, bundle.adams, bundle.buffers
        start_iteration = bundle.iteration
    else:
        nets = init_nets(cfg, np.random.default_rng(np.random.SeedSequence([cfg.seed, 999])))
        adams = init_adams(nets)
        buffers = DiscBuffers.create(
            features.disc_window_dim(*cfg.disc_window), cfg.buffer_capacity
        )
        demo = demo_matrix(
            [c for db in databases.values() for c in db.clips], *cfg.disc_window
        )
        buffers.demo.push(demo)

    metrics: list[dict] = []
    checkpoint_path = None
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a", encoding="utf-8")
    try:
        for iteration in range(start_iteration, cfg.iterations):
            record = run_iteration(nets, adams, envs, retr_env, buffers, cfg, iteration)
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if log_fn is not None:
                log_fn(record)
            if out_dir is not None and (
                (iteration + 1) % cfg.checkpoint_every == 0 or iteration + 1 == cfg.iterations
            ):
                checkpoint_path = os.path.join(out_dir, f"checkpoint_{iteration + 1:06d}.npz")
                save_checkpoint(checkpoint_path, nets, adams, cfg, iteration + 1, buffers)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(
        metrics=metrics,
        nets=nets,
        adams=adams,
        config=cfg,
        buffers=buffers,
        checkpoint_path=checkpoint_path,
        databases=databases,
    )


# --- checkpoints --------------------------------------------------------------------


def _pack_mlp(arrays: dict, prefix: str, mlp: Mlp) -> None:
    arrays[f"{prefix}.layers"] = np.array(len(mlp.weights))
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"{prefix}.w{i}"] = w
        arrays[f"{prefix}.b{i}"] = b


def _unpack_mlp(data, prefix: str) -> Mlp:
    n = int(data[f"{prefix}.layers"])
    return Mlp(
        weights=[data[f"{prefix}.w{i}"].copy() for i in range(n)],
        biases=[data[f"{prefix}.b{i}"].copy() for i in range(n)],
    )


def _pack_adam(arrays: dict, prefix: str, state: AdamState) -> None:
    arrays[f"{prefix}.steps"] = np.array(state.step)
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        arrays[f"{prefix}.m{i}"] = m
        arrays[f"{prefix}.v{i}"] = v


def _unpack_adam(data, prefix: str, n_params: int) -> AdamState:
    return AdamState(
        m=[data[f"{prefix}.m{i}"].copy() for i in range(n_params)],
        v=[data[f"{prefix}.v{i}"].copy() for i in range(n_params)],
        step=int(data[f"{prefix}.steps"]),
    )


@dataclass
class CheckpointBundle:
    nets: TrainNets
    adams: dict
    config: TrainConfig
    iteration: int
    buffers: DiscBuffers


def save_checkpoint(
    path,
    nets: TrainNets,
    adams: dict,
    cfg: TrainConfig,
    iteration: int,
    buffers: DiscBuffers | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    _pack_mlp(arrays, "ctrl_pi", nets.ctrl_pi.mlp)
    arrays["ctrl_pi.log_std"] = nets.ctrl_pi.log_std
    _pack_mlp(arrays, "ctrl_v", nets.ctrl_v)
    _pack_mlp(arrays, "retr_pi", nets.retr_pi.mlp)
    arrays["retr_pi.log_std"] = nets.retr_pi.log_std
    _pack_mlp(arrays, "retr_v", nets.retr_v)
    _pack_mlp(arrays, "disc", nets.disc)
    for name, adam in adams.items():
        _pack_adam(arrays, f"adam.{name}", adam)
    if buffers is not None:
        for tag, buf in (("demo", buffers.demo), ("fake", buffers.fake)):
            st = buf.state_dict()
            arrays[f"buffer.{tag}.data"] = st["data"]
            arrays[f"buffer.{tag}.meta"] = np.array([st["size"], st["cursor"], buf.capacity])
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path) -> CheckpointBundle:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = TrainConfig.from_dict(meta["config"])
        if config_hash(cfg) != meta["config_hash"]:
            raise ValueError("checkpoint config hash mismatch: file is corrupt or edited")
        nets = TrainNets(
            ctrl_pi=GaussianPolicy(
                mlp=_unpack_mlp(data, "ctrl_pi"), log_std=data["ctrl_pi.log_std"].copy()
            ),
            ctrl_v=_unpack_mlp(data, "ctrl_v"),
            retr_pi=GaussianPolicy(
                mlp=_unpack_mlp(data, "retr_pi"),
                log_std=data["retr_pi.log_std"].copy(),
                squash=True,
            ),
            retr_v=_unpack_mlp(data, "retr_v"),
            disc=_unpack_mlp(data, "disc"),
        )
        adams = {
            "ctrl_pi": _unpack_adam(data, "adam.ctrl_pi", len(nets.ctrl_pi.params())),
            "ctrl_v": _unpack_adam(data, "adam.ctrl_v", len(nets.ctrl_v.params())),
            "retr_pi": _unpack_adam(data, "adam.retr_pi", len(nets.retr_pi.params())),
            "retr_v": _unpack_adam(data, "adam.retr_v", len(nets.retr_v.params())),
            "disc": _unpack_adam(data, "adam.disc", len(nets.disc.params())),
        }
        buffers = DiscBuffers.create(
            features.disc_window_dim(*cfg.disc_window), cfg.buffer_capacity
        )
        if "buffer.demo.data" in data:
            for tag, buf in (("demo", buffers.demo), ("fake", buffers.fake)):
                size, cursor, _cap = data[f"buffer.{tag}.meta"]
                buf.load_state_dict(
                    {"data": data[f"buffer.{tag}.data"], "size": size, "cursor": cursor}
                )
        return CheckpointBundle(
            nets=nets,
            adams=adams,
            config=cfg,
            iteration=int(meta["iteration"]),
            buffers=buffers,
        )
