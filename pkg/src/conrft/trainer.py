"""Two-stage training orchestration, evaluation, metrics, and checkpoints.

Offline: calibrated conservative critic plus consistency BC/Q-guided actor on
the demo buffer alone. Online: two concurrent loops — the interaction loop
steps the environment, consults the intervener, and routes transitions;
the learner loop waits for the replay gate, then trains on symmetric batches
and republishes the policy snapshot after every step. The loops rendezvous
deterministically at the configured update-to-data ratio, so a seeded online
run is reproducible.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .buffers import DemoBuffer, ReplayBuffer, annotate_returns, returns_to_go
from .checkpoints import assign_named, load_checkpoint, save_checkpoint
from .consistency import (ConsistencyHead, DiffusionSchedule,
                          actor_loss_and_grad, make_policy_sampler,
                          make_schedule, sample_action_batch_cached)
from .critic import (CriticEnsemble, FeatureBatch, calql_critic_loss_and_grad,
                     online_critic_loss_and_grad)
from .encoder import EncoderBackbone, encode_observations
from .envs import PROPRIO_DIM
from .nn import Adam, clip_grad_norm
from .types import TrainConfig, Trajectory, Transition, clip_action

METRICS_WINDOW = 20
DEFAULT_GRAD_CLIP = 10.0
DEFAULT_N_POLICY_ACTIONS = 4
MIN_REPLAY_GATE = 100
STARVATION_TIMEOUT = 60.0


@dataclass
class EpisodeMetrics:
    episode: int
    success: bool
    length: int
    intervention_steps: int
    wall_seconds: float

    def __post_init__(self):
        if self.intervention_steps > self.length:
            raise ValueError("intervention_steps cannot exceed length")


class MetricsLog:
    """Per-episode records plus running means over the last 20 episodes."""

    def __init__(self, path=None):
        self.history = []
        self._fh = open(path, "w") if path else None

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def _window(self, values):
        tail = values[-METRICS_WINDOW:]
        return float(np.mean(tail)) if tail else 0.0

    def add(self, m: EpisodeMetrics) -> dict:
        self.history.append(m)
        record = {
            "episode": m.episode,
            "success": m.success,
            "length": m.length,
            "intervention_steps": m.intervention_steps,
            "wall_seconds": round(m.wall_seconds, 4),
            "success_rate_20": self.success_rate(),
            "intervention_rate_20": self.intervention_rate(),
            "autonomous_success_rate_20": self.autonomous_success_rate(),
            "mean_length_20": self._window([h.length for h in self.history]),
        }
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()
        return record

    def success_rate(self):
        return self._window([1.0 if h.success else 0.0 for h in self.history])

    def intervention_rate(self):
        return self._window([h.intervention_steps / max(h.length, 1)
                             for h in self.history])

    def autonomous_success_rate(self):
        return self._window([1.0 if h.success and h.intervention_steps == 0
                             else 0.0 for h in self.history])


@dataclass
class Agent:
    """Everything trainable plus the frozen backbone it conditions on."""

    backbone: EncoderBackbone
    head: ConsistencyHead
    critic: CriticEnsemble
    schedule: DiffusionSchedule
    config: TrainConfig
    action_dim: int
    hidden: int = 256

    def named_params(self):
        return self.head.named_params() + self.critic.named_params()

    def meta(self, stage: str, extra: dict | None = None) -> dict:
        meta = {
            "stage": stage,
            "config": self.config.to_dict(),
            "action_dim": self.action_dim,
            "proprio_dim": PROPRIO_DIM,
            "hidden": self.hidden,
            "schedule": {"eps": self.schedule.eps,
                         "k_max": self.schedule.k_max,
                         "num_boundaries": self.schedule.num_boundaries,
                         "rho": self.schedule.rho},
            "encoder_fingerprint": self.backbone.fingerprint(),
        }
        if extra:
            meta.update(extra)
        return meta


def seed_streams(seed: int):
    children = np.random.SeedSequence(seed).spawn(6)
    names = ("init", "offline", "interact", "learn", "eval", "resets")
    return {name: np.random.default_rng(child)
            for name, child in zip(names, children)}


def build_agent(backbone: EncoderBackbone, action_dim: int,
                config: TrainConfig, hidden: int = 256,
                schedule: DiffusionSchedule | None = None) -> Agent:
    schedule = schedule or make_schedule()
    rng = seed_streams(config.seed)["init"]
    head = ConsistencyHead(action_dim, backbone.embed_dim, schedule, rng,
                           hidden=hidden)
    critic = CriticEnsemble(backbone.embed_dim, PROPRIO_DIM, action_dim, rng,
                            n_critics=config.n_critics, hidden=hidden)
    return Agent(backbone=backbone, head=head, critic=critic,
                 schedule=schedule, config=config, action_dim=action_dim,
                 hidden=hidden)


def save_agent(agent: Agent, dirpath, stage: str, extra_meta=None):
    save_checkpoint(dirpath, agent.named_params(),
                    agent.meta(stage, extra_meta))


def load_agent(dirpath, backbone: EncoderBackbone) -> Agent:
    loaded, meta = load_checkpoint(dirpath,
                                   expect_fingerprint=backbone.fingerprint())
    config = TrainConfig.from_dict(meta["config"])
    sched = meta["schedule"]
    schedule = make_schedule(sched["eps"], sched["k_max"],
                             sched["num_boundaries"], sched["rho"])
    agent = build_agent(backbone, meta["action_dim"], config,
                        hidden=meta.get("hidden", 256), schedule=schedule)
    assign_named(agent.named_params(), loaded)
    return agent


# --- demo plumbing ----------------------------------------------------------

def fill_demo_buffer(demos, backbone: EncoderBackbone, gamma: float,
                     annotate: bool = True) -> DemoBuffer:
    """Annotates trajectories, encodes observations once, fills the buffer."""
    demo = DemoBuffer()
    for traj in demos:
        if len(traj.transitions) == 0:
            continue
        annotated = annotate_returns(traj, gamma) if annotate else traj
        obs_seq = [t.s for t in annotated.transitions]
        obs_seq.append(annotated.transitions[-1].s_next)
        embs = encode_observations(backbone, obs_seq)
        aux = [(embs[i], embs[i + 1])
               for i in range(len(annotated.transitions))]
        demo.extend_annotated(annotated, aux)
    return demo


def make_feature_batch(transitions, auxes, require_mc=False) -> FeatureBatch:
    mc = None
    if all(t.mc_return is not None for t in transitions):
        mc = np.array([t.mc_return for t in transitions], dtype=np.float64)
    elif require_mc:
        raise ValueError("batch contains transitions without mc_return; "
                         "annotate demos before offline training")
    return FeatureBatch(
        emb=np.stack([a[0] for a in auxes]),
        proprio=np.stack([t.s.proprio for t in transitions]),
        action=np.stack([t.a for t in transitions]),
        reward=np.array([t.r for t in transitions], dtype=np.float64),
        emb_next=np.stack([a[1] for a in auxes]),
        proprio_next=np.stack([t.s_next.proprio for t in transitions]),
        done=np.array([1.0 if t.done else 0.0 for t in transitions]),
        mc_return=mc,
    )


# --- offline stage ----------------------------------------------------------

@dataclass
class OfflineResult:
    agent: Agent
    critic_losses: list = field(default_factory=list)
    actor_losses: list = field(default_factory=list)


def train_offline(demos, backbone: EncoderBackbone, config: TrainConfig,
                  steps: int = 20_000, hidden: int = 256,
                  n_policy_actions: int = DEFAULT_N_POLICY_ACTIONS,
                  grad_clip: float = DEFAULT_GRAD_CLIP,
                  out_dir=None, agent: Agent | None = None,
                  log_every: int = 100) -> OfflineResult:
    """Calibrated critic + consistency actor on the demo buffer alone."""
    demos = list(demos)
    if not demos:
        raise ValueError("offline training needs a non-empty demo set")
    if agent is None:
        agent = build_agent(backbone, demos[0].transitions[0].a.shape[0],
                            config, hidden=hidden)
    rng = seed_streams(config.seed)["offline"]
    demo = fill_demo_buffer(demos, backbone, config.gamma)
    head, critic, schedule = agent.head, agent.critic, agent.schedule
    actor_opt = Adam(head.params(), lr=config.lr)
    critic_opt = Adam(critic.params(), lr=config.lr)
    sampler = make_policy_sampler(head, schedule, rng)
    result = OfflineResult(agent=agent)
    loss_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        loss_fh = open(os.path.join(out_dir, "offline_losses.jsonl"), "w")
    try:
        for step in range(steps):
            transitions, auxes = demo.sample_with_aux(config.batch_size, rng)
            fb = make_feature_batch(transitions, auxes, require_mc=True)
            critic_loss, critic_grads = calql_critic_loss_and_grad(
                fb, sampler, critic, config.alpha, n_policy_actions,
                config.gamma)
            clip_grad_norm(critic_grads, grad_clip)
            critic_opt.step(critic_grads)
            actor_loss, actor_grads = actor_loss_and_grad(
                head, schedule, critic, fb, config.eta_offline,
                config.beta_offline, rng)
            clip_grad_norm(actor_grads, grad_clip)
            actor_opt.step(actor_grads)
            critic.polyak_update(config.polyak_tau)
            result.critic_losses.append(critic_loss)
            result.actor_losses.append(actor_loss)
            if loss_fh and (step % log_every == 0 or step == steps - 1):
                loss_fh.write(json.dumps(
                    {"step": step, "critic_loss": critic_loss,
                     "actor_loss": actor_loss}) + "\n")
    finally:
        if loss_fh:
            loss_fh.close()
    if out_dir:
        save_agent(agent, os.path.join(out_dir, "checkpoint"), "offline")
    return result


def train_sft(demos, backbone: EncoderBackbone, config: TrainConfig,
              steps: int = 20_000, hidden: int = 256,
              grad_clip: float = DEFAULT_GRAD_CLIP, out_dir=None,
              log_every: int = 100) -> OfflineResult:
    """Supervised baseline: the actor objective with (eta, beta) = (0, 1)
    and no critic or target updates; same head architecture."""
    demos = list(demos)
    if not demos:
        raise ValueError("supervised fine-tuning needs a non-empty demo set")
    agent = build_agent(backbone, demos[0].transitions[0].a.shape[0], config,
                        hidden=hidden)
    rng = seed_streams(config.seed)["offline"]
    demo = fill_demo_buffer(demos, backbone, config.gamma)
    head, schedule = agent.head, agent.schedule
    actor_opt = Adam(head.params(), lr=config.lr)
    result = OfflineResult(agent=agent)
    for step in range(steps):
        transitions, auxes = demo.sample_with_aux(config.batch_size, rng)
        fb = make_feature_batch(transitions, auxes)
        loss, grads = actor_loss_and_grad(head, schedule, agent.critic, fb,
                                          eta=0.0, beta=1.0, rng=rng)
        clip_grad_norm(grads, grad_clip)
        actor_opt.step(grads)
        result.actor_losses.append(loss)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_agent(agent, os.path.join(out_dir, "checkpoint"), "sft")
    return result


# --- evaluation -------------------------------------------------------------

def evaluate(agent: Agent, env, n_episodes: int, seed: int) -> dict:
    """Rolls the policy with no intervener and no learning; failures count
    their length as the environment horizon."""
    if n_episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    successes = 0
    lengths = []
    for ep in range(n_episodes):
        obs = env.reset(seed * 1_000_003 + ep)
        done = False
        info = {"success": False, "steps": 0}
        while not done:
            emb = agent.backbone.encode(obs)
            action, _ = sample_action_batch_cached(
                agent.head, agent.schedule, emb[None], rng)
            obs, done, info = env.step(clip_action(action[0], env.action_dim))
        successes += 1 if info["success"] else 0
        lengths.append(info["steps"] if info["success"] else env.h)
    return {"success_rate": successes / n_episodes,
            "mean_length": float(np.mean(lengths)),
            "episodes": n_episodes}


# --- online stage -----------------------------------------------------------

@dataclass
class OnlineResult:
    agent: Agent
    metrics: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    demo: DemoBuffer | None = None
    replay: ReplayBuffer | None = None


class _Shared:
    """State shared between the two online loops."""

    def __init__(self, initial_head):
        self.cond = threading.Condition()
        self.policy = initial_head
        self.env_steps_post_gate = 0
        self.learner_steps = 0
        self.gate_open = False
        self.stop = False
        self.error: Optional[str] = None
        self.learner_steps_before_gate = 0


def train_online(agent: Agent, env, intervener, config: TrainConfig,
                 episodes: int = 300,
                 reward_fn: Callable = None,
                 demo_buffer: DemoBuffer | None = None,
                 replay_capacity: int = 200_000,
                 min_replay: int = MIN_REPLAY_GATE,
                 n_policy_actions: int = DEFAULT_N_POLICY_ACTIONS,
                 grad_clip: float = DEFAULT_GRAD_CLIP,
                 out_dir=None, frame_sink=None,
                 starvation_timeout: float = STARVATION_TIMEOUT) -> OnlineResult:
    """Interaction and learner loops with the replay-size gate, symmetric
    sampling, per-step snapshot publication, and intervention routing."""
    if reward_fn is None:
        raise ValueError("train_online needs a reward function")
    demo = demo_buffer if demo_buffer is not None else DemoBuffer()
    replay = ReplayBuffer(capacity=replay_capacity)
    metrics_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
    log = MetricsLog(metrics_path)
    result = OnlineResult(agent=agent, demo=demo, replay=replay)
    shared = _Shared(agent.head.copy())
    if episodes <= 0:
        log.close()
        result.counters = {"env_steps": 0, "learner_steps": 0,
                           "learner_steps_before_gate": 0, "gate_opened": False}
        if out_dir:
            save_agent(agent, os.path.join(out_dir, "checkpoint"), "online")
        return result

    streams = seed_streams(config.seed)
    interact_rng = streams["interact"]
    learn_rng = streams["learn"]
    reset_rng = streams["resets"]
    utd = config.utd_ratio

    def learner_loop():
        from .buffers import symmetric_sample_with_aux

        head, critic, schedule = agent.head, agent.critic, agent.schedule
        actor_opt = Adam(head.params(), lr=config.lr)
        critic_opt = Adam(critic.params(), lr=config.lr)
        sampler = make_policy_sampler(head, schedule, learn_rng)
        try:
            while True:
                with shared.cond:
                    while (not shared.stop
                           and (not shared.gate_open
                                or shared.learner_steps
                                >= utd * shared.env_steps_post_gate)):
                        if not shared.cond.wait(timeout=starvation_timeout):
                            raise RuntimeError(
                                "learner starved: no new transitions for "
                                f"{starvation_timeout}s")
                    if shared.stop and (not shared.gate_open
                                        or shared.learner_steps
                                        >= utd * shared.env_steps_post_gate):
                        return
                transitions, auxes, _ = symmetric_sample_with_aux(
                    demo, replay, config.batch_size, learn_rng)
                fb = make_feature_batch(transitions, auxes)
                _, critic_grads = online_critic_loss_and_grad(
                    fb, sampler, critic, config.gamma)
                clip_grad_norm(critic_grads, grad_clip)
                critic_opt.step(critic_grads)
                _, actor_grads = actor_loss_and_grad(
                    head, schedule, critic, fb, config.eta_online,
                    config.beta_online, learn_rng)
                clip_grad_norm(actor_grads, grad_clip)
                actor_opt.step(actor_grads)
                critic.polyak_update(config.polyak_tau)
                with shared.cond:
                    if not shared.gate_open:
                        shared.learner_steps_before_gate += 1
                    shared.learner_steps += 1
                    shared.policy = head.copy()
                    shared.cond.notify_all()
        except Exception as exc:  # noqa: BLE001
            with shared.cond:
                shared.error = f"learner aborted: {exc!r}"
                shared.cond.notify_all()

    def interaction_loop():
        try:
            for episode in range(episodes):
                ep_seed = int(reset_rng.integers(0, 2**31 - 1))
                obs = env.reset(ep_seed)
                emb = agent.backbone.encode(obs)
                intervener.begin_episode()
                t0 = time.monotonic()
                pending_demo = []  # (buffer index, step index)
                rewards = []
                intervention_steps = 0
                last_unsafe = False
                done = False
                info = {"success": False, "steps": 0}
                while not done:
                    decision = intervener.decide(
                        {"dist": env.dist_to_goal(), "unsafe": last_unsafe})
                    if decision.active:
                        action = clip_action(
                            np.asarray(decision.action, dtype=np.float64),
                            env.action_dim).astype(np.float32)
                        intervened = True
                        intervention_steps += 1
                    else:
                        policy = shared.policy
                        sampled, _ = sample_action_batch_cached(
                            policy, agent.schedule, emb[None], interact_rng)
                        action = sampled[0].astype(np.float32)
                        intervened = False
                    obs_next, done, info = env.step(action)
                    emb_next = agent.backbone.encode(obs_next)
                    r = float(reward_fn(obs_next, info))
                    rewards.append(r)
                    last_unsafe = info["unsafe"]
                    transition = Transition(
                        s=obs, a=action, r=r, s_next=obs_next, done=done,
                        intervened=intervened)
                    aux = (emb, emb_next)
                    if intervened:
                        idx = demo.append(transition, aux=aux, pending=True)
                        pending_demo.append((idx, len(rewards) - 1))
                    else:
                        replay.append(transition, aux=aux)
                    if frame_sink is not None:
                        frame_sink(env, episode, info, action, decision.active,
                                   log)
                    obs, emb = obs_next, emb_next
                    with shared.cond:
                        if shared.error:
                            raise RuntimeError(shared.error)
                        if not shared.gate_open and len(replay) >= min_replay:
                            shared.gate_open = True
                        if shared.gate_open:
                            shared.env_steps_post_gate += 1
                            shared.cond.notify_all()
                            while (shared.learner_steps
                                   < utd * shared.env_steps_post_gate
                                   and not shared.error):
                                if not shared.cond.wait(
                                        timeout=starvation_timeout):
                                    raise RuntimeError(
                                        "interaction loop timed out waiting "
                                        "for the learner")
                            if shared.error:
                                raise RuntimeError(shared.error)
                # episode finished: patch return-to-go onto demo-routed steps
                rtg = returns_to_go(rewards, config.gamma)
                for idx, step_idx in pending_demo:
                    demo.set_mc_return(idx, rtg[step_idx])
                log.add(EpisodeMetrics(
                    episode=episode, success=bool(info["success"]),
                    length=int(info["steps"]),
                    intervention_steps=intervention_steps,
                    wall_seconds=time.monotonic() - t0))
        finally:
            with shared.cond:
                shared.stop = True
                shared.cond.notify_all()

    learner = threading.Thread(target=learner_loop, name="learner")
    learner.start()
    interaction_error = None
    try:
        interaction_loop()
    except Exception as exc:  # noqa: BLE001
        interaction_error = exc
    learner.join()
    log.close()
    if interaction_error is not None:
        raise RuntimeError(f"online run aborted: {interaction_error}") \
            from interaction_error
    if shared.error:
        raise RuntimeError(f"online run aborted: {shared.error}")
    result.metrics = log.history
    result.counters = {
        "env_steps": sum(m.length for m in log.history),
        "learner_steps": shared.learner_steps,
        "learner_steps_before_gate": shared.learner_steps_before_gate,
        "gate_opened": shared.gate_open,
        "final_success_rate_20": log.success_rate(),
        "final_intervention_rate_20": log.intervention_rate(),
        "final_autonomous_success_rate_20": log.autonomous_success_rate(),
    }
    if out_dir:
        save_agent(agent, os.path.join(out_dir, "checkpoint"), "online")
    return result
