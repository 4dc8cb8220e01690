"""On-policy fine-tuning: clipped-surrogate policy gradient with a shared
attention critic, prioritized minibatch sampling, and a traffic curriculum.

Pipeline per update cycle:

  1. collect a fixed number of transitions from parallel environments,
     sampling raw actions from each role's Gaussian head (clamping happens
     only on the way into the environment, never in the density),
  2. compute advantages / returns per agent stream with GAE, truncated at
     episode boundaries,
  3. insert everything into a fresh prioritized buffer (priorities follow
     the one-step TD residuals) and run several epochs of minibatch
     updates, critic first, then each role's actor on its own rows only,
  4. refresh priorities from the updated critic after every epoch.

The buffer never outlives the cycle, so importance weights only correct
the prioritization bias, not policy staleness.  Raw importance weights
satisfy w * (B * P)**beta == 1; by default they are rescaled by the batch
maximum (the raw form is a switch, see PerBuffer.sample).
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crosscoord.config import OnlineConfig, ScenarioConfig, config_hash
from crosscoord.env.geometry import MANEUVERS
from crosscoord.env.world import IntersectionEnv
from crosscoord.nets import (
    Adam,
    GaussianActor,
    NonFiniteGradient,
    ValueNet,
    actor_to_file,
    grad_clip,
    log_prob_and_entropy,
    make_online_actor,
    make_value_net,
    value_net_to_file,
)
from crosscoord.spaces import clamp_action
from crosscoord.tensor import Tape, Tensor, minimum

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ("episode", "reward", "success", "stage", "wall_time")


# -- rollout storage --------------------------------------------------------------


@dataclass
class TransitionEntry:
    """One agent step: the tuple the surrogate losses consume.

    ``action`` is the raw Gaussian sample (pre-clamp); ``logp`` is its
    density under the behavior policy at collection time.  ``advantage``,
    ``ret`` and ``priority`` are filled in after GAE.
    """

    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: float
    value: float
    logp: float
    role: str
    advantage: float = math.nan
    ret: float = math.nan
    priority: float = 0.0


@dataclass
class EpisodeStat:
    reward: float           # mean episodic return over the controlled agents
    success: bool
    stage: int


@dataclass
class EnvSlot:
    """One parallel environment plus its between-cycle carry state."""

    env: IntersectionEnv
    stage: int
    obs: dict[int, np.ndarray] = field(default_factory=dict)
    ep_rewards: dict[int, float] = field(default_factory=dict)

    def begin_episode(self) -> None:
        self.obs = self.env.reset(n_controlled=self.stage)
        self.ep_rewards = {vid: 0.0 for vid in self.obs}


def collect_rollout(slots: list[EnvSlot], actors: dict[str, GaussianActor],
                    value_net: ValueNet, steps: int,
                    rng: np.random.Generator,
                    ) -> tuple[dict[tuple[int, int], list[TransitionEntry]],
                               list[EpisodeStat]]:
    """Advance every slot ``steps`` times, recording one entry per active
    agent per step.  Episodes that terminate are reset in place; partial
    episodes simply carry over to the next call via the slot state.

    Returns the per-(slot, agent) entry streams in chronological order and
    the stats of every episode that finished during the call.
    """
    streams: dict[tuple[int, int], list[TransitionEntry]] = {}
    stats: list[EpisodeStat] = []
    for slot in slots:
        if slot.env.state is None or slot.env.state.episode_done or not slot.obs:
            slot.begin_episode()

    for _ in range(steps):
        # batch the value and actor forwards across slots
        agents = [(si, vid) for si, slot in enumerate(slots)
                  for vid in sorted(slot.obs)]
        all_obs = np.stack([slots[si].obs[vid] for si, vid in agents])
        values = value_net.values(all_obs)

        roles = [slots[si].env.state.vehicle(vid).maneuver for si, vid in agents]
        raw = np.zeros((len(agents), 2))
        logps = np.zeros(len(agents))
        for role in MANEUVERS:
            rows = [i for i, r in enumerate(roles) if r == role]
            if not rows:
                continue
            mean_t, log_std = actors[role].forward(all_obs[rows])
            noise = rng.standard_normal((len(rows), 2))
            sampled = mean_t.data + np.exp(log_std.data) * noise
            logp_t, _ = log_prob_and_entropy(mean_t, log_std, sampled)
            raw[rows] = sampled
            logps[rows] = logp_t.data

        per_slot: dict[int, dict[int, int]] = {}
        for i, (si, vid) in enumerate(agents):
            per_slot.setdefault(si, {})[vid] = i

        for si, slot in enumerate(slots):
            index = per_slot.get(si, {})
            acts = {vid: clamp_action(raw[i]) for vid, i in index.items()}
            prev_obs = slot.obs
            next_obs, results = slot.env.step(acts)
            for vid, i in index.items():
                res = results[vid]
                slot.ep_rewards[vid] += res.reward
                entry = TransitionEntry(
                    obs=prev_obs[vid], action=raw[i].copy(), reward=res.reward,
                    next_obs=(next_obs[vid] if vid in next_obs
                              else np.zeros_like(prev_obs[vid])),
                    done=1.0 if res.done else 0.0,
                    value=float(values[i]), logp=float(logps[i]),
                    role=roles[i])
                streams.setdefault((si, vid), []).append(entry)
            slot.obs = next_obs
            if slot.env.state.episode_done:
                stats.append(EpisodeStat(
                    reward=float(np.mean(list(slot.ep_rewards.values()))),
                    success=slot.env.state.outcome == "success",
                    stage=slot.stage))
                slot.begin_episode()
    return streams, stats


# -- generalized advantage estimation ----------------------------------------------


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float, bootstrap: float = 0.0,
                ) -> tuple[np.ndarray, np.ndarray]:
    """Truncated GAE over one agent stream.

    ``values[t]`` is V at the observation that produced ``rewards[t]``;
    ``dones[t] == 1`` marks the last step of an episode, which stops both
    bootstrapping and credit propagation.  ``bootstrap`` is V at the
    observation after the final step (used only when the stream ends
    mid-episode).  Returns (advantages, returns); standardization, when
    enabled, happens later over the whole flattened batch.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n = len(rewards)
    if len(values) != n or len(dones) != n:
        raise ValueError(
            f"length mismatch: rewards={n} values={len(values)} dones={len(dones)}")
    adv = np.zeros(n)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_v = values[t + 1] if t + 1 < n else bootstrap
        delta = rewards[t] + gamma * nonterminal * next_v - values[t]
        carry = delta + gamma * lam * nonterminal * carry
        adv[t] = carry
    return adv, adv + values


def td_residuals(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                 gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """One-step TD errors on a stream; these seed the sampling priorities."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    next_v = np.append(values[1:], bootstrap)
    return rewards + gamma * (1.0 - dones) * next_v - values


# -- prioritized sampling -----------------------------------------------------------


class PerBuffer:
    """Fixed-capacity store with priority-proportional sampling.

    Priorities are (|delta| + eps)**alpha; insertion beyond capacity evicts
    the oldest entry (FIFO).  Sampling is always with replacement, so asking
    for more rows than the buffer holds is well defined.  A prefix-sum index
    over the priorities backs both the draws and the exposed total.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, eps: float = 1e-4):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.entries: list = []
        self._priorities = np.zeros(capacity)
        self._next = 0                 # FIFO write cursor
        self._cum: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, entry, delta: float) -> int:
        """Store an entry with priority from |delta|; returns its index."""
        idx = self._next
        if len(self.entries) < self.capacity:
            self.entries.append(entry)
        else:
            self.entries[idx] = entry
        self._priorities[idx] = (abs(float(delta)) + self.eps) ** self.alpha
        self._next = (self._next + 1) % self.capacity
        self._cum = None
        return idx

    def update(self, indices, deltas) -> None:
        indices = np.asarray(indices, dtype=int)
        deltas = np.asarray(deltas, dtype=np.float64)
        if indices.shape != deltas.shape:
            raise ValueError(f"shape mismatch: {indices.shape} vs {deltas.shape}")
        if len(indices) and (indices.min() < 0 or indices.max() >= len(self.entries)):
            raise IndexError("priority update outside the stored range")
        self._priorities[indices] = (np.abs(deltas) + self.eps) ** self.alpha
        self._cum = None

    def _index(self) -> np.ndarray:
        if self._cum is None:
            self._cum = np.cumsum(self._priorities[:len(self.entries)])
        return self._cum

    def total_priority(self) -> float:
        cum = self._index()
        return float(cum[-1]) if len(cum) else 0.0

    def probabilities(self) -> np.ndarray:
        p = self._priorities[:len(self.entries)]
        return p / p.sum()

    def sample(self, batch_size: int, beta: float, rng: np.random.Generator,
               normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``batch_size`` indices ~ P and their importance weights.

        Raw weights are (1 / (B * P))**beta with B the current buffer size;
        with ``normalize`` (the default) they are divided by the batch max
        so the largest weight is 1.
        """
        if not self.entries:
            raise ValueError("cannot sample from an empty buffer")
        cum = self._index()
        total = cum[-1]
        draws = rng.uniform(0.0, total, size=batch_size)
        indices = np.searchsorted(cum, draws, side="left")
        indices = np.minimum(indices, len(self.entries) - 1)
        probs = self.probabilities()[indices]
        weights = (1.0 / (len(self.entries) * probs)) ** beta
        if normalize:
            weights = weights / weights.max()
        return indices, weights


def group_indices_by_role(roles) -> dict[str, np.ndarray]:
    """Row indices per role; every row lands in exactly one group."""
    roles = np.asarray(roles)
    return {role: np.nonzero(roles == role)[0] for role in MANEUVERS}


# -- losses -------------------------------------------------------------------------


def critic_loss(critic: ValueNet, obs: np.ndarray, returns: np.ndarray,
                weights: np.ndarray) -> Tensor:
    """Importance-weighted squared error of V against the GAE returns."""
    v = critic.forward(obs)
    err = v.sub(Tensor(np.asarray(returns, dtype=np.float64)))
    return err.square().mul(Tensor(np.asarray(weights, dtype=np.float64))).mean()


def actor_loss(actor: GaussianActor, obs: np.ndarray, actions: np.ndarray,
               old_logp: np.ndarray, advantages: np.ndarray,
               weights: np.ndarray, clip_eps: float,
               entropy_coef: float) -> Tensor:
    """Weighted mean of -(clipped surrogate) - c2 * entropy.

    ``actions`` are the raw samples stored at collection time, so the
    ratio is exactly new density over old density.
    """
    mean_t, log_std = actor.forward(obs)
    logp, entropy = log_prob_and_entropy(mean_t, log_std, actions)
    ratio = logp.sub(Tensor(np.asarray(old_logp, dtype=np.float64))).exp()
    adv_t = Tensor(np.asarray(advantages, dtype=np.float64))
    surrogate = minimum(ratio.mul(adv_t),
                        ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps).mul(adv_t))
    per_row = surrogate.neg().sub(entropy.mul(entropy_coef))
    return per_row.mul(Tensor(np.asarray(weights, dtype=np.float64))).mean()


# -- training loop ------------------------------------------------------------------


@dataclass
class OnlineResult:
    actors: dict[str, GaussianActor]
    value_net: ValueNet
    curves: list[EpisodeStat]
    final_stage: int
    pretrained_init: bool


def _write_curves(path: Path, stats: list[EpisodeStat],
                  wall_times: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for i, (st, wt) in enumerate(zip(stats, wall_times)):
            writer.writerow([i, repr(st.reward), int(st.success), st.stage,
                             repr(wt)])


def _flatten(streams, values_by_stream_end, cfg):
    """Streams -> flat arrays, with GAE and TD residuals applied per stream."""
    entries: list[TransitionEntry] = []
    deltas: list[np.ndarray] = []
    for key in sorted(streams):
        chunk = streams[key]
        rewards = np.array([e.reward for e in chunk])
        values = np.array([e.value for e in chunk])
        dones = np.array([e.done for e in chunk])
        bootstrap = values_by_stream_end[key] if dones[-1] == 0.0 else 0.0
        adv, ret = compute_gae(rewards, values, dones, cfg.gamma, cfg.lam,
                               bootstrap=bootstrap)
        for e, a, r in zip(chunk, adv, ret):
            e.advantage = float(a)
            e.ret = float(r)
        deltas.append(td_residuals(rewards, values, dones, cfg.gamma,
                                   bootstrap=bootstrap))
        entries.extend(chunk)
    return entries, np.concatenate(deltas) if deltas else np.zeros(0)


def train_online(cfg: OnlineConfig, scenario: ScenarioConfig, seed: int = 0,
                 init_actors: dict[str, GaussianActor] | None = None,
                 out_dir: str | Path | None = None,
                 total_episodes: int | None = None) -> OnlineResult:
    """Run the full collect / estimate / update loop with the curriculum.

    ``init_actors`` (typically the offline-pretrained role actors) seed the
    trunks; without them training starts from scratch.  Curve rows land in
    ``out_dir/curves.csv`` together with per-role actor checkpoints and the
    shared critic; the manifests record whether the init was pretrained.
    """
    total_episodes = total_episodes or cfg.total_episodes
    layout = scenario.layout()
    seq = np.random.SeedSequence(seed)
    net_rng, sample_rng, per_rng = (np.random.default_rng(s)
                                    for s in seq.spawn(3))

    actors = {role: make_online_actor(
                  layout, cfg.hidden, net_rng, role, d_model=cfg.d_model,
                  n_heads=cfg.n_heads, d_k=cfg.d_k,
                  init_from=init_actors.get(role) if init_actors else None)
              for role in MANEUVERS}
    value_net = make_value_net(layout, cfg.hidden, net_rng, d_model=cfg.d_model,
                               n_heads=cfg.n_heads, d_k=cfg.d_k)
    actor_opts = {role: Adam(actors[role].parameters(), lr=cfg.lr_actor)
                  for role in MANEUVERS}
    critic_opt = Adam(value_net.parameters(), lr=cfg.lr_critic)

    stage = cfg.fixed_stage if cfg.fixed_stage else 1
    slots = [EnvSlot(env=IntersectionEnv(scenario, seed=seed * 1000 + i),
                     stage=stage)
             for i in range(cfg.n_envs)]
    steps_per_env = max(1, cfg.rollout_steps // cfg.n_envs)

    curves: list[EpisodeStat] = []
    wall_times: list[float] = []
    window: list[bool] = []          # rolling successes at the current stage
    t0 = time.monotonic()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def checkpoint(prefix: str = "") -> None:
        if out is None:
            return
        stamp = {"seed": seed, "config_sha256": config_hash(cfg),
                 "scenario_sha256": config_hash(scenario),
                 "pretrained_init": init_actors is not None,
                 "final_stage": stage}
        for role in MANEUVERS:
            actor_to_file(out / f"{prefix}actor_{role}.npz", actors[role],
                          extra_manifest=stamp)
        value_net_to_file(out / f"{prefix}value_net.npz", value_net,
                          extra_manifest=stamp)
        _write_curves(out / f"{prefix}curves.csv", curves, wall_times)

    def abort(context: str) -> None:
        checkpoint(prefix="abort_")
        raise RuntimeError(
            f"non-finite loss in {context}; checkpoint written"
            + (f" to {out}" if out is not None else ""))

    cycle = 0
    while len(curves) < total_episodes:
        streams, stats = collect_rollout(slots, actors, value_net,
                                         steps_per_env, sample_rng)
        for st in stats:
            curves.append(st)
            wall_times.append(time.monotonic() - t0)
            window.append(st.success)
            if len(window) > cfg.curriculum_window:
                window.pop(0)

        # bootstrap values for streams cut mid-episode
        tails = {}
        for key, chunk in streams.items():
            si, vid = key
            if chunk[-1].done == 0.0:
                tails[key] = float(value_net.values(
                    slots[si].obs[vid][None, :])[0])
            else:
                tails[key] = 0.0
        entries, deltas = _flatten(streams, tails, cfg)
        if not entries:
            continue

        obs = np.stack([e.obs for e in entries])
        acts = np.stack([e.action for e in entries])
        old_logp = np.array([e.logp for e in entries])
        rets = np.array([e.ret for e in entries])
        rewards = np.array([e.reward for e in entries])
        dones = np.array([e.done for e in entries])
        next_obs = np.stack([e.next_obs for e in entries])
        adv = np.array([e.advantage for e in entries])
        if cfg.adv_standardize:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        role_rows = group_indices_by_role([e.role for e in entries])

        buffer = PerBuffer(capacity=len(entries), alpha=cfg.per_alpha,
                           eps=cfg.per_eps)
        for e, d in zip(entries, deltas):
            e.priority = abs(float(d)) + cfg.per_eps
            buffer.insert(e, d)

        frac = min(1.0, cycle / max(1, cfg.per_beta_anneal))
        beta = cfg.per_beta0 + (cfg.per_beta1 - cfg.per_beta0) * frac
        n_minibatches = math.ceil(len(entries) / cfg.minibatch)

        for _ in range(cfg.epochs):
            for _ in range(n_minibatches):
                idx, w = buffer.sample(cfg.minibatch, beta, per_rng)
                try:
                    with Tape() as tape:
                        loss = critic_loss(value_net, obs[idx], rets[idx], w)
                        if not np.isfinite(loss.data):
                            abort("critic update")
                        tape.backward(loss)
                    grad_clip(value_net.parameters(), cfg.max_grad_norm)
                    critic_opt.step()
                    critic_opt.zero_grad()

                    for role in MANEUVERS:
                        mask = np.isin(idx, role_rows[role])
                        if not mask.any():
                            continue
                        rows = idx[mask]
                        with Tape() as tape:
                            loss = actor_loss(
                                actors[role], obs[rows], acts[rows],
                                old_logp[rows], adv[rows], w[mask],
                                cfg.clip_eps, cfg.entropy_coef)
                            if not np.isfinite(loss.data):
                                abort(f"{role} actor update")
                            tape.backward(loss)
                        grad_clip(actors[role].parameters(), cfg.max_grad_norm)
                        actor_opts[role].step()
                        actor_opts[role].zero_grad()
                except NonFiniteGradient as exc:
                    abort(str(exc))

            # refresh priorities from the updated critic
            v_now = value_net.values(obs)
            v_next = value_net.values(next_obs)
            new_deltas = rewards + cfg.gamma * (1.0 - dones) * v_next - v_now
            buffer.update(np.arange(len(entries)), new_deltas)

        cycle += 1
        if (not cfg.fixed_stage and stage < 3
                and len(window) >= cfg.curriculum_window
                and np.mean(window) >= cfg.curriculum_threshold):
            stage += 1
            window.clear()
            logger.info("curriculum advance to %d controlled vehicles "
                        "(episode %d)", stage, len(curves))
            for slot in slots:
                slot.stage = stage
                slot.begin_episode()

    curves = curves[:total_episodes]
    wall_times = wall_times[:total_episodes]
    checkpoint()
    return OnlineResult(actors=actors, value_net=value_net, curves=curves,
                        final_stage=stage,
                        pretrained_init=init_actors is not None)
