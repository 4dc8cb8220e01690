"""Stage 1: pre-training per-maneuver policies from logged trajectories.

The pipeline never trusts a log's reward or action columns.  Actions are
re-estimated from consecutive state differences, scenes are replayed into
full world states, and rewards are relabeled through the same reward
function the simulator applies online, so both training stages optimize
the same objective.  Critics learn with a conservative penalty that pushes
Q down on out-of-distribution actions; actors regress toward the data
while climbing the conservative Q surface.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from crosscoord.config import (CorpusConfig, OfflineConfig, ScenarioConfig,
                               config_hash, corpus_scenario)
from crosscoord.env.geometry import (ENTRY_HEADING, MANEUVERS, MapGeometry,
                                     wrap_angle)
from crosscoord.env.observation import build_observation
from crosscoord.env.reward import compute_reward
from crosscoord.env.world import (ARRIVAL_ZONE, IntersectionEnv, PedestrianState,
                                  VehicleState, WorldState, detect_collisions)
from crosscoord.nets import (Adam, GaussianActor, NonFiniteGradient, TwinCritic,
                             actor_to_file, critic_to_file, make_offline_actor,
                             make_twin_critic, soft_update)
from crosscoord.spaces import (ACTION_HIGH, ACTION_LOW, ACTION_RANGE,
                               clamp_action)
from crosscoord.tensor import Tape, Tensor, minimum
from crosscoord.trajlog import LogRow, TrajectoryWriter, read_log, rows_from_state

log = logging.getLogger(__name__)

# route-matching slack when reconstructing scenes from logged poses
_ROUTE_MATCH_TOL = 2.0
_PED_MATCH_TOL = 0.5

METRICS_COLUMNS = ("step", "q1_loss", "q2_loss", "actor_loss", "reward_improvement")


class DataError(ValueError):
    """Log contents violate a track invariant (ordering, labels, geometry)."""


# -- ingestion ---------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRecord:
    """One vehicle frame of an ingested log; track ids are "episode:vehicle"."""

    track: str
    frame: int
    x: float
    y: float
    speed: float
    heading: float
    maneuver: str


def ingest_trajectories(path) -> list[TrajectoryRecord]:
    """Read a trajectory log into frame-ordered vehicle records.

    Pedestrian rows are scene context, not tracks, and are skipped here.
    Raises trajlog.SchemaError for a bad header and DataError when frames
    are not strictly increasing or a track's maneuver label changes.
    """
    rows = read_log(path)
    groups: dict[tuple[int, int], list[LogRow]] = {}
    for r in rows:
        if r.kind == "ped":
            continue
        groups.setdefault((r.episode, r.id), []).append(r)

    records: list[TrajectoryRecord] = []
    for (ep, vid), g in groups.items():
        track = f"{ep}:{vid}"
        frames = [r.step for r in g]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise DataError(f"track {track}: frames are not strictly increasing")
        labels = {r.role for r in g}
        if len(labels) != 1:
            raise DataError(f"track {track}: maneuver label changes mid-track")
        man = g[0].role
        if man not in MANEUVERS:
            raise DataError(f"track {track}: missing maneuver label")
        records.extend(
            TrajectoryRecord(track=track, frame=r.step, x=r.x, y=r.y,
                             speed=r.speed, heading=r.heading, maneuver=man)
            for r in g)
    return records


def group_tracks(records) -> dict[str, list[TrajectoryRecord]]:
    out: dict[str, list[TrajectoryRecord]] = {}
    for rec in records:
        out.setdefault(rec.track, []).append(rec)
    return out


def estimate_actions(track, dt: float, clamp: bool = True) -> np.ndarray:
    """Finite-difference (acceleration, steer-rate) commands from a track.

    Row t of the result is the action that turns frame t into frame t+1;
    the final frame has no successor and is dropped.  Accepts any frame
    sequence with speed/heading attributes (records or raw log rows).
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if len(track) < 2:
        raise ValueError("need at least two frames to difference")
    speed = np.array([r.speed for r in track], dtype=np.float64)
    heading = np.array([r.heading for r in track], dtype=np.float64)
    acts = np.column_stack([np.diff(speed) / dt,
                            np.asarray(wrap_angle(np.diff(heading))) / dt])
    if clamp:
        acts = np.clip(acts, ACTION_LOW, ACTION_HIGH)
    return acts


# -- scene replay ------------------------------------------------------------


@dataclass
class ReplayedTrack:
    vid: int
    kind: str
    entry: str
    maneuver: str
    last_step: int
    actions: np.ndarray                 # clamped; actions[t] produced frame t+1
    actions_raw: np.ndarray             # as estimated, before clamping
    terminal_step: int | None = None    # frame where this agent's run ended


@dataclass
class ReplayedEpisode:
    episode: int
    states: list[WorldState]            # one per logged step, flags rebuilt
    tracks: dict[int, ReplayedTrack]

    def cav_ids(self) -> list[int]:
        return [vid for vid, tr in self.tracks.items() if tr.kind == "cav"]


def _entry_from_heading(h0: float) -> str:
    # spawn headings are axis-aligned, so the nearest entry heading is exact
    return min(ENTRY_HEADING,
               key=lambda arm: abs(float(wrap_angle(h0 - ENTRY_HEADING[arm]))))


def replay_episode(episode: int, rows: list[LogRow], config: ScenarioConfig,
                   geometry: MapGeometry | None = None) -> ReplayedEpisode:
    """Rebuild the world-state sequence of one logged episode.

    Positions, headings and speeds come straight from the log; everything
    else (route progress, goal/exit flags, collision sets, pedestrian
    phases) is reconstructed so observation and reward functions can run
    on the result exactly as they do live.
    """
    geometry = geometry or config.geometry()
    veh_rows: dict[int, list[LogRow]] = {}
    ped_rows: dict[int, list[LogRow]] = {}
    for r in rows:
        (ped_rows if r.kind == "ped" else veh_rows).setdefault(r.id, []).append(r)
    if not veh_rows:
        raise DataError(f"episode {episode}: no vehicle rows")
    n_steps = max(r.step for r in rows)
    step_time = {r.step: r.time for r in rows}

    tracks: dict[int, ReplayedTrack] = {}
    for vid in sorted(veh_rows):
        vr = veh_rows[vid]
        if [r.step for r in vr] != list(range(len(vr))):
            raise DataError(f"episode {episode}, vehicle {vid}: "
                            "frames are not contiguous from 0")
        labels = {r.role for r in vr}
        if labels - set(MANEUVERS):
            raise DataError(f"episode {episode}, vehicle {vid}: unlabeled track")
        if len(labels) != 1:
            raise DataError(f"episode {episode}, vehicle {vid}: "
                            "maneuver label changes mid-track")
        entry = _entry_from_heading(vr[0].heading)
        man = vr[0].role
        route = geometry.route(entry, man)
        s0 = route.project(vr[0].x, vr[0].y)
        p0 = route.point_at(s0)
        off = math.hypot(p0[0] - vr[0].x, p0[1] - vr[0].y)
        if off > _ROUTE_MATCH_TOL:
            raise DataError(f"episode {episode}, vehicle {vid}: start pose is "
                            f"{off:.1f} m off the {entry}/{man} route")
        raw = estimate_actions(vr, config.dt, clamp=False) if len(vr) > 1 \
            else np.zeros((0, 2))
        tracks[vid] = ReplayedTrack(
            vid=vid, kind=vr[0].kind, entry=entry, maneuver=man,
            last_step=len(vr) - 1, actions=np.clip(raw, ACTION_LOW, ACTION_HIGH),
            actions_raw=raw)

    # pid -> (crosswalk index, far end, estimated start time, first moving frame)
    ped_meta: dict[int, tuple] = {}
    for pid in sorted(ped_rows):
        pr = ped_rows[pid]
        if [r.step for r in pr] != list(range(n_steps + 1)):
            raise DataError(f"episode {episode}, pedestrian {pid}: "
                            "frames must cover every step")
        x0, y0 = pr[0].x, pr[0].y
        match = None
        for i, cw in enumerate(geometry.crosswalks):
            if math.hypot(x0 - cw.end_a[0], y0 - cw.end_a[1]) < _PED_MATCH_TOL:
                match = (i, cw.end_b)
                break
            if math.hypot(x0 - cw.end_b[0], y0 - cw.end_b[1]) < _PED_MATCH_TOL:
                match = (i, cw.end_a)
                break
        if match is None:
            raise DataError(f"episode {episode}, pedestrian {pid}: "
                            "start is not at a crosswalk end")
        first_move = next((r.step for r in pr if r.speed > 0.0), None)
        # the waiting gate may have held the crossing past its draw time, so
        # the first moving frame is the best available start estimate
        start_time = pr[first_move].time if first_move is not None else math.inf
        ped_meta[pid] = (match[0], match[1], start_time, first_move)

    cav_count = sum(1 for tr in tracks.values() if tr.kind == "cav")
    run: dict[int, dict] = {
        vid: {"s": None, "succ": False, "arr": None, "done": "running",
              "succ_step": None, "last": None}
        for vid in tracks}

    states: list[WorldState] = []
    ped_hits: list[bool] = []
    for t in range(n_steps + 1):
        vehicles = []
        for vid in sorted(tracks):
            tr, st = tracks[vid], run[vid]
            if t > tr.last_step:
                vehicles.append(st["last"].clone())
                continue
            r = veh_rows[vid][t]
            route = geometry.route(tr.entry, tr.maneuver)
            s = route.project(r.x, r.y, s_hint=st["s"])
            st["s"] = s
            if st["arr"] is None and s >= route.s_box_entry - ARRIVAL_ZONE:
                st["arr"] = r.time
            if not st["succ"] and route.in_goal(r.x, r.y):
                st["succ"] = True
                st["succ_step"] = t
                if st["done"] == "running":
                    st["done"] = "success"
            exited = t == tr.last_step and s >= route.length - 0.6
            if exited and tr.kind == "cav" and st["done"] == "running":
                st["done"] = "timeout"   # left the map without reaching the goal
            last_a = tr.actions[t - 1] if t > 0 else np.zeros(2)
            v = VehicleState(
                vid=vid, kind=tr.kind, entry=tr.entry, maneuver=tr.maneuver,
                x=r.x, y=r.y, heading=r.heading, speed=r.speed, route_s=s,
                half_len=config.vehicle_half_len, half_wid=config.vehicle_half_wid,
                last_action=np.array(last_a), arrival_time=st["arr"],
                done=st["done"], succeeded=st["succ"], exited=exited,
                spawn_step=0, success_step=st["succ_step"])
            st["last"] = v
            vehicles.append(v)

        peds = []
        for pid in sorted(ped_rows):
            r = ped_rows[pid][t]
            cw_idx, target, start_time, first_move = ped_meta[pid]
            if r.speed > 0.0:
                phase = "crossing"
            elif first_move is not None and t > first_move:
                phase = "done"
            else:
                phase = "waiting"
            peds.append(PedestrianState(
                pid=pid, x=r.x, y=r.y, heading=r.heading, speed=r.speed,
                radius=config.ped_radius, crosswalk=cw_idx,
                start_time=start_time, target=target, phase=phase))

        state = WorldState(time=step_time[t], step_idx=t, n_controlled=cav_count,
                           vehicles=vehicles, peds=peds)
        colliding, ped_hit = detect_collisions(state)
        state.colliding = tuple(sorted(colliding))
        ped_hits.append(ped_hit)
        states.append(state)

    final = states[-1]
    if final.colliding or ped_hits[-1]:
        outcome = "collision"
    elif all(v.succeeded for v in final.cavs()) and cav_count > 0:
        outcome = "success"
    elif not any(v.done == "running" for v in final.cavs()):
        outcome = "timeout"
    elif n_steps >= config.max_steps:
        outcome = "timeout"
    else:
        outcome = ""                    # externally truncated log
    final.episode_done = True
    final.outcome = outcome
    if outcome in ("collision", "timeout"):
        for v in final.cavs():
            if v.done == "running":
                v.done = outcome

    for vid, tr in tracks.items():
        for t in range(1, tr.last_step + 1):
            now, before = states[t].vehicle(vid), states[t - 1].vehicle(vid)
            ended = ((now.succeeded and not before.succeeded)
                     or vid in states[t].colliding
                     or (now.done == "timeout" and before.done != "timeout"))
            if ended:
                tr.terminal_step = t
                break
    return ReplayedEpisode(episode=episode, states=states, tracks=tracks)


# -- dataset construction ------------------------------------------------------


@dataclass
class OfflineDataset:
    """Role-tagged transition arrays plus the per-feature stats of this data."""

    role: str
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]


@dataclass
class EpisodeSummary:
    """What the improvement ratio needs from one logged episode."""

    episode: int
    initial_state: WorldState
    cav_returns: dict[int, float]
    n_steps: int

    @property
    def dataset_return(self) -> float:
        return float(np.mean(list(self.cav_returns.values())))


def _finalize_dataset(role: str, parts: dict[str, list], floor: float,
                      layout_dim: int) -> OfflineDataset:
    if parts["obs"]:
        obs = np.stack(parts["obs"])
        next_obs = np.stack(parts["next_obs"])
        actions = np.stack(parts["actions"])
        rewards = np.array(parts["rewards"], dtype=np.float64)
        dones = np.array(parts["dones"], dtype=np.float64)
    else:
        obs = np.zeros((0, layout_dim))
        next_obs = np.zeros((0, layout_dim))
        actions = np.zeros((0, 2))
        rewards = np.zeros(0)
        dones = np.zeros(0)
    if len(obs):
        mean = obs.mean(axis=0)
        std = np.maximum(obs.std(axis=0), floor)
    else:
        mean, std = np.zeros(layout_dim), np.ones(layout_dim)
    return OfflineDataset(role=role, obs=obs, actions=actions, rewards=rewards,
                          next_obs=next_obs, dones=dones,
                          norm_mean=mean, norm_std=std)


def _partition_rows(rows: list[LogRow], scenario: ScenarioConfig,
                    norm_floor: float):
    geometry = scenario.geometry()
    layout = scenario.layout()
    by_episode: dict[int, list[LogRow]] = {}
    for r in rows:
        by_episode.setdefault(r.episode, []).append(r)

    parts = {role: {"obs": [], "actions": [], "rewards": [], "next_obs": [],
                    "dones": []} for role in MANEUVERS}
    episodes: list[EpisodeSummary] = []
    for ep in sorted(by_episode):
        rep = replay_episode(ep, by_episode[ep], scenario, geometry)
        states = rep.states
        cav_returns: dict[int, float] = {}
        for vid, tr in rep.tracks.items():
            end = tr.terminal_step if tr.terminal_step is not None else tr.last_step
            if end < 1:
                continue
            bucket = parts[tr.maneuver]
            obs_seq = [build_observation(states[t], vid, scenario, geometry)
                       for t in range(end + 1)]
            total = 0.0
            for t in range(end):
                r_t, _ = compute_reward(states[t], tr.actions[t], states[t + 1],
                                        vid, scenario, geometry)
                total += r_t
                bucket["obs"].append(obs_seq[t])
                bucket["actions"].append(tr.actions[t])
                bucket["rewards"].append(r_t)
                bucket["next_obs"].append(obs_seq[t + 1])
                bucket["dones"].append(1.0 if t + 1 == tr.terminal_step else 0.0)
            if tr.kind == "cav":
                cav_returns[vid] = total
        if cav_returns:
            episodes.append(EpisodeSummary(
                episode=ep, initial_state=states[0].clone(),
                cav_returns=cav_returns, n_steps=len(states) - 1))

    datasets = {role: _finalize_dataset(role, parts[role], norm_floor, layout.dim)
                for role in MANEUVERS}
    return datasets, episodes


def partition_by_role(rows: list[LogRow], scenario: ScenarioConfig,
                      norm_floor: float = 0.05) -> dict[str, OfflineDataset]:
    """Split logged driving into per-maneuver transition datasets.

    Takes the full log (pedestrians included) because scenes are replayed
    to rebuild observations and to relabel rewards with the simulator's own
    reward function.  The three datasets are disjoint and together cover
    every labeled track.
    """
    datasets, _ = _partition_rows(rows, scenario, norm_floor)
    return datasets


def load_offline_data(path, scenario: ScenarioConfig, norm_floor: float = 0.05):
    """Datasets plus per-episode summaries (initial states, logged returns)
    from a log file on disk; the summaries feed the improvement ratio."""
    return _partition_rows(read_log(path), scenario, norm_floor)


# -- losses --------------------------------------------------------------------


def sample_batch(dataset: OfflineDataset, size: int,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    idx = rng.integers(0, len(dataset), size=size)
    return {"obs": dataset.obs[idx], "actions": dataset.actions[idx],
            "rewards": dataset.rewards[idx], "next_obs": dataset.next_obs[idx],
            "dones": dataset.dones[idx]}


def _logsumexp_rows(q: Tensor) -> Tensor:
    # max-shifted for stability; the shift is a constant w.r.t. the tape
    m = q.data.max(axis=1, keepdims=True)
    shifted = q.sub(Tensor(np.broadcast_to(m, q.data.shape).copy()))
    return shifted.exp().sum(axis=1).log().add(Tensor(m[:, 0]))


def cql_critic_loss(batch: dict[str, np.ndarray], critic: TwinCritic,
                    target: TwinCritic, actor: GaussianActor, cfg: OfflineConfig,
                    rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Conservative TD loss for each Q head.

    Per head: 0.5 * mean squared error against the shared pessimistic target
    plus alpha * (mean logsumexp of Q over sampled actions - mean Q on the
    dataset actions).  Sampled actions are M uniform draws over the action
    box plus the current policy action; targets and sampled actions carry no
    gradient, so each head trains independently of the other's regressor.
    """
    obs, acts = batch["obs"], batch["actions"]
    n, m = obs.shape[0], cfg.n_sampled_actions

    pi_next = clamp_action(actor.mean_action(batch["next_obs"]))
    tq1, tq2 = target.forward(batch["next_obs"], pi_next)
    y = batch["rewards"] + cfg.gamma * (1.0 - batch["dones"]) \
        * np.minimum(tq1.data, tq2.data)

    uniform = rng.uniform(ACTION_LOW, ACTION_HIGH, size=(n, m, 2))
    pi_cur = clamp_action(actor.mean_action(obs))
    sampled = np.concatenate([uniform, pi_cur[:, None, :]], axis=1)
    obs_rep = np.repeat(obs, m + 1, axis=0)
    q1s, q2s = critic.forward(obs_rep, sampled.reshape(n * (m + 1), 2))

    q1_data, q2_data = critic.forward(obs, acts)
    y_t = Tensor(y)

    losses = []
    for q_data, q_sampled in ((q1_data, q1s), (q2_data, q2s)):
        td = q_data.sub(y_t).square().mean().mul(0.5)
        reg = _logsumexp_rows(q_sampled.reshape(n, m + 1)).mean() \
            .sub(q_data.mean())
        losses.append(td.add(reg.mul(cfg.alpha_cql)))
    return losses[0], losses[1]


def bc_actor_loss(batch: dict[str, np.ndarray], actor: GaussianActor,
                  critic: TwinCritic, cfg: OfflineConfig) -> Tensor:
    """Pessimistic value ascent with a squared-error anchor on dataset actions."""
    obs, acts = batch["obs"], batch["actions"]
    mean, _ = actor.forward(obs)
    q1, q2 = critic.forward(obs, mean)
    q_term = minimum(q1, q2).mean().neg()
    bc = mean.sub(Tensor(acts)).square().sum(axis=-1).mean()
    return q_term.add(bc.mul(cfg.lambda_bc))


# -- reward improvement ----------------------------------------------------------


@dataclass
class ImprovementResult:
    percent: float | None           # None when the reference return is <= 0
    numerator: float                # mean rollout return under the policy
    denominator: float              # mean relabeled return of the data
    n_episodes: int

    @property
    def defined(self) -> bool:
        return self.percent is not None


def rollout_return(env: IntersectionEnv, actors: dict[str, GaussianActor],
                   initial: WorldState) -> float:
    """Deterministic policy rollout from a snapshot; mean return over CAVs."""
    obs = env.reset(snapshot=initial)
    totals = {v.vid: 0.0 for v in env.state.cavs()}
    while obs:
        acts = {}
        for vid in env.active_agents():
            role = env.state.vehicle(vid).maneuver
            acts[vid] = clamp_action(actors[role].mean_action(obs[vid]))
        obs, results = env.step(acts)
        for vid, res in results.items():
            totals[vid] += res.reward
    return float(np.mean(list(totals.values())))


def reward_improvement(actors: dict[str, GaussianActor],
                       episodes: list[EpisodeSummary], scenario: ScenarioConfig,
                       seed: int = 0,
                       max_episodes: int | None = None) -> ImprovementResult:
    """Policy return from dataset starting states, as a percentage of the
    dataset's own mean relabeled return.  Above 100 means the policy beats
    average logged behavior.  A non-positive reference makes the percentage
    meaningless, so it is reported as undefined with both raw means.

    ``max_episodes`` subsamples the rollouts (cheap mid-training probes);
    the reference mean always uses every episode, so probes stay comparable
    across training and cannot flip sign from an unlucky draw."""
    if not episodes:
        raise ValueError("no episodes to evaluate")
    chosen = episodes
    if max_episodes is not None and max_episodes < len(episodes):
        pick = np.random.default_rng(seed).choice(
            len(episodes), size=max_episodes, replace=False)
        chosen = [episodes[i] for i in sorted(pick)]
    env = IntersectionEnv(scenario, seed=seed)
    numerator = float(np.mean([rollout_return(env, actors, ep.initial_state)
                               for ep in chosen]))
    denominator = float(np.mean([ep.dataset_return for ep in episodes]))
    percent = 100.0 * numerator / denominator if denominator > 0.0 else None
    return ImprovementResult(percent=percent, numerator=numerator,
                             denominator=denominator, n_episodes=len(chosen))


# -- training --------------------------------------------------------------------


@dataclass
class OfflineResult:
    actors: dict[str, GaussianActor]
    critics: dict[str, TwinCritic]
    metrics: dict[str, list[tuple]]     # per role, rows in METRICS_COLUMNS order
    improvement: ImprovementResult | None


def _write_metrics(path: Path, rows: list[tuple]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def train_offline(datasets: dict[str, OfflineDataset], cfg: OfflineConfig,
                  scenario: ScenarioConfig,
                  episodes: list[EpisodeSummary] | None = None,
                  seed: int = 0, out_dir=None) -> OfflineResult:
    """Train one actor/critic pair per maneuver with conservative Q + cloning.

    All roles advance in lockstep so the improvement ratio can be probed
    mid-training with the full policy bundle.  Every gradient step appends a
    metrics row per role; the improvement column repeats the latest probe
    (probes run every cfg.eval_interval steps on cfg.eval_episodes snapshot
    rollouts).  A non-finite loss or gradient aborts the run, checkpointing
    the last finite parameters.
    """
    for role in MANEUVERS:
        if role not in datasets or len(datasets[role]) == 0:
            raise ValueError(f"dataset for role {role!r} is empty")
    layout = scenario.layout()
    root = np.random.SeedSequence(seed)
    net_rng = np.random.default_rng(root.spawn(1)[0])
    batch_rngs = {role: np.random.default_rng(np.random.SeedSequence((seed, i)))
                  for i, role in enumerate(MANEUVERS)}

    actors: dict[str, GaussianActor] = {}
    critics: dict[str, TwinCritic] = {}
    targets: dict[str, TwinCritic] = {}
    opt_actor: dict[str, Adam] = {}
    opt_critic: dict[str, Adam] = {}
    for role in MANEUVERS:
        ds = datasets[role]
        actors[role] = make_offline_actor(layout, cfg.hidden, net_rng, role,
                                          norm_mean=ds.norm_mean,
                                          norm_std=ds.norm_std)
        critics[role] = make_twin_critic(layout, cfg.hidden, net_rng)
        targets[role] = make_twin_critic(layout, cfg.hidden, net_rng)
        soft_update(targets[role].parameters(), critics[role].parameters(), 1.0)
        opt_actor[role] = Adam(actors[role].parameters(), lr=cfg.lr)
        opt_critic[role] = Adam(critics[role].parameters(), lr=cfg.lr)

    def probe() -> float:
        if episodes is None:
            return math.nan
        res = reward_improvement(actors, episodes, scenario, seed=seed,
                                 max_episodes=cfg.eval_episodes)
        return math.nan if res.percent is None else res.percent

    metrics: dict[str, list[tuple]] = {role: [] for role in MANEUVERS}
    last_probe = probe()
    improvement: ImprovementResult | None = None

    def abort(step: int, role: str, why: str):
        log.error("offline training aborted at step %d (%s): %s", step, role, why)
        if out_dir is not None:
            d = Path(out_dir)
            for r in MANEUVERS:
                actor_to_file(d / f"abort_actor_{r}.npz", actors[r])
                critic_to_file(d / f"abort_critic_{r}.npz", critics[r])
        raise RuntimeError(f"offline training diverged at step {step} ({role}): {why}")

    for step in range(1, cfg.steps + 1):
        for role in MANEUVERS:
            batch = sample_batch(datasets[role], cfg.batch_size, batch_rngs[role])
            try:
                with Tape() as tape:
                    l1, l2 = cql_critic_loss(batch, critics[role], targets[role],
                                             actors[role], cfg, batch_rngs[role])
                    total = l1.add(l2)
                    if not math.isfinite(total.item()):
                        abort(step, role, "critic loss is not finite")
                    opt_critic[role].zero_grad()
                    tape.backward(total)
                    opt_critic[role].step()
                soft_update(targets[role].parameters(),
                            critics[role].parameters(), cfg.tau)

                with Tape() as tape:
                    la = bc_actor_loss(batch, actors[role], critics[role], cfg)
                    if not math.isfinite(la.item()):
                        abort(step, role, "actor loss is not finite")
                    opt_actor[role].zero_grad()
                    tape.backward(la)
                    opt_actor[role].step()
            except NonFiniteGradient as e:
                abort(step, role, f"non-finite gradient in {e}")
            metrics[role].append((step, l1.item(), l2.item(), la.item(),
                                  last_probe))
        if episodes is not None and step % cfg.eval_interval == 0:
            last_probe = probe()
            for role in MANEUVERS:
                metrics[role][-1] = metrics[role][-1][:4] + (last_probe,)

    if episodes is not None:
        improvement = reward_improvement(actors, episodes, scenario, seed=seed)

    if out_dir is not None:
        d = Path(out_dir)
        stamp = {"seed": seed, "config_sha256": config_hash(cfg),
                 "scenario_sha256": config_hash(scenario)}
        for role in MANEUVERS:
            actor_to_file(d / f"actor_{role}.npz", actors[role], stamp)
            critic_to_file(d / f"critic_{role}.npz", critics[role], stamp)
            _write_metrics(d / f"metrics_{role}.csv", metrics[role])
    return OfflineResult(actors=actors, critics=critics, metrics=metrics,
                         improvement=improvement)


# -- demonstration corpus ---------------------------------------------------------


def generate_corpus(out_path, scenario: ScenarioConfig | None = None,
                    corpus_cfg: CorpusConfig | None = None, seed: int = 0) -> Path:
    """Write a synthetic demonstration log of scripted noisy driving.

    Controlled vehicles follow the scripted controller with Gaussian action
    noise; a fraction of episodes doubles the noise scale so the data mixes
    clean and sloppy driving.  Background traffic and pedestrians are logged
    too (they are scene context for replay and extra labeled tracks).
    """
    scenario = scenario or corpus_scenario()
    ccfg = corpus_cfg or CorpusConfig()
    env = IntersectionEnv(scenario, seed=seed)
    noise_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD47A)))
    out_path = Path(out_path)
    with TrajectoryWriter(out_path) as w:
        for ep in range(ccfg.n_episodes):
            degraded = noise_rng.uniform() < ccfg.degraded_fraction
            sigma = ccfg.degraded_noise if degraded else ccfg.expert_noise
            env.reset()
            exited_logged: set[int] = set()
            for r in rows_from_state(ep, env.state):
                w.write(r)
            while not env.state.episode_done:
                acts = {}
                for vid in env.active_agents():
                    a = env.expert_action(vid) \
                        + noise_rng.normal(0.0, sigma * ACTION_RANGE)
                    acts[vid] = clamp_action(a)
                env.step(acts)
                for r in rows_from_state(ep, env.state, applied=acts,
                                         skip_ids=exited_logged):
                    w.write(r)
                for v in env.state.vehicles:
                    if v.exited:
                        exited_logged.add(v.vid)
    return out_path
