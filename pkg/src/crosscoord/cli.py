"""Command-line entry point: corpus generation, both training stages, the
ablation pair, protocol-in-the-loop evaluation, generalization to the
alternate map, and curve smoothing for plots.

Every artifact a subcommand writes embeds the seed and a hash of the exact
config used, and a re-run with identical inputs reproduces every numeric
output byte for byte (wall-time columns excepted).  Log verbosity comes
from the CROSSCOORD_LOG environment variable (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from crosscoord.config import (
    CorpusConfig,
    OfflineConfig,
    OnlineConfig,
    ScenarioConfig,
    config_hash,
    corpus_scenario,
    load_scenario,
    offline_from_dict,
    online_from_dict,
    save_config,
    scenario_for_map,
)
from crosscoord.env.geometry import MANEUVERS
from crosscoord.env.world import IntersectionEnv
from crosscoord.nets import actor_from_file
from crosscoord.offline import generate_corpus, load_offline_data, train_offline
from crosscoord.online import train_online
from crosscoord.rsu import make_rsu, run_rsu_episode, write_monitor_log
from crosscoord.trajlog import TrajectoryWriter

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class EvalSummary:
    """Aggregate outcome of a deterministic evaluation run.

    The failure percentage is defined as collision + timeout so the
    accounting identity holds exactly, not merely to rounding.
    """

    episodes: int
    collisions: int
    timeouts: int
    collision_pct: float
    timeout_pct: float
    failure_pct: float
    avg_travel_time_s: float            # over successful episodes' agents
    per_agent_travel_s: dict[str, float]
    n_controlled: int
    map_variant: str
    seed: int
    config_sha256: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _load_actors(checkpoint_dir: str | Path):
    checkpoint_dir = Path(checkpoint_dir)
    actors = {}
    for role in MANEUVERS:
        path = checkpoint_dir / f"actor_{role}.npz"
        if not path.exists():
            raise FileNotFoundError(
                f"missing checkpoint {path} (need one actor per role: "
                + ", ".join(f"actor_{r}.npz" for r in MANEUVERS) + ")")
        actors[role], _ = actor_from_file(path)
    return actors


def _scenario(args) -> ScenarioConfig:
    scen = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
    if getattr(args, "cavs", None):
        scen = dataclasses.replace(scen, n_controlled=args.cavs)
    return scenario_for_map(scen, getattr(args, "map", "default"))


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    scen = load_scenario(args.scenario) if args.scenario else corpus_scenario()
    corpus_cfg = CorpusConfig(n_episodes=args.episodes)
    out = generate_corpus(args.out, scenario=scen, corpus_cfg=corpus_cfg,
                          seed=args.seed)
    meta = {"seed": args.seed, "episodes": args.episodes,
            "config_sha256": config_hash(scen, corpus_cfg)}
    with open(Path(out).with_suffix(".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out} ({args.episodes} episodes, seed {args.seed})")
    return 0


def cmd_train_offline(args) -> int:
    scen = load_scenario(args.scenario) if args.scenario else corpus_scenario()
    overrides = json.loads(args.config.read_text()) if args.config else {}
    cfg = offline_from_dict(overrides)
    if args.steps:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    datasets, episodes = load_offline_data(args.data, scen)
    result = train_offline(datasets, cfg, scen, episodes=episodes,
                           seed=args.seed, out_dir=args.out)
    save_config(Path(args.out) / "offline_config.json", cfg)
    save_config(Path(args.out) / "scenario.json", scen)
    imp = result.improvement
    line = "reward improvement undefined (non-positive dataset mean)"
    if imp is not None and imp.defined:
        line = f"reward improvement {imp.percent:.1f}%"
    print(f"offline training done: 3 actors -> {args.out}; {line}")
    return 0


def cmd_train_online(args) -> int:
    scen = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
    overrides = json.loads(args.config.read_text()) if args.config else {}
    cfg = online_from_dict(overrides)
    if args.episodes:
        cfg = dataclasses.replace(cfg, total_episodes=args.episodes)
    init_actors = _load_actors(args.from_offline) if args.from_offline else None
    result = train_online(cfg, scen, seed=args.seed, init_actors=init_actors,
                          out_dir=args.out)
    save_config(Path(args.out) / "online_config.json", cfg)
    save_config(Path(args.out) / "scenario.json", scen)
    n_succ = sum(c.success for c in result.curves)
    print(f"online training done: {len(result.curves)} episodes "
          f"({n_succ} successes), final stage {result.final_stage}, "
          f"init {'offline' if result.pretrained_init else 'scratch'} "
          f"-> {args.out}")
    return 0


def evaluate_checkpoint(actors, scen: ScenarioConfig, episodes: int, seed: int,
                        map_variant: str, out_dir: Path | None = None,
                        log_trajectories: bool = False) -> EvalSummary:
    """Deterministic-policy evaluation through the coordination loop with
    ideal links; one fresh coordinator per episode."""
    env = IntersectionEnv(scen, seed=seed)
    collisions = timeouts = 0
    travel: dict[int, list[float]] = {}
    writer = None
    if out_dir is not None and log_trajectories:
        writer = TrajectoryWriter(Path(out_dir) / "trajectories.csv")
        writer.__enter__()
    try:
        for ep in range(episodes):
            rsu_state = make_rsu(actors, scen)
            final = run_rsu_episode(env, rsu_state, episode=ep, writer=writer)
            if final.outcome == "collision":
                collisions += 1
            elif final.outcome != "success":
                timeouts += 1
            for v in final.cavs():
                if v.succeeded and v.success_step is not None:
                    travel.setdefault(v.vid, []).append(
                        (v.success_step - v.spawn_step) * scen.dt)
    finally:
        if writer is not None:
            writer.__exit__(None, None, None)
    collision_pct = 100.0 * collisions / episodes
    timeout_pct = 100.0 * timeouts / episodes
    all_times = [t for times in travel.values() for t in times]
    summary = EvalSummary(
        episodes=episodes, collisions=collisions, timeouts=timeouts,
        collision_pct=collision_pct, timeout_pct=timeout_pct,
        failure_pct=collision_pct + timeout_pct,
        avg_travel_time_s=float(np.mean(all_times)) if all_times else float("nan"),
        per_agent_travel_s={str(vid): float(np.mean(ts))
                            for vid, ts in sorted(travel.items())},
        n_controlled=scen.n_controlled, map_variant=map_variant, seed=seed,
        config_sha256=config_hash(scen))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(summary.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


def cmd_evaluate(args) -> int:
    scen = _scenario(args)
    actors = _load_actors(args.checkpoint)
    summary = evaluate_checkpoint(actors, scen, args.episodes, args.seed,
                                  args.map, out_dir=args.out,
                                  log_trajectories=args.log_trajectories)
    print(f"{summary.episodes} episodes ({summary.n_controlled} CAV, "
          f"{summary.map_variant} map): failure {summary.failure_pct:.2f}% "
          f"(collision {summary.collision_pct:.2f}%, timeout "
          f"{summary.timeout_pct:.2f}%), avg travel "
          f"{summary.avg_travel_time_s:.2f}s")
    return 0


def cmd_generalize(args) -> int:
    args.map = "alt"
    return cmd_evaluate(args)


def rolling_mean(values, window: int) -> list[float]:
    """Trailing mean over up to ``window`` latest points (shorter at the
    start, so the output has the input's length)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(values[lo:i + 1].mean()))
    return out


def _smooth_csv(src: Path, dst: Path, smooth_cols: tuple[str, ...],
                window: int) -> None:
    with open(src, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    idx = {c: header.index(c) for c in smooth_cols if c in header}
    smoothed = {c: rolling_mean([float(r[i]) for r in body], window)
                for c, i in idx.items()}
    with open(dst, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, row in enumerate(body):
            out = list(row)
            for c, i in idx.items():
                out[i] = repr(smoothed[c][k])
            writer.writerow(out)


def cmd_emit_curves(args) -> int:
    run_dir = Path(args.run_dir)
    produced = []
    online_curves = run_dir / "curves.csv"
    if online_curves.exists():
        dst = run_dir / "curves_smooth.csv"
        _smooth_csv(online_curves, dst, ("reward", "success"), args.window)
        produced.append(dst)
    for role in MANEUVERS:
        src = run_dir / f"metrics_{role}.csv"
        if src.exists():
            dst = run_dir / f"metrics_{role}_smooth.csv"
            _smooth_csv(src, dst, ("q1_loss", "q2_loss", "actor_loss",
                                   "reward_improvement"), args.window)
            produced.append(dst)
    if not produced:
        raise FileNotFoundError(
            f"no curve files under {run_dir}; expected curves.csv (online "
            f"runs) or metrics_<role>.csv (offline runs)")
    for p in produced:
        print(f"wrote {p}")
    return 0


# -- argument wiring ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosscoord",
        description="RSU-coordinated intersection crossing: data, training, "
                    "evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--scenario", type=Path, default=None,
                       help="scenario config JSON (defaults per subcommand)")
        p.add_argument("--out", type=Path, required=out_required)

    p = sub.add_parser("gen-data", help="log scripted-expert episodes")
    common(p)
    p.add_argument("--episodes", type=int, default=CorpusConfig.n_episodes)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-offline", help="conservative offline pretraining")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config", type=Path, default=None,
                   help="JSON overriding offline training fields")
    p.set_defaults(func=cmd_train_offline)

    p = sub.add_parser("train-online", help="on-policy fine-tuning")
    common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--from-offline", type=Path, default=None,
                     help="directory holding pretrained actor_<role>.npz")
    src.add_argument("--scratch", action="store_true")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--config", type=Path, default=None,
                   help="JSON overriding online training fields")
    p.set_defaults(func=cmd_train_online)

    p = sub.add_parser("evaluate", help="deterministic evaluation via the RSU loop")
    common(p, out_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--cavs", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--map", choices=("default", "alt"), default="default")
    p.add_argument("--log-trajectories", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generalize", help="evaluate on the alternate map")
    common(p, out_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--cavs", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--log-trajectories", action="store_true")
    p.set_defaults(func=cmd_generalize)

    p = sub.add_parser("emit-curves", help="rolling-window smoothing for plots")
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--window", type=int, default=50)
    p.set_defaults(func=cmd_emit_curves)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CROSSCOORD_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
