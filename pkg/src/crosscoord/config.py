"""Run configuration dataclasses, JSON round-tripping, and config hashing.

Every artifact the library writes embeds the sha256 hash of the canonical
JSON form of the configuration that produced it, plus the seed, so runs
can be traced back to their exact settings.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from typing import TYPE_CHECKING

from crosscoord.spaces import ObsLayout

if TYPE_CHECKING:
    from crosscoord.env.geometry import MapGeometry


@dataclass(frozen=True)
class RewardWeights:
    safety: float = 2.0
    efficiency: float = 0.5
    comfort: float = 0.2
    task: float = 3.0
    yielding: float = 0.3
    cooperation: float = 0.5
    penalty: float = 5.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything that defines one intersection scenario distribution."""

    # map
    arm_length: float = 40.0
    lane_width: float = 3.5
    crosswalk_offset: float = 1.0
    goal_offset: float = 6.0
    # population: n_vehicles_total - n_controlled scripted background vehicles
    n_controlled: int = 1
    n_vehicles_total: int = 5
    n_pedestrians_max: int = 3
    # physics
    dt: float = 0.1
    max_steps: int = 300
    v_max: float = 12.0
    v_target: float = 6.0
    vehicle_half_len: float = 2.4
    vehicle_half_wid: float = 1.0
    ped_radius: float = 0.3
    # spawning (distances from the junction box edge, fractions of arm length)
    spawn_frac_lo: float = 0.2
    spawn_frac_hi: float = 0.45
    spawn_min_gap: float = 8.0
    speed_init_lo: float = 4.2
    speed_init_hi: float = 6.0
    # sensing
    n_vehicle_slots: int = 4
    n_ped_slots: int = 3
    vehicle_sense_radius: float = 30.0
    ped_sense_radius: float = 20.0
    obs_noise_sigma: float = 0.0
    # pedestrians
    ped_speed: float = 1.3
    ped_start_window: float = 8.0
    ped_gap_time: float = 3.0
    # reward shaping
    weights: RewardWeights = field(default_factory=RewardWeights)
    ttc_threshold: float = 3.0
    distance_threshold: float = 4.0

    def geometry(self) -> "MapGeometry":
        # local import: crosscoord.env.world imports this module at load time
        from crosscoord.env.geometry import get_geometry
        return get_geometry(self.arm_length, self.lane_width,
                            self.crosswalk_offset, self.goal_offset)

    def layout(self) -> ObsLayout:
        return ObsLayout(n_vehicle_slots=self.n_vehicle_slots, n_ped_slots=self.n_ped_slots)


# the alternate evaluation map: shorter arms, narrower lanes
ALT_MAP_OVERRIDES = {"arm_length": 25.0, "lane_width": 3.2}


def corpus_scenario(base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Scenario used when generating the demonstration corpus.

    Lighter traffic, closer spawns, and softer efficiency/comfort weighting
    than the evaluation scenario: scripted driving earns a clearly positive
    mean episodic return here, which keeps the offline improvement ratio
    well defined (it divides by the dataset's mean return).
    """
    base = base or ScenarioConfig()
    return dataclasses.replace(
        base,
        n_vehicles_total=2,
        n_pedestrians_max=1,
        v_target=5.0,
        spawn_frac_lo=0.1,
        spawn_frac_hi=0.35,
        distance_threshold=3.5,
        weights=dataclasses.replace(base.weights, efficiency=0.2, comfort=0.05),
    )


@dataclass(frozen=True)
class CorpusConfig:
    """Synthetic demonstration-corpus generator settings.

    Episodes are driven by the scripted controller with Gaussian action
    noise; a fraction of them get a larger noise scale so the corpus mixes
    competent and sloppy behavior.
    """

    n_episodes: int = 400
    expert_noise: float = 0.1          # std as a fraction of each action range
    degraded_noise: float = 0.2
    degraded_fraction: float = 0.3


def scenario_for_map(base: ScenarioConfig, map_variant: str) -> ScenarioConfig:
    if map_variant == "default":
        return base
    if map_variant == "alt":
        return dataclasses.replace(base, **ALT_MAP_OVERRIDES)
    raise ValueError(f"unknown map variant {map_variant!r} (use 'default' or 'alt')")


@dataclass(frozen=True)
class OfflineConfig:
    """Conservative offline pre-training settings."""

    gamma: float = 0.99
    tau: float = 0.005                 # target-network soft update rate
    alpha_cql: float = 1.0             # conservatism weight
    lambda_bc: float = 1.0             # behavior-cloning weight
    n_sampled_actions: int = 10        # uniform actions in the conservatism term
    batch_size: int = 256
    steps: int = 20000
    lr: float = 3e-4
    hidden: tuple[int, ...] = (128, 128)
    eval_interval: int = 1000          # gradient steps between reward evaluations
    eval_episodes: int = 20            # dataset episodes replayed per evaluation
    norm_std_floor: float = 0.05


@dataclass(frozen=True)
class OnlineConfig:
    """On-policy fine-tuning settings."""

    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    rollout_steps: int = 2048          # transitions collected per update cycle
    n_envs: int = 8
    epochs: int = 4
    minibatch: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    max_grad_norm: float = 0.5
    per_alpha: float = 0.6
    per_beta0: float = 0.4
    per_beta1: float = 1.0
    per_beta_anneal: int = 150         # update cycles to anneal beta over
    per_eps: float = 1e-4
    adv_standardize: bool = True
    hidden: tuple[int, ...] = (128, 128)
    d_model: int = 64
    n_heads: int = 4
    d_k: int = 16
    total_episodes: int = 3000
    curriculum_threshold: float = 0.85
    curriculum_window: int = 200
    fixed_stage: int = 0               # 0 = full curriculum; 1..3 locks the CAV count


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def to_dict(cfg) -> dict:
    return _to_jsonable(cfg)


def config_hash(*cfgs) -> str:
    """sha256 over the canonical JSON of one or more config objects."""
    blob = json.dumps([_to_jsonable(c) for c in cfgs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if f.name == "weights":
            v = RewardWeights(**v)
        elif f.name == "hidden":
            v = tuple(v)
        kwargs[f.name] = v
    unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**kwargs)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    return _from_dict(ScenarioConfig, data)


def offline_from_dict(data: dict) -> OfflineConfig:
    return _from_dict(OfflineConfig, data)


def online_from_dict(data: dict) -> OnlineConfig:
    return _from_dict(OnlineConfig, data)


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario config from a JSON file; missing keys use defaults."""
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def save_config(path, cfg) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_to_jsonable(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
