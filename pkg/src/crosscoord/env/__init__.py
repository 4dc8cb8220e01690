from crosscoord.env.geometry import MapGeometry, RouteSpec, time_to_collision, wrap_angle
from crosscoord.env.world import IntersectionEnv, StepResult, WorldState, background_controller
from crosscoord.env.observation import build_observation
from crosscoord.env.reward import compute_reward

__all__ = [
    "IntersectionEnv", "MapGeometry", "RouteSpec", "StepResult", "WorldState",
    "background_controller", "build_observation", "compute_reward",
    "time_to_collision", "wrap_angle",
]
