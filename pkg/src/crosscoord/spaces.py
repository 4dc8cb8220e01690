"""Observation and action space contracts shared across the library.

The per-agent observation is one flat float64 vector:

    [ core (6) | vehicle slots (K_v x 5) | pedestrian slots (K_p x 3)
      | role one-hot (3) | context one-hot (3) ]

core      = [speed, x, y, heading, dist_to_center, in_junction]
veh slot  = [valid, dx, dy, dvx, dvy]         nearest-first, zero-padded
ped slot  = [valid, distance, bearing]        nearest-first, zero-padded

All features are scaled by the constants below so magnitudes stay roughly
inside [-1, 1].  Invalid slots are all-zero; sanitize() re-zeroes them so
network outputs never depend on padding content.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# action vector: [longitudinal acceleration (m/s^2), steering rate (rad/s)]
ACC_MIN, ACC_MAX = -6.0, 3.0
STEER_RATE_MAX = 0.6
ACTION_DIM = 2
ACTION_LOW = np.array([ACC_MIN, -STEER_RATE_MAX])
ACTION_HIGH = np.array([ACC_MAX, STEER_RATE_MAX])
ACTION_RANGE = ACTION_HIGH - ACTION_LOW

# normalization constants (m, m/s, rad)
POS_SCALE = 50.0
SPEED_SCALE = 12.0
REL_POS_SCALE = 30.0
REL_SPEED_SCALE = 24.0
PED_DIST_SCALE = 20.0

ROLES = ("left", "straight", "right")
N_CONTEXTS = 3  # curriculum stages: 1, 2 or 3 controlled vehicles

CORE_DIM = 6
VEH_FEAT = 5
PED_FEAT = 3
TOKEN_TYPE_DIM = 3
TOKEN_PAYLOAD_DIM = CORE_DIM + len(ROLES) + N_CONTEXTS  # widest token payload


def clamp_action(action: np.ndarray) -> np.ndarray:
    """Clip an action vector to the physical bounds."""
    return np.clip(np.asarray(action, dtype=np.float64), ACTION_LOW, ACTION_HIGH)


@dataclass(frozen=True)
class ObsLayout:
    """Slot counts plus index arithmetic for the flat observation vector."""

    n_vehicle_slots: int = 4
    n_ped_slots: int = 3

    @property
    def dim(self) -> int:
        return (CORE_DIM + self.n_vehicle_slots * VEH_FEAT
                + self.n_ped_slots * PED_FEAT + len(ROLES) + N_CONTEXTS)

    @property
    def veh_start(self) -> int:
        return CORE_DIM

    @property
    def ped_start(self) -> int:
        return CORE_DIM + self.n_vehicle_slots * VEH_FEAT

    @property
    def role_start(self) -> int:
        return self.ped_start + self.n_ped_slots * PED_FEAT

    @property
    def ctx_start(self) -> int:
        return self.role_start + len(ROLES)

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_vehicle_slots + self.n_ped_slots

    @property
    def token_dim(self) -> int:
        return TOKEN_TYPE_DIM + TOKEN_PAYLOAD_DIM

    def veh_slot(self, i: int) -> slice:
        s = self.veh_start + i * VEH_FEAT
        return slice(s, s + VEH_FEAT)

    def ped_slot(self, i: int) -> slice:
        s = self.ped_start + i * PED_FEAT
        return slice(s, s + PED_FEAT)

    def sanitize(self, obs: np.ndarray) -> np.ndarray:
        """Zero every feature of slots whose valid flag is 0.

        Guarantees network outputs are a function of valid content only,
        even if a caller hands in garbage padding.
        """
        obs = np.array(obs, dtype=np.float64, copy=True)
        flat = obs.ndim == 1
        if flat:
            obs = obs[None, :]
        for i in range(self.n_vehicle_slots):
            sl = self.veh_slot(i)
            invalid = obs[:, sl.start] < 0.5
            obs[invalid, sl] = 0.0
        for i in range(self.n_ped_slots):
            sl = self.ped_slot(i)
            invalid = obs[:, sl.start] < 0.5
            obs[invalid, sl] = 0.0
        return obs[0] if flat else obs

    def to_tokens(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split flat observations into per-entity tokens for attention.

        Returns (tokens, valid): tokens is (B, n_tokens, token_dim) with a
        leading type one-hot [ego, vehicle, pedestrian] and zero-padded
        payload; valid is (B, n_tokens) in {0, 1} with the ego token always
        valid.  Invalid slots are sanitized to zero payload first.
        """
        obs = self.sanitize(obs)
        flat = obs.ndim == 1
        if flat:
            obs = obs[None, :]
        b = obs.shape[0]
        tokens = np.zeros((b, self.n_tokens, self.token_dim))
        valid = np.zeros((b, self.n_tokens))

        tokens[:, 0, 0] = 1.0
        tokens[:, 0, TOKEN_TYPE_DIM:TOKEN_TYPE_DIM + CORE_DIM] = obs[:, :CORE_DIM]
        tokens[:, 0, TOKEN_TYPE_DIM + CORE_DIM:TOKEN_TYPE_DIM + CORE_DIM + len(ROLES)] = \
            obs[:, self.role_start:self.role_start + len(ROLES)]
        tokens[:, 0, TOKEN_TYPE_DIM + CORE_DIM + len(ROLES):] = \
            obs[:, self.ctx_start:self.ctx_start + N_CONTEXTS]
        valid[:, 0] = 1.0

        for i in range(self.n_vehicle_slots):
            row = 1 + i
            sl = self.veh_slot(i)
            tokens[:, row, 1] = 1.0
            tokens[:, row, TOKEN_TYPE_DIM:TOKEN_TYPE_DIM + VEH_FEAT] = obs[:, sl]
            valid[:, row] = obs[:, sl.start]
        for i in range(self.n_ped_slots):
            row = 1 + self.n_vehicle_slots + i
            sl = self.ped_slot(i)
            tokens[:, row, 2] = 1.0
            tokens[:, row, TOKEN_TYPE_DIM:TOKEN_TYPE_DIM + PED_FEAT] = obs[:, sl]
            valid[:, row] = obs[:, sl.start]

        if flat:
            return tokens[0], valid[0]
        return tokens, valid

    def role_onehot(self, role: str) -> np.ndarray:
        vec = np.zeros(len(ROLES))
        vec[ROLES.index(role)] = 1.0
        return vec

    def ctx_onehot(self, n_controlled: int) -> np.ndarray:
        vec = np.zeros(N_CONTEXTS)
        vec[min(max(n_controlled, 1), N_CONTEXTS) - 1] = 1.0
        return vec
