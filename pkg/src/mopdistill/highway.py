"""Seeded multi-lane highway environment with discrete meta-actions.

Observations are V x F matrices of absolute, unnormalized kinematic
features [presence, x, y, vx, vy]; the ego vehicle always occupies row 0.
Background traffic follows the Intelligent Driver Model longitudinally and
never changes lanes. One decision step lasts 1 s, simulated as 4 substeps
of 0.25 s with rectangle-overlap collision checks at each substep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

META_ACTIONS = ("lane_left", "idle", "lane_right", "faster", "slower")
LANE_LEFT, IDLE, LANE_RIGHT, FASTER, SLOWER = range(5)

TARGET_SPEEDS = np.linspace(0.0, 32.0, 9)  # 4 m/s spacing

VEHICLE_LENGTH = 5.0
VEHICLE_WIDTH = 2.0
LANE_WIDTH = 4.0
EGO_ACCEL_MAX = 4.0  # m/s^2
SUBSTEPS = 4
SUBSTEP_DT = 0.25

BASE_SPACING = 40.0  # mean spawn gap at density 1

# IDM parameters for background traffic
IDM_MIN_GAP = 10.0
IDM_TIME_HEADWAY = 1.5
IDM_ACCEL = 3.0
IDM_DECEL = 5.0
IDM_EXPONENT = 4.0

ENV_PRESETS = {
    "lane-3-density-2": (3, 2.0),
    "lane-4-density-2.5": (4, 2.5),
    "lane-5-density-3": (5, 3.0),
}


class EpisodeFinished(RuntimeError):
    """step() was called on an episode that already ended."""


@dataclass
class EnvConfig:
    lanes: int = 3
    density: float = 2.0
    vehicles_count: int = 15  # V, ego included
    features: int = 5         # F
    duration: int = 30        # decision steps
    seed: int = 0

    def __post_init__(self):
        if self.lanes < 2:
            raise ValueError(f"lanes must be >= 2, got {self.lanes}")
        if self.vehicles_count < 1 or self.duration < 1:
            raise ValueError("vehicles_count and duration must be >= 1")

    @property
    def env_id(self) -> str:
        for name, (lanes, density) in ENV_PRESETS.items():
            if lanes == self.lanes and density == self.density:
                return name
        return f"lane-{self.lanes}-density-{self.density:g}"

    @classmethod
    def from_id(cls, env_id: str, **kwargs) -> "EnvConfig":
        if env_id not in ENV_PRESETS:
            raise ValueError(f"unknown environment id {env_id!r}; "
                             f"known: {sorted(ENV_PRESETS)}")
        lanes, density = ENV_PRESETS[env_id]
        return cls(lanes=lanes, density=density, **kwargs)


@dataclass
class VehicleState:
    lane: int
    x: float
    y: float
    v: float
    vy: float = 0.0
    desired_speed: float = 25.0


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def compute_reward(ego: VehicleState, collided: bool, lanes: int) -> float:
    """Highway-style reward mapped to [0, 1].

    raw = -1*[collided] + 0.1*lane/(lanes-1) + 0.4*clip((v-20)/10, 0, 1),
    then rescaled from [-1, 0.5] onto [0, 1].
    """
    if lanes < 2:
        raise ValueError("lanes must be >= 2")
    speed_part = min(max((ego.v - 20.0) / 10.0, 0.0), 1.0)
    raw = (-1.0 if collided else 0.0) + 0.1 * ego.lane / (lanes - 1) + 0.4 * speed_part
    return min(max((raw + 1.0) / 1.5, 0.0), 1.0)


def _idm_acceleration(v: float, v_desired: float, gap: float, closing: float) -> float:
    """Longitudinal Intelligent Driver Model."""
    free = 1.0 - (v / max(v_desired, 1e-6)) ** IDM_EXPONENT
    if gap == math.inf:
        interaction = 0.0
    else:
        s_star = IDM_MIN_GAP + max(0.0, v * IDM_TIME_HEADWAY
                                   + v * closing / (2.0 * math.sqrt(IDM_ACCEL * IDM_DECEL)))
        interaction = (s_star / max(gap, 0.1)) ** 2
    return float(np.clip(IDM_ACCEL * (free - interaction), -IDM_DECEL, IDM_ACCEL))


class HighwayEnv:
    """Single-owner environment instance; use separate instances per episode
    stream when running concurrently."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.ego: VehicleState | None = None
        self.others: list[VehicleState] = []
        self.speed_index = 4
        self.target_lane = 0
        self.steps = 0
        self.done = True
        self.collided = False
        self.last_spawn_gaps: list[float] = []

    # -- lifecycle --------------------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        ego_lane = int(rng.integers(0, cfg.lanes))
        self.speed_index = int(rng.integers(3, 6))  # middle of the speed ladder
        self.ego = VehicleState(lane=ego_lane, x=0.0, y=ego_lane * LANE_WIDTH,
                                v=float(TARGET_SPEEDS[self.speed_index]))
        self.target_lane = ego_lane

        n_background = math.ceil(10 * cfg.density)
        n_ahead = math.ceil(n_background * 2 / 3)
        mean_gap = BASE_SPACING / cfg.density
        self.others = []
        self.last_spawn_gaps = []
        for direction, count in ((1.0, n_ahead), (-1.0, n_background - n_ahead)):
            x = self.ego.x
            for _ in range(count):
                gap = float(rng.exponential(mean_gap))
                self.last_spawn_gaps.append(gap)
                x += direction * (gap + VEHICLE_LENGTH)
                lane = int(rng.integers(0, cfg.lanes))
                speed = float(rng.uniform(16.0, 24.0))
                self.others.append(VehicleState(lane=lane, x=x, y=lane * LANE_WIDTH,
                                                v=speed, desired_speed=speed))
        self.steps = 0
        self.done = False
        self.collided = False
        return self.observe()

    # -- dynamics ---------------------------------------------------------

    def _leader(self, vehicle: VehicleState, lane: int, include_ego: bool):
        best_gap, best = math.inf, None
        candidates = list(self.others)
        if include_ego and self.ego is not None:
            candidates.append(self.ego)
        for other in candidates:
            if other is vehicle:
                continue
            if self._lane_of(other) != lane:
                continue
            dx = other.x - vehicle.x
            if dx > 0 and dx < best_gap:
                best_gap, best = dx, other
        return best, best_gap

    @staticmethod
    def _lane_of(vehicle: VehicleState) -> int:
        return int(round(vehicle.y / LANE_WIDTH))

    def step(self, action: int) -> StepResult:
        if self.done:
            raise EpisodeFinished("episode is finished; call reset() first")
        if action not in range(len(META_ACTIONS)):
            raise ValueError(f"invalid action {action}")
        cfg = self.config
        ego = self.ego

        if action == FASTER:
            self.speed_index = min(self.speed_index + 1, len(TARGET_SPEEDS) - 1)
        elif action == SLOWER:
            self.speed_index = max(self.speed_index - 1, 0)
        elif action == LANE_LEFT and self.target_lane > 0:
            self.target_lane -= 1
        elif action == LANE_RIGHT and self.target_lane < cfg.lanes - 1:
            self.target_lane += 1
        # lane change at a road edge degrades to idle

        target_speed = float(TARGET_SPEEDS[self.speed_index])
        target_y = self.target_lane * LANE_WIDTH

        for sub in range(SUBSTEPS):
            dv = float(np.clip(target_speed - ego.v, -EGO_ACCEL_MAX * SUBSTEP_DT,
                               EGO_ACCEL_MAX * SUBSTEP_DT))
            ego.v = max(ego.v + dv, 0.0)
            ego.x += ego.v * SUBSTEP_DT
            remaining = SUBSTEPS - sub
            dy = (target_y - ego.y) / remaining
            ego.vy = dy / SUBSTEP_DT
            ego.y += dy
            ego.lane = self._lane_of(ego)

            for other in self.others:
                leader, dist = self._leader(other, other.lane, include_ego=True)
                if leader is None:
                    accel = _idm_acceleration(other.v, other.desired_speed, math.inf, 0.0)
                else:
                    gap = dist - VEHICLE_LENGTH
                    accel = _idm_acceleration(other.v, other.desired_speed, gap,
                                              other.v - leader.v)
                other.v = max(other.v + accel * SUBSTEP_DT, 0.0)
                other.x += other.v * SUBSTEP_DT

            for other in self.others:
                if (abs(other.x - ego.x) < VEHICLE_LENGTH
                        and abs(other.y - ego.y) < VEHICLE_WIDTH):
                    self.collided = True
            if self.collided:
                break

        ego.vy = 0.0 if abs(target_y - ego.y) < 1e-9 else ego.vy
        self.steps += 1
        self.done = self.collided or self.steps >= cfg.duration
        reward = compute_reward(ego, self.collided, cfg.lanes)
        info = {"collided": self.collided, "ego_speed": ego.v, "ego_lane": ego.lane}
        return StepResult(self.observe(), reward, self.done, info)

    # -- observation ------------------------------------------------------

    def observe(self) -> np.ndarray:
        cfg = self.config
        ego = self.ego
        obs = np.zeros((cfg.vehicles_count, cfg.features))
        obs[0] = [1.0, ego.x, ego.y, ego.v, ego.vy]

        def sort_key(o: VehicleState):
            dx = o.x - ego.x
            return (abs(dx), o.lane, 0 if dx >= 0 else 1)

        for row, other in enumerate(sorted(self.others, key=sort_key), start=1):
            if row >= cfg.vehicles_count:
                break
            obs[row] = [1.0, other.x, other.y, other.v, other.vy]
        return obs
