"""Desk-scale 2D urban driving simulator with camera, lidar and mask renderers."""

from .env import (
    DONE_REASONS,
    NPC,
    DrivingEnv,
    EnvConfig,
    EnvState,
    Observation,
    StepResult,
    ego_collides,
    npc_policy,
    reset,
    step,
    transform_state,
)
from .geometry import RigidTransform, VehicleState, collides
from .render import render_camera, render_lidar, render_mask, render_observation
from .reward import REWARD_WEIGHTS, compute_reward, weighted_sum
from .roadmap import MapSpec, Route, generate_map, plan_route

__all__ = [
    "DONE_REASONS",
    "NPC",
    "DrivingEnv",
    "EnvConfig",
    "EnvState",
    "MapSpec",
    "Observation",
    "REWARD_WEIGHTS",
    "RigidTransform",
    "Route",
    "StepResult",
    "VehicleState",
    "collides",
    "compute_reward",
    "ego_collides",
    "generate_map",
    "npc_policy",
    "plan_route",
    "render_camera",
    "render_lidar",
    "render_mask",
    "render_observation",
    "reset",
    "step",
    "transform_state",
    "weighted_sum",
]
