import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from latentdrive.worldsim import NPC, EnvConfig, Route, VehicleState, reset

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def empty_state():
    """Default-config state with no NPCs."""
    state, _ = reset(EnvConfig(npc_count=0), 3)
    return state


def with_npc(state, forward, left, heading=0.0, v=0.0):
    """Copy of ``state`` plus one NPC at an ego-frame offset (metres, radians)."""
    ego = state.ego
    c, s = np.cos(ego.heading), np.sin(ego.heading)
    x = ego.x + c * forward - s * left
    y = ego.y + s * forward + c * left
    cfg = state.config
    veh = VehicleState(float(x), float(y), float(ego.heading + heading), v,
                       cfg.vehicle_length, cfg.vehicle_width)
    # a straight private route through the pose, so the NPC stays put when stepped
    d = np.array([np.cos(veh.heading), np.sin(veh.heading)])
    p = np.array([veh.x, veh.y])
    route = Route([-1], [p - 50.0 * d, p + 200.0 * d], truncated=True)
    new = state.copy()
    new.npcs = list(new.npcs) + [NPC(veh, route, 50.0, [(veh.x, veh.y, veh.heading)])]
    return new


def shifted_ego(state, dx=0.13, dy=-0.07, dh=0.011):
    """Nudge the ego off pixel-aligned poses."""
    new = state.copy()
    e = new.ego
    new.ego = dataclasses.replace(e, x=e.x + dx, y=e.y + dy, heading=e.heading + dh)
    return new
