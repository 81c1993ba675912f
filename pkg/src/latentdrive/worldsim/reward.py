"""Per-step driving reward.

    r = 200 r_collision + v_lon + 10 r_fast + r_out - 5 alpha^2 + 0.2 r_lat - 0.1

with r_collision, r_fast, r_out in {-1, 0} and r_lat = -|alpha| v_lon^2.
"""

DESIRED_SPEED = 8.0

# term name -> weight; the breakdown stores the unweighted term values
REWARD_WEIGHTS = {
    "collision": 200.0,
    "v_lon": 1.0,
    "fast": 10.0,
    "out": 1.0,
    "steer": -5.0,
    "lat": 0.2,
    "const": -0.1,
}
TERMS = tuple(REWARD_WEIGHTS)


def reward_terms(v_lon, steer, collision, out_of_lane, desired_speed=DESIRED_SPEED):
    return {
        "collision": -1.0 if collision else 0.0,
        "v_lon": float(v_lon),
        "fast": -1.0 if v_lon > desired_speed else 0.0,
        "out": -1.0 if out_of_lane else 0.0,
        "steer": float(steer) ** 2,
        "lat": -abs(float(steer)) * float(v_lon) ** 2,
        "const": 1.0,
    }


def weighted_sum(terms):
    total = 0.0
    for name in TERMS:
        total += REWARD_WEIGHTS[name] * terms[name]
    return total


def compute_reward(v_lon, steer, collision, out_of_lane, desired_speed=DESIRED_SPEED):
    """Return ``(reward, breakdown)`` for the post-transition ego state."""
    terms = reward_terms(v_lon, steer, collision, out_of_lane, desired_speed)
    return weighted_sum(terms), terms
