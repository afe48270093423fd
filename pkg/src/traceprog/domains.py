"""Trace generators for the shipped experiments.

Three desk-scale domains: a second-order dynamical system (pendulum or
linear oscillator depending on the coefficients), a scripted proportional
paddle controller standing in for a game-playing agent, and pick/place
tower-building demonstrations in a 2D arena.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trace import ObservationTrace, Schema, Step

__all__ = [
    "SecondOrderSystem", "simulate_second_order",
    "PaddlePolicy", "generate_paddle_trace",
    "DemoMove", "DemoScenario", "generate_demo", "random_demo_scenario",
    "DEMO_D_MAX",
]

DEMO_D_MAX = 20.0  # maximum distance within the simulated 2D arena


@dataclass(frozen=True)
class SecondOrderSystem:
    """x'' = k1 * x + k2 * x', integrated semi-implicitly."""
    k1: float
    k2: float
    x0: float = 1.0
    v0: float = 0.0
    dt: float = 0.01
    steps: int = 100

    def __post_init__(self):
        if not (self.dt > 0):
            raise ValueError("dt must be positive")
        if self.steps < 2:
            raise ValueError("need at least 2 steps")


def simulate_second_order(sys: SecondOrderSystem) -> ObservationTrace:
    """Each step records the pre-step state {x, v} and accel(theta) with
    theta = k1*x + k2*v evaluated at that state."""
    schema = Schema({"x": 1, "v": 1}, {"accel": 1})
    x, v = float(sys.x0), float(sys.v0)
    steps = []
    for _ in range(sys.steps):
        theta = sys.k1 * x + sys.k2 * v
        steps.append(Step({"x": [x], "v": [v]}, "accel", [theta]))
        v = v + theta * sys.dt
        x = x + v * sys.dt
    return ObservationTrace(schema, steps)


@dataclass(frozen=True)
class PaddlePolicy:
    """Proportional controller: theta = c_agent * agent_y + c_ball * ball_y.

    With clip set, theta is collapsed to {-1, 0, 1} (dead zone below
    ``clip_dead``), mirroring a discrete left/right/nop action set.
    """
    c_agent: float = -0.31
    c_ball: float = 0.34
    clip: bool = False
    clip_dead: float = 0.05

    def theta(self, agent_y: float, ball_y: float) -> float:
        raw = self.c_agent * agent_y + self.c_ball * ball_y
        if not self.clip:
            return raw
        if abs(raw) <= self.clip_dead:
            return 0.0
        return 1.0 if raw > 0 else -1.0


def generate_paddle_trace(policy: PaddlePolicy, steps: int = 200) -> ObservationTrace:
    """Kinematic stand-in for one game: the ball bounces in [0, 1], the
    opponent sweeps independently, the agent integrates the policy output.

    States record the three vertical positions a frame detector would emit.
    """
    if steps < 2:
        raise ValueError("need at least 2 steps")
    schema = Schema({"agent_y": 1, "ball_y": 1, "opp_y": 1}, {"move": 1})
    agent, ball, opp = 0.5, 0.3, 0.8
    ball_v, opp_v = 0.037, -0.013
    records = []
    for _ in range(steps):
        theta = policy.theta(agent, ball)
        records.append(Step({"agent_y": [agent], "ball_y": [ball], "opp_y": [opp]},
                            "move", [theta]))
        agent += 0.5 * theta
        ball += ball_v
        if ball > 1.0 or ball < 0.0:
            ball_v = -ball_v
            ball += 2 * ball_v
        opp += opp_v
        if opp > 1.0 or opp < 0.0:
            opp_v = -opp_v
            opp += 2 * opp_v
    return ObservationTrace(schema, records)


@dataclass(frozen=True)
class DemoMove:
    """Move one cube: relative to a reference cube, or to an absolute spot."""
    cube: str
    offset: tuple[float, float]
    ref: str | None = None      # None: offset is an absolute target position


@dataclass(frozen=True)
class DemoScenario:
    cubes: tuple[tuple[str, tuple[float, float]], ...]
    moves: tuple[DemoMove, ...]
    d_max: float = DEMO_D_MAX
    jitter: float = 0.0         # optional Gaussian noise on recorded positions
    jitter_seed: int = 0

    def __post_init__(self):
        ids = {c for c, _ in self.cubes}
        for mv in self.moves:
            if mv.cube not in ids or (mv.ref is not None and mv.ref not in ids):
                raise ValueError(f"move references missing cube: {mv}")
        for _, pos in self.cubes:
            if max(abs(pos[0]), abs(pos[1])) > self.d_max:
                raise ValueError("cube outside the arena")


def _demo_schema(scn: DemoScenario) -> Schema:
    return Schema({f"loc_{c}": 2 for c, _ in scn.cubes}, {"pick": 2, "place": 2})


def generate_demo(scn: DemoScenario) -> ObservationTrace:
    """Alternating pick/place actions with 2D targets.

    pick takes the moved cube's current position; place takes the reference
    cube's current position plus the offset (or the absolute target).  The
    following step's state reflects the placement.
    """
    schema = _demo_schema(scn)
    rng = np.random.default_rng(scn.jitter_seed)
    pos = {c: np.asarray(p, dtype=np.float64) for c, p in scn.cubes}
    steps = []

    def state() -> dict:
        snap = {}
        for c, _ in scn.cubes:
            value = pos[c]
            if scn.jitter > 0:
                value = value + rng.normal(0.0, scn.jitter, 2)
            snap[f"loc_{c}"] = value
        return snap

    for mv in scn.moves:
        steps.append(Step(state(), "pick", pos[mv.cube].copy()))
        target = np.asarray(mv.offset, dtype=np.float64)
        if mv.ref is not None:
            target = pos[mv.ref] + target
        steps.append(Step(state(), "place", target.copy()))
        pos[mv.cube] = target
    return ObservationTrace(schema, steps)


def random_demo_scenario(n_cubes: int, seed: int, arena: float = 6.0,
                         min_gap: float = 3.0, jitter: float = 0.0) -> DemoScenario:
    """Seeded tower-building scenario: spread cubes, then stack each cube on
    the previous one with a small "above" offset.

    Cubes are kept at least ``min_gap`` apart so the stacking reference is
    always the nearest cube to each place target.
    """
    if n_cubes < 2:
        raise ValueError("need at least 2 cubes")
    rng = np.random.default_rng(seed)
    positions: list[np.ndarray] = []
    while len(positions) < n_cubes:
        cand = rng.uniform(-arena, arena, 2)
        if all(np.linalg.norm(cand - p) >= min_gap for p in positions):
            positions.append(cand)
    cubes = tuple((f"c{i + 1}", (float(p[0]), float(p[1])))
                  for i, p in enumerate(positions))
    moves = []
    for i in range(1, n_cubes):
        offset = (float(rng.uniform(-0.15, 0.15)), float(rng.uniform(0.95, 1.35)))
        moves.append(DemoMove(cube=f"c{i + 1}", offset=offset, ref=f"c{i}"))
    return DemoScenario(cubes, tuple(moves), jitter=jitter, jitter_seed=seed)
