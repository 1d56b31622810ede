"""
swarm-markers - Shepherding simulation core
Seedable Drive/Collect shepherding simulation with heterogeneous sheep profiles.
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.spatial.distance import cdist

from artifacts import atomic_write
from errors import ConfigurationError, SchemaError

logger = logging.getLogger(__name__)

_EPS = 1e-12


# -------------------------------------------------
# Agent Profiles
# -------------------------------------------------

class ProfileLabel(str, Enum):
    A1 = "A1"
    A2 = "A2"
    A3 = "A3"
    A4 = "A4"
    A5 = "A5"
    A6 = "A6"
    A7 = "A7"


PROFILE_NAMES: Dict[ProfileLabel, str] = {
    ProfileLabel.A1: "Scout",
    ProfileLabel.A2: "Control Detractor",
    ProfileLabel.A3: "Swarm Detractor",
    ProfileLabel.A4: "Nomad",
    ProfileLabel.A5: "Dispersed",
    ProfileLabel.A6: "Unwilling",
    ProfileLabel.A7: "Classic",
}

# parameter -> (high, medium, low)
WEIGHT_LEVELS: Dict[str, Tuple[float, float, float]] = {
    "w_lcm": (1.5, 1.05, 0.5),
    "w_pipi": (3.0, 2.0, 1.5),
    "w_beta": (1.9, 1.0, 0.5),
    "speed_ratio": (1.0, 0.67, 0.5),
}


class AgentProfile(BaseModel):
    """Four-parameter behaviour of a sheep agent."""
    model_config = ConfigDict(frozen=True)

    label: ProfileLabel
    w_lcm: float = Field(..., gt=0, description="attraction to the local centre of mass")
    w_pipi: float = Field(..., gt=0, description="repulsion from close sheep")
    w_beta: float = Field(..., gt=0, description="repulsion from the shepherd")
    speed_ratio: float = Field(..., gt=0, le=1, description="sheep speed / shepherd speed")

    @property
    def name(self) -> str:
        return PROFILE_NAMES[self.label]

    def as_array(self) -> np.ndarray:
        return np.array([self.w_lcm, self.w_pipi, self.w_beta, self.speed_ratio])

    def levels(self) -> Dict[str, str]:
        out = {}
        for param, values in WEIGHT_LEVELS.items():
            value = getattr(self, param)
            level = "custom"
            for name, ref in zip(("high", "medium", "low"), values):
                if math.isclose(value, ref, abs_tol=1e-9):
                    level = name
                    break
            out[param] = level
        return out


def _profile(label: str, w_lcm: float, w_pipi: float, w_beta: float, speed_ratio: float) -> AgentProfile:
    return AgentProfile(
        label=ProfileLabel(label), w_lcm=w_lcm, w_pipi=w_pipi, w_beta=w_beta, speed_ratio=speed_ratio
    )


CANONICAL_PROFILES: Dict[ProfileLabel, AgentProfile] = {
    p.label: p
    for p in (
        _profile("A1", 0.50, 2.00, 0.50, 1.00),
        _profile("A2", 1.50, 2.00, 0.50, 0.50),
        _profile("A3", 0.50, 3.00, 1.00, 0.67),
        _profile("A4", 0.50, 2.00, 1.90, 0.67),
        _profile("A5", 1.05, 3.00, 1.00, 0.67),
        _profile("A6", 1.05, 1.50, 1.00, 0.50),
        _profile("A7", 1.05, 2.00, 1.00, 0.67),
    )
}


# -------------------------------------------------
# Scenarios
# -------------------------------------------------

class ScenarioId(str, Enum):
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    S5 = "S5"
    S6 = "S6"
    S7 = "S7"
    S8 = "S8"
    S9 = "S9"
    S10 = "S10"
    S11 = "S11"


_A = ProfileLabel

CANONICAL_MIXTURES: Dict[ScenarioId, Dict[ProfileLabel, float]] = {
    ScenarioId.S1: {_A.A1: 0.2, _A.A7: 0.8},
    ScenarioId.S2: {_A.A2: 0.2, _A.A3: 0.2, _A.A6: 0.2, _A.A7: 0.4},
    ScenarioId.S3: {_A.A4: 0.8, _A.A7: 0.2},
    ScenarioId.S4: {_A.A1: 0.2, _A.A5: 0.2, _A.A7: 0.6},
    ScenarioId.S5: {_A.A7: 1.0},
    ScenarioId.S6: {_A.A1: 1.0},
    ScenarioId.S7: {_A.A2: 1.0},
    ScenarioId.S8: {_A.A3: 1.0},
    ScenarioId.S9: {_A.A4: 1.0},
    ScenarioId.S10: {_A.A5: 1.0},
    ScenarioId.S11: {_A.A6: 1.0},
}

SCENARIO_NAMES: Dict[ScenarioId, str] = {
    ScenarioId.S1: "Scouts among classics",
    ScenarioId.S2: "Mixed detractors",
    ScenarioId.S3: "Nomad majority",
    ScenarioId.S4: "Scouts and dispersed",
    ScenarioId.S5: "Classic flock",
    **{sid: f"Homogeneous {PROFILE_NAMES[next(iter(CANONICAL_MIXTURES[sid]))]}"
       for sid in list(ScenarioId)[5:]},
}


class SimConstants(BaseModel):
    model_config = ConfigDict(frozen=True)

    r_shepherd_detect: float = Field(65.0, gt=0)
    r_agent_repulse: float = Field(2.0, gt=0)
    n_neighbours: Optional[int] = Field(None, ge=1, description="LCM neighbourhood size; None means N-1")
    inertia: float = Field(0.5, ge=0, lt=1)
    noise_scale: float = Field(0.3, ge=0)
    base_speed_beta: float = Field(1.5, gt=0)
    blind_angle_behind_beta: float = Field(0.0, ge=0, le=2 * math.pi)
    grazing_probability: float = Field(0.05, ge=0, le=1)
    freeze_factor: float = Field(3.0, ge=0)


class ScenarioSpec(BaseModel):
    """
    Agent-type mixture plus the constants of one simulated swarm.

    Scenario JSON files mirror these fields.
    """
    model_config = ConfigDict(frozen=True)

    id: ScenarioId
    mixture: Dict[ProfileLabel, float]
    profiles: Dict[ProfileLabel, AgentProfile] = Field(default_factory=lambda: dict(CANONICAL_PROFILES))
    n_sheep: int = Field(20, ge=1)
    arena_side: float = Field(150.0, gt=0)
    goal: Tuple[float, float] = (10.0, 10.0)
    goal_radius: float = Field(15.0, gt=0)
    max_ticks: int = Field(1500, ge=0)
    sim_constants: SimConstants = Field(default_factory=SimConstants)

    @model_validator(mode="after")
    def _check(self) -> "ScenarioSpec":
        if not self.mixture:
            raise ValueError("mixture must name at least one profile")
        for label, frac in self.mixture.items():
            if not 0 < frac <= 1:
                raise ValueError(f"mixture fraction for {label.value} must be in (0, 1]")
            if label not in self.profiles:
                raise ValueError(f"mixture names {label.value} but no profile defines it")
        total = sum(self.mixture.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture fractions sum to {total}, expected 1")
        for label, profile in self.profiles.items():
            if profile.label != label:
                raise ValueError(f"profile keyed {label.value} is labelled {profile.label.value}")
        k = self.sim_constants.n_neighbours
        if k is not None and k >= self.n_sheep:
            raise ValueError(f"n_neighbours={k} must be < n_sheep={self.n_sheep}")
        return self

    @property
    def name(self) -> str:
        return SCENARIO_NAMES[self.id]

    @property
    def is_homogeneous(self) -> bool:
        return len(self.mixture) == 1

    @property
    def neighbours(self) -> int:
        k = self.sim_constants.n_neighbours
        return self.n_sheep - 1 if k is None else k

    def profile_counts(self) -> Dict[ProfileLabel, int]:
        """
        Number of sheep per profile, in label order.

        Raises:
            ConfigurationError: If n_sheep * fraction is not an integer
        """
        counts = {}
        for label in ProfileLabel:
            if label not in self.mixture:
                continue
            exact = self.mixture[label] * self.n_sheep
            rounded = int(round(exact))
            if abs(exact - rounded) > 1e-9:
                raise ConfigurationError(
                    f"{label.value} fraction gives {exact:g} sheep of {self.n_sheep}", field="mixture"
                )
            counts[label] = rounded
        return counts


def canonical_scenario(scenario_id: Union[ScenarioId, str], **overrides) -> ScenarioSpec:
    sid = ScenarioId(scenario_id)
    try:
        return ScenarioSpec(id=sid, mixture=dict(CANONICAL_MIXTURES[sid]), **overrides)
    except ValidationError as e:
        raise _config_error(e) from e


def canonical_scenarios(**overrides) -> List[ScenarioSpec]:
    return [canonical_scenario(sid, **overrides) for sid in ScenarioId]


def _config_error(e: ValidationError) -> ConfigurationError:
    first = e.errors()[0]
    field = ".".join(str(part) for part in first.get("loc", ())) or None
    return ConfigurationError(first.get("msg", str(e)), field=field)


def load_scenario(path: Union[str, Path]) -> ScenarioSpec:
    """
    Load a scenario JSON file.

    Raises:
        ConfigurationError: If the file is unreadable, not JSON or invalid
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read scenario file {path}: {e}") from e
    try:
        return ScenarioSpec.model_validate(raw)
    except ValidationError as e:
        raise _config_error(e) from e


def save_scenario(spec: ScenarioSpec, path: Union[str, Path]) -> Path:
    return atomic_write(path, spec.model_dump_json(indent=2))


# -------------------------------------------------
# Simulation State
# -------------------------------------------------

class ShepherdMode(str, Enum):
    DRIVE = "drive"
    COLLECT = "collect"


@dataclass
class SimState:
    """
    Value snapshot of one run. Agents 0..N-1 are sheep, agent N is the shepherd.

    headings holds the last unit heading of every agent (zero before the
    first move). weights is (N, 4): w_lcm, w_pipi, w_beta, speed_ratio.
    """
    spec: ScenarioSpec
    positions: np.ndarray
    headings: np.ndarray
    labels: Tuple[ProfileLabel, ...]
    weights: np.ndarray
    rng: np.random.Generator
    tick: int = 0
    mode: Optional[ShepherdMode] = None

    @property
    def n_sheep(self) -> int:
        return len(self.labels)

    @property
    def sheep(self) -> np.ndarray:
        return self.positions[:-1]

    @property
    def shepherd(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def centre_of_mass(self) -> np.ndarray:
        return self.sheep.mean(axis=0)

    def copy(self) -> "SimState":
        # spec is frozen and shared; the generator state must not be
        new_rng = np.random.default_rng()
        new_rng.bit_generator.state = self.rng.bit_generator.state
        return replace(
            self,
            positions=self.positions.copy(),
            headings=self.headings.copy(),
            weights=self.weights.copy(),
            rng=new_rng,
        )

    def state_equal(self, other: "SimState") -> bool:
        return (
            self.tick == other.tick
            and self.mode == other.mode
            and self.labels == other.labels
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.headings, other.headings)
            and self.rng.bit_generator.state == other.rng.bit_generator.state
        )


def _unit(v: np.ndarray) -> np.ndarray:
    """Row-wise unit vectors; zero-length rows stay zero."""
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v, dtype=float), where=norms > _EPS)


def _corner_nearest(point: np.ndarray, side: float) -> np.ndarray:
    corners = np.array([[0.0, 0.0], [side, 0.0], [0.0, side], [side, side]])
    return corners[np.argmin(np.linalg.norm(corners - point, axis=1))]


def init_scenario(spec: ScenarioSpec, seed: int) -> SimState:
    """
    Place the flock and the shepherd for one run.

    Sheep are uniform in the L/2 square in the corner opposite the goal; the
    shepherd starts at the corner nearest the goal. Profile-to-id assignment
    is a seeded shuffle.

    Raises:
        ConfigurationError: If the mixture does not give integer counts
    """
    counts = spec.profile_counts()
    labels = [label for label, count in counts.items() for _ in range(count)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    labels = tuple(labels[k] for k in order)

    side = spec.arena_side
    near = _corner_nearest(np.asarray(spec.goal, dtype=float), side)
    far = side - near
    low = np.where(far > 0, side / 2, 0.0)
    sheep = low + rng.uniform(0.0, side / 2, size=(spec.n_sheep, 2))

    positions = np.vstack([sheep, near[None, :]])
    weights = np.stack([spec.profiles[label].as_array() for label in labels])
    logger.debug(f"init {spec.id.value} seed={seed}: {dict((k.value, v) for k, v in counts.items())}")
    return SimState(
        spec=spec,
        positions=positions,
        headings=np.zeros_like(positions),
        labels=labels,
        weights=weights,
        rng=rng,
    )


# -------------------------------------------------
# Sheep Dynamics
# -------------------------------------------------

def _sheep_headings(state: SimState, noise: np.ndarray, grazing: np.ndarray) -> np.ndarray:
    c = state.spec.sim_constants
    P = state.sheep
    n = len(P)
    w_lcm, w_pipi, w_beta = (state.weights[:, j:j + 1] for j in range(3))

    D = cdist(P, P)
    diff = P[:, None, :] - P[None, :, :]
    close = (D < c.r_agent_repulse) & ~np.eye(n, dtype=bool)
    repulse = _unit((_unit(diff) * close[..., None]).sum(axis=1))

    k = state.spec.neighbours
    if k > 0:
        masked = D + np.diag(np.full(n, np.inf))
        nearest = np.argsort(masked, axis=1, kind="stable")[:, :k]
        cohesion = _unit(P[nearest].mean(axis=1) - P)
    else:
        cohesion = np.zeros_like(P)

    away = P - state.shepherd
    flee = _unit(away)
    active = np.linalg.norm(away, axis=1) <= c.r_shepherd_detect

    prev = state.headings[:-1]
    engaged = c.inertia * prev + w_lcm * cohesion + w_pipi * repulse + w_beta * flee + c.noise_scale * noise
    at_rest = w_pipi * repulse + c.noise_scale * noise * grazing[:, None]
    return _unit(np.where(active[:, None], engaged, at_rest))


def sheep_force(
    state: SimState,
    i: int,
    noise: Optional[np.ndarray] = None,
    grazing: bool = False,
) -> np.ndarray:
    """
    Unit heading of sheep i, or the zero vector.

    Args:
        state: Current state (not modified, RNG not consumed)
        i: Sheep index in 0..N-1
        noise: Unit noise direction for sheep i (default: none)
        grazing: Whether sheep i grazes when the shepherd is out of range
    """
    if not 0 <= i < state.n_sheep:
        raise ConfigurationError(f"{i} is not a sheep index", field="i")
    noises = np.zeros((state.n_sheep, 2))
    if noise is not None:
        noises[i] = _unit(np.asarray(noise, dtype=float))
    grazes = np.zeros(state.n_sheep, dtype=bool)
    grazes[i] = grazing
    return _sheep_headings(state, noises, grazes)[i]


# -------------------------------------------------
# Shepherd Dynamics
# -------------------------------------------------

def collect_radius(n_sheep: int, r_agent_repulse: float) -> float:
    """f(N) = r_a * N^(2/3)."""
    return r_agent_repulse * n_sheep ** (2.0 / 3.0)


def _perceived(state: SimState) -> np.ndarray:
    blind = state.spec.sim_constants.blind_angle_behind_beta
    heading = state.headings[-1]
    P = state.sheep
    if blind <= 0 or np.linalg.norm(heading) <= _EPS:
        return P
    rel = _unit(P - state.shepherd)
    cos = rel @ (heading / np.linalg.norm(heading))
    behind = cos < math.cos(math.pi - blind / 2)
    seen = P[~behind]
    return seen if len(seen) else P


def shepherd_step(state: SimState) -> Tuple[ShepherdMode, np.ndarray]:
    """
    Choose Drive or Collect and the point the shepherd heads for.

    Drive when every perceived sheep is within f(N) of their centre of mass;
    the target sits r_a*sqrt(N) behind the centre on the goal ray. Otherwise
    Collect the sheep furthest from the centre from r_a behind it.
    """
    r_a = state.spec.sim_constants.r_agent_repulse
    n = state.n_sheep
    P = _perceived(state)
    gcm = P.mean(axis=0)
    dist = np.linalg.norm(P - gcm, axis=1)

    if dist.max() <= collect_radius(n, r_a):
        goal = np.asarray(state.spec.goal, dtype=float)
        back = _unit((gcm - goal)[None, :])[0]
        return ShepherdMode.DRIVE, gcm + back * r_a * math.sqrt(n)

    far = P[int(np.argmax(dist))]
    out = _unit((far - gcm)[None, :])[0]
    return ShepherdMode.COLLECT, far + out * r_a


def _move_shepherd(state: SimState, target: np.ndarray) -> np.ndarray:
    c = state.spec.sim_constants
    here = state.shepherd
    if np.linalg.norm(state.sheep - here, axis=1).min() < c.freeze_factor * c.r_agent_repulse:
        return here.copy()
    delta = target - here
    dist = float(np.linalg.norm(delta))
    if dist <= _EPS:
        return here.copy()
    return here + delta / dist * min(c.base_speed_beta, dist)


def step(state: SimState) -> SimState:
    """
    Advance one tick: every sheep moves from the same snapshot, then the shepherd.

    The input state is not modified; noise and grazing are drawn for all
    sheep every tick in index order.
    """
    c = state.spec.sim_constants
    new = state.copy()
    n = state.n_sheep
    noise = _unit(new.rng.normal(size=(n, 2)))
    grazing = new.rng.random(n) < c.grazing_probability

    headings = _sheep_headings(state, noise, grazing)
    speeds = state.weights[:, 3] * c.base_speed_beta
    new.positions[:-1] = state.sheep + headings * speeds[:, None]
    new.headings[:-1] = headings

    mode, target = shepherd_step(new)
    moved = _move_shepherd(new, target)
    shift = moved - new.positions[-1]
    if np.linalg.norm(shift) > _EPS:
        new.headings[-1] = shift / np.linalg.norm(shift)
    new.positions[-1] = moved
    new.mode = mode
    new.tick = state.tick + 1
    return new


# -------------------------------------------------
# Trajectories
# -------------------------------------------------

TRAJECTORY_COLUMNS = ["tick", "agent_id", "kind", "profile", "x", "y"]


@dataclass
class Trajectory:
    """
    Per-tick positions of all agents: positions[t, i] with the shepherd at i = N.
    """
    positions: np.ndarray
    profile_labels: Tuple[ProfileLabel, ...]
    scenario_id: Optional[ScenarioId] = None
    seed: Optional[int] = None
    dt: float = 1.0
    modes: Tuple[ShepherdMode, ...] = ()
    reached_goal: bool = False
    truncated: bool = False
    r_agent_repulse: float = 2.0

    @property
    def n_ticks(self) -> int:
        return self.positions.shape[0]

    @property
    def n_sheep(self) -> int:
        return self.positions.shape[1] - 1

    @property
    def sheep_positions(self) -> np.ndarray:
        return self.positions[:, :-1]

    @property
    def shepherd_positions(self) -> np.ndarray:
        return self.positions[:, -1]

    def to_frame(self) -> pd.DataFrame:
        t, a = self.positions.shape[:2]
        kinds = ["sheep"] * self.n_sheep + ["shepherd"]
        profiles = [label.value for label in self.profile_labels] + [""]
        return pd.DataFrame({
            "tick": np.repeat(np.arange(t), a),
            "agent_id": np.tile(np.arange(a), t),
            "kind": kinds * t,
            "profile": profiles * t,
            "x": self.positions[:, :, 0].ravel(),
            "y": self.positions[:, :, 1].ravel(),
        })

    def to_csv(self, path: Union[str, Path]) -> Path:
        return atomic_write(path, self.to_frame().to_csv(index=False))

    @classmethod
    def read_csv(
        cls,
        path: Union[str, Path],
        scenario_id: Optional[ScenarioId] = None,
        seed: Optional[int] = None,
        r_agent_repulse: float = 2.0,
    ) -> "Trajectory":
        """
        Read a trajectory CSV written by to_csv.

        Raises:
            SchemaError: If columns, tick layout or agent kinds are malformed
        """
        try:
            frame = pd.read_csv(path, keep_default_na=False)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise SchemaError(f"cannot read trajectory {path}: {e}") from e
        if list(frame.columns) != TRAJECTORY_COLUMNS:
            raise SchemaError(f"trajectory header must be {','.join(TRAJECTORY_COLUMNS)}")

        frame = frame.sort_values(["tick", "agent_id"], kind="stable")
        ticks = frame["tick"].unique()
        agents = frame["agent_id"].unique()
        if not np.array_equal(ticks, np.arange(len(ticks))):
            raise SchemaError("ticks must be contiguous from 0")
        if len(frame) != len(ticks) * len(agents) or len(agents) < 2:
            raise SchemaError("every tick must list the same agents, at least one sheep and the shepherd")

        first = frame[frame["tick"] == 0]
        kinds = list(first["kind"])
        if kinds != ["sheep"] * (len(agents) - 1) + ["shepherd"]:
            raise SchemaError("agents 0..N-1 must be sheep and agent N the shepherd")
        try:
            labels = tuple(ProfileLabel(p) for p in first["profile"].iloc[:-1])
        except ValueError as e:
            raise SchemaError(f"unknown profile label: {e}") from e

        xy = frame[["x", "y"]].to_numpy(dtype=float).reshape(len(ticks), len(agents), 2)
        if not np.isfinite(xy).all():
            raise SchemaError("trajectory positions must be finite")
        return cls(
            positions=xy,
            profile_labels=labels,
            scenario_id=scenario_id,
            seed=seed,
            r_agent_repulse=r_agent_repulse,
        )


def run_scenario(spec: ScenarioSpec, seed: int) -> Trajectory:
    """
    Step until the flock centre is within goal_radius of the goal or max_ticks.

    Runs that hit max_ticks are flagged truncated, never raised.
    """
    state = init_scenario(spec, seed)
    goal = np.asarray(spec.goal, dtype=float)
    frames = [state.positions.copy()]
    modes: List[ShepherdMode] = []
    reached = False

    while True:
        if np.linalg.norm(state.centre_of_mass - goal) <= spec.goal_radius:
            reached = True
            break
        if state.tick >= spec.max_ticks:
            break
        state = step(state)
        frames.append(state.positions.copy())
        modes.append(state.mode)

    if not reached:
        logger.warning(f"{spec.id.value} seed={seed} truncated at {spec.max_ticks} ticks")
    else:
        logger.debug(f"{spec.id.value} seed={seed} reached goal at tick {state.tick}")
    return Trajectory(
        positions=np.stack(frames),
        profile_labels=state.labels,
        scenario_id=spec.id,
        seed=seed,
        modes=tuple(modes),
        reached_goal=reached,
        truncated=not reached,
        r_agent_repulse=spec.sim_constants.r_agent_repulse,
    )
