"""
Shared test fixtures and utilities for the swarm-markers test suite.
"""

import pytest
import numpy as np
from pathlib import Path
from typing import List, Optional, Sequence

# Add project root to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from marker_kernels import Segment
from sim_core import (
    ProfileLabel,
    ScenarioId,
    ScenarioSpec,
    SimConstants,
    Trajectory,
    canonical_scenario,
    init_scenario,
    run_scenario,
)
from windowing import MarkerMatrix, WindowPlan, build_labeled_dataset


class TestDataFactory:
    """Factory for creating test data objects."""

    @staticmethod
    def create_spec(
        scenario: ScenarioId = ScenarioId.S1,
        n_sheep: int = 10,
        arena_side: float = 60.0,
        max_ticks: int = 40,
        goal_radius: float = 1.0,
        **overrides,
    ) -> ScenarioSpec:
        return canonical_scenario(
            scenario, n_sheep=n_sheep, arena_side=arena_side, max_ticks=max_ticks, goal_radius=goal_radius, **overrides
        )

    @staticmethod
    def create_state(sheep: Sequence[Sequence[float]], shepherd: Sequence[float], **constants):
        """SimState with hand-placed agents, all profiles A7, zero headings."""
        spec = canonical_scenario(
            ScenarioId.S5, n_sheep=len(sheep), sim_constants=SimConstants(**constants)
        )
        state = init_scenario(spec, seed=0)
        state.positions[:] = np.vstack([np.asarray(sheep, dtype=float), np.asarray(shepherd, dtype=float)[None]])
        state.headings[:] = 0.0
        return state

    @staticmethod
    def create_trajectory(
        positions: np.ndarray,
        labels: Optional[Sequence[ProfileLabel]] = None,
        scenario: Optional[ScenarioId] = ScenarioId.S5,
        seed: Optional[int] = 1,
    ) -> Trajectory:
        positions = np.asarray(positions, dtype=float)
        n = positions.shape[1] - 1
        return Trajectory(
            positions=positions,
            profile_labels=tuple(labels) if labels else (ProfileLabel.A7,) * n,
            scenario_id=scenario,
            seed=seed,
        )

    @staticmethod
    def random_walk(n_ticks: int = 100, n_sheep: int = 4, seed: int = 0) -> np.ndarray:
        """(T, N+1, 2) bounded random walk with the shepherd last."""
        rng = np.random.default_rng(seed)
        start = rng.uniform(20, 80, size=(1, n_sheep + 1, 2))
        steps = rng.normal(0, 0.8, size=(n_ticks - 1, n_sheep + 1, 2))
        return np.concatenate([start, start + np.cumsum(steps, axis=0)])

    @staticmethod
    def create_segment(paths: Sequence[Sequence[Sequence[float]]], shepherd: Optional[Sequence[Sequence[float]]] = None,
                       r_agent_repulse: float = 2.0) -> Segment:
        """Segment from per-sheep paths (each k x 2); the shepherd defaults to a far fixed point."""
        paths = np.asarray(paths, dtype=float)
        k = paths.shape[1]
        if shepherd is None:
            shepherd = np.tile([[500.0, 500.0]], (k, 1))
        positions = np.concatenate([paths.transpose(1, 0, 2), np.asarray(shepherd, dtype=float)[:, None, :]], axis=1)
        return Segment(positions, r_agent_repulse=r_agent_repulse)

    @staticmethod
    def create_matrix(
        values: np.ndarray,
        labels: Sequence[ProfileLabel],
        scenario: ScenarioId = ScenarioId.S5,
        seed: int = 1,
        markers: Optional[List[str]] = None,
        plan: Optional[WindowPlan] = None,
    ) -> MarkerMatrix:
        values = np.asarray(values, dtype=float)
        plan = plan or WindowPlan(size=20, overlap=0.75)
        markers = markers or [f"M{j + 1}" for j in range(values.shape[2])]
        windows = [(plan.stride * w, plan.stride * w + plan.size) for w in range(values.shape[0])]
        return MarkerMatrix(
            values=values,
            marker_set=markers,
            plan=plan,
            windows=windows,
            agent_labels=tuple(labels),
            scenario_id=scenario,
            seed=seed,
        )

    @staticmethod
    def separable_matrices(n_runs: int = 4, n_windows: int = 8, n_agents: int = 4, n_markers: int = 3,
                           seed: int = 0) -> List[MarkerMatrix]:
        """A7 runs (scenario S5) have M1 near 0, A1 runs (S6) near 10; other markers are noise."""
        rng = np.random.default_rng(seed)
        matrices = []
        for run in range(n_runs):
            for scenario, label, centre in ((ScenarioId.S5, ProfileLabel.A7, 0.0), (ScenarioId.S6, ProfileLabel.A1, 10.0)):
                values = rng.normal(0, 1, size=(n_windows, n_agents, n_markers))
                values[:, :, 0] = centre + rng.uniform(-1, 1, size=(n_windows, n_agents))
                matrices.append(TestDataFactory.create_matrix(values, [label] * n_agents, scenario, seed=run + 1))
        return matrices


@pytest.fixture
def factory():
    """Provide TestDataFactory instance."""
    return TestDataFactory()


@pytest.fixture
def small_spec(factory):
    """Ten-sheep S1 scenario in a small arena; 40 ticks always truncate."""
    return factory.create_spec()


@pytest.fixture(scope="session")
def short_trajectory():
    """41-tick simulated S1 run with 10 sheep."""
    spec = TestDataFactory.create_spec()
    return run_scenario(spec, seed=3)


@pytest.fixture
def plan():
    return WindowPlan(size=20, overlap=0.75)


@pytest.fixture
def separable_dataset(factory):
    """Two perfectly separable classes (A7 vs A1) on marker M1."""
    return build_labeled_dataset(factory.separable_matrices(), shuffle_seed=0)


@pytest.fixture
def temp_template_dir(tmp_path):
    """Provide temporary template directory with report.html."""
    template_dir = tmp_path / "templates"
    template_dir.mkdir()
    html_content = """
    <!DOCTYPE html>
    <html>
    <head><title>{{ report_id }}</title></head>
    <body>
        <p>{{ chain | truncate(10) }}</p>
        <p>{{ eta | percent }}</p>
        {% for section in sections %}<h2>{{ section.title }}</h2>{{ section.html }}{% endfor %}
    </body>
    </html>
    """
    (template_dir / "report.html").write_text(html_content)
    return template_dir
