"""
swarm-markers - Main Orchestrator
Runs simulation, marker extraction, recognition and interaction analyses as
one reproducible pipeline with cached, hash-chained artifacts.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from artifacts import RunManifest, WindowTiming, atomic_write, manifest_path_for
from errors import ConfigurationError, MissingArtifactError, SwarmMarkersError
from interaction_dynamics import (
    agent_association,
    attention_points,
    stats_by_agent_type,
    summarize_scenarios,
    window_shares,
)
from marker_kernels import MARKER_SET_23, validate_marker_set
from recognition import (
    ablate_impute,
    ablate_retrain,
    default_removal_sets,
    marker_correlation,
    mi_select,
    sweep,
    train_tree,
)
from report_generator import ReportGenerator
from sim_core import ScenarioId, ScenarioSpec, Trajectory, canonical_scenario, run_scenario
from windowing import (
    LabeledDataset,
    MarkerMatrix,
    WindowPlan,
    build_labeled_dataset,
    canonical_plans,
    compute_marker_matrix,
    read_feature_csv,
    representation_report,
    write_feature_csv,
)

logger = logging.getLogger(__name__)

TARGETS = ("agent", "swarm11", "swarm2")
ABLATIONS = ("e1", "e2")
PRIMARY_PLAN = WindowPlan(size=20, overlap=0.75)


def default_threads() -> int:
    raw = os.getenv("SWARM_MARKERS_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"must be an integer, got {raw!r}", field="SWARM_MARKERS_THREADS") from e
    if value < 1:
        raise ConfigurationError("must be >= 1", field="SWARM_MARKERS_THREADS")
    return value


class PipelineConfig(BaseModel):
    """What the pipeline command should produce."""
    model_config = ConfigDict(frozen=True)

    scenarios: List[ScenarioId] = Field(default_factory=lambda: list(ScenarioId))
    seeds: List[int] = Field(default_factory=lambda: list(range(1, 21)))
    marker_set: List[str] = Field(default_factory=lambda: list(MARKER_SET_23))
    primary_plan: WindowPlan = PRIMARY_PLAN
    run_sweep: bool = False
    targets: List[str] = Field(default_factory=list)
    ablations: List[str] = Field(default_factory=list)
    associate: bool = False
    attention: bool = False
    eta: float = Field(0.5, gt=0, le=1)
    folds: int = Field(10, ge=2)
    opt_budget: int = Field(30, ge=1)
    seed: int = 0
    regenerate: bool = False
    threads: int = Field(1, ge=1)
    scenario_overrides: Dict[str, Any] = Field(default_factory=dict)

    @property
    def plans(self) -> List[WindowPlan]:
        return canonical_plans() if self.run_sweep else [self.primary_plan]


# -------------------------------------------------
# Worker jobs (module level so they pickle)
# -------------------------------------------------

def _simulate_job(spec_json: str, seed: int, path: str) -> str:
    spec = ScenarioSpec.model_validate_json(spec_json)
    run_scenario(spec, seed).to_csv(path)
    return path


def _features_job(
    traj_path: str, scenario: str, seed: int, r_a: float, plans_json: List[str], markers: List[str], out_dir: str
) -> List[Tuple[str, str, float, float]]:
    traj = Trajectory.read_csv(traj_path, ScenarioId(scenario), seed, r_a)
    done = []
    for plan_json in plans_json:
        plan = WindowPlan.model_validate_json(plan_json)
        matrix = compute_marker_matrix(traj, plan, markers)
        path = Path(out_dir) / plan.label / f"{scenario}_seed{seed}.csv"
        write_feature_csv(matrix, path)
        timing = {"mean_window_seconds": matrix.mean_window_seconds, "total_seconds": matrix.total_seconds}
        atomic_write(_timing_path(path), json.dumps(timing))
        done.append((plan.label, str(path), matrix.mean_window_seconds, matrix.total_seconds))
    return done


def _timing_path(feature_path: Path) -> Path:
    return feature_path.with_name(feature_path.name + ".timing.json")


class SwarmMarkerPipeline:
    """
    High-level orchestrator for the swarm-markers analyses.

    Responsibilities:
    - Simulate every (scenario, seed) run, or reuse cached trajectories
    - Compute marker matrices per window plan, or reuse cached feature files
    - Train, sweep, ablate, associate and find attention points
    - Write every report atomically with the manifest hash chain embedded
    - Render summary.html from the report tables
    """

    def __init__(self, output_dir: Path, config: PipelineConfig, template_dir: Optional[Path] = None):
        self.output_dir = Path(output_dir)
        self.config = config
        validate_marker_set(config.marker_set)
        for target in config.targets:
            if target not in TARGETS:
                raise ConfigurationError(f"unknown target {target!r}", field="train")
        for ablation in config.ablations:
            if ablation not in ABLATIONS:
                raise ConfigurationError(f"unknown ablation {ablation!r}", field="ablate")

        self.traj_dir = self.output_dir / "trajectories"
        self.feature_dir = self.output_dir / "features"
        self.report_dir = self.output_dir / "reports"
        self.report_gen = ReportGenerator(template_dir or Path(__file__).parent / "templates")
        self.output_dir.mkdir(parents=True, exist_ok=True)

        self.manifest = RunManifest(command="pipeline", seeds=list(config.seeds),
                                    window_plans=[p.label for p in config.plans])
        self.tables: Dict[str, pd.DataFrame] = {}
        self._chain: Optional[str] = None

    # -------------------------
    # Helpers
    # -------------------------

    def _rel(self, path: Path) -> str:
        return str(Path(path).relative_to(self.output_dir))

    def _fan_out(self, fn: Callable, jobs: Sequence[Tuple]) -> List[Any]:
        if self.config.threads <= 1 or len(jobs) <= 1:
            return [fn(*job) for job in jobs]
        workers = min(self.config.threads, len(jobs))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, *zip(*jobs)))

    def scenario_spec(self, sid: ScenarioId) -> ScenarioSpec:
        return canonical_scenario(sid, **self.config.scenario_overrides)

    def _runs(self) -> Iterable[Tuple[ScenarioId, int]]:
        for sid in self.config.scenarios:
            for seed in self.config.seeds:
                yield sid, seed

    def trajectory_path(self, sid: ScenarioId, seed: int) -> Path:
        return self.traj_dir / f"{sid.value}_seed{seed}.csv"

    def feature_path(self, plan: WindowPlan, sid: ScenarioId, seed: int) -> Path:
        return self.feature_dir / plan.label / f"{sid.value}_seed{seed}.csv"

    # -------------------------
    # Stages
    # -------------------------

    def ensure_trajectories(self) -> None:
        """
        Raises:
            MissingArtifactError: If a trajectory is absent and regenerate is off
        """
        jobs = []
        for sid, seed in self._runs():
            path = self.trajectory_path(sid, seed)
            if self.config.regenerate:
                jobs.append((self.scenario_spec(sid).model_dump_json(), seed, str(path)))
            elif not path.exists():
                raise MissingArtifactError(self._rel(path))
        if jobs:
            logger.info(f"simulating {len(jobs)} runs on {self.config.threads} worker(s)")
            self._fan_out(_simulate_job, jobs)
        for sid, seed in self._runs():
            self.manifest.record_input(self.trajectory_path(sid, seed), root=self.output_dir)

    def ensure_features(self) -> Dict[WindowPlan, List[MarkerMatrix]]:
        """
        Marker matrices per plan for every run, computed or read from cache.

        Raises:
            MissingArtifactError: If a feature file is absent and regenerate is off
        """
        plans = self.config.plans
        markers = list(self.config.marker_set)
        jobs = []
        for sid, seed in self._runs():
            todo = []
            for plan in plans:
                path = self.feature_path(plan, sid, seed)
                if self.config.regenerate:
                    todo.append(plan.model_dump_json())
                elif not path.exists() or not _timing_path(path).exists():
                    raise MissingArtifactError(self._rel(path))
            if todo:
                r_a = self.scenario_spec(sid).sim_constants.r_agent_repulse
                jobs.append((str(self.trajectory_path(sid, seed)), sid.value, seed, r_a, todo, markers,
                             str(self.feature_dir)))
        if jobs:
            logger.info(f"computing markers for {len(jobs)} runs x {len(plans)} plans")
            self._fan_out(_features_job, jobs)

        matrices: Dict[WindowPlan, List[MarkerMatrix]] = {plan: [] for plan in plans}
        for plan in plans:
            mu, total = [], []
            for sid, seed in self._runs():
                path = self.feature_path(plan, sid, seed)
                matrix = read_feature_csv(path, plan)
                if list(matrix.marker_set) != markers:
                    raise MissingArtifactError(f"{self._rel(path)} with markers {','.join(markers)}")
                timing = json.loads(_timing_path(path).read_text(encoding="utf-8"))
                matrix.mean_window_seconds = timing["mean_window_seconds"]
                matrix.total_seconds = timing["total_seconds"]
                matrices[plan].append(matrix)
                mu.append(matrix.mean_window_seconds)
                total.append(matrix.total_seconds)
                self.manifest.record_output(path, root=self.output_dir)
            self.manifest.timings[plan.label] = WindowTiming(
                mean_window_seconds=sum(mu) / len(mu), total_seconds=sum(total) / len(total)
            )
        return matrices

    # -------------------------
    # Reports
    # -------------------------

    def write_report(self, name: str, frame: pd.DataFrame, index: bool = False) -> Path:
        """CSV with the manifest hash chain on its first line."""
        path = self.report_dir / f"{name}.csv"
        header = f"# manifest_sha256={self._chain}\n"
        atomic_write(path, header + frame.to_csv(index=index))
        self.manifest.record_output(path, root=self.output_dir)
        if "/" not in name:
            self.tables[name] = frame.reset_index() if index else frame
        logger.info(f"report written: {self._rel(path)}")
        return path

    def _datasets(self, matrices: Dict[WindowPlan, List[MarkerMatrix]]) -> Dict[WindowPlan, LabeledDataset]:
        return {plan: build_labeled_dataset(mats, self.config.seed) for plan, mats in matrices.items()}

    def run_recognition(self, datasets: Dict[WindowPlan, LabeledDataset]) -> None:
        cfg = self.config
        primary = datasets[cfg.primary_plan]
        self.write_report("representation", representation_report(primary), index=True)
        for target in cfg.targets:
            if cfg.run_sweep:
                timings = {}
                for plan in cfg.plans:
                    t = self.manifest.timings[plan.label]
                    timings[plan] = (t.mean_window_seconds, t.total_seconds)
                result = sweep(datasets, timings, target, cfg.folds, cfg.opt_budget, cfg.seed, cfg.plans)
                self.write_report(f"sweep_{target}_accuracy", result.accuracy_table(), index=True)
                self.write_report(f"sweep_{target}_compute", result.compute_table(), index=True)
                self.write_report(f"sweep_{target}_cells", result.cells)
                self.write_report(f"sweep_{target}_pareto", result.pareto_front())
            model = train_tree(primary, target, cfg.folds, cfg.opt_budget, cfg.seed)
            path = self.report_dir / f"model_{target}.json"
            atomic_write(path, model.to_json())
            self.manifest.record_output(path, root=self.output_dir)
            self.write_report(f"train_{target}", pd.DataFrame([{
                "target": target, "plan": cfg.primary_plan.label, "search": model.search,
                "max_depth": model.max_depth, "min_leaf": model.min_leaf,
                "validation_accuracy": model.cv_accuracy, "test_accuracy": model.test_accuracy,
            }]))

    def run_ablation(self, datasets: Dict[WindowPlan, LabeledDataset]) -> None:
        cfg = self.config
        base_markers = [m for m in cfg.marker_set if m in MARKER_SET_23] or list(cfg.marker_set)
        data = datasets[cfg.primary_plan].with_markers(base_markers)
        baseline = train_tree(data, "agent", cfg.folds, cfg.opt_budget, cfg.seed)
        selection = mi_select(data, coverage=0.95)
        self.write_report("mi_selection", selection.to_frame())
        _, pairs = marker_correlation(data)
        self.write_report("marker_correlation_pairs", pairs)

        removal = default_removal_sets(base_markers, selection.selected)
        if "e1" in cfg.ablations:
            self.write_report("ablation_e1", ablate_retrain(data, baseline, removal, cfg.folds).to_frame())
        if "e2" in cfg.ablations:
            self.write_report("ablation_e2", ablate_impute(baseline, data, removal).to_frame())

    def run_interactions(self, matrices: List[MarkerMatrix]) -> None:
        cfg = self.config
        assoc: Dict[str, list] = {}
        attn: Dict[str, list] = {}
        values_assoc, values_attn, labels = [], [], []
        for matrix in matrices:
            sid = matrix.scenario_id.value
            tag = f"{sid}_seed{matrix.seed}"
            if cfg.associate:
                k = len(set(matrix.agent_labels))
                result = agent_association(matrix, k, seed=cfg.seed + (matrix.seed or 0))
                assoc.setdefault(sid, []).append(result)
                values_assoc.extend(result.per_agent_percent)
                self.write_report(f"association/{tag}", pd.DataFrame(result.adjacency_sum), index=True)
            if cfg.attention:
                result = attention_points(window_shares(matrix), cfg.eta)
                attn.setdefault(sid, []).append(result)
                values_attn.extend(result.per_agent_percent)
                self.write_report(f"attention/{tag}", pd.DataFrame(result.membership.astype(int)), index=True)
            labels.extend(matrix.agent_labels)
        if assoc:
            self.write_report("association_stats", summarize_scenarios(assoc), index=True)
            self.write_report("association_by_type", stats_by_agent_type(values_assoc, labels), index=True)
        if attn:
            self.write_report("attention_stats", summarize_scenarios(attn), index=True)
            self.write_report("attention_by_type", stats_by_agent_type(values_attn, labels), index=True)

    # -------------------------
    # Entry point
    # -------------------------

    def run(self) -> RunManifest:
        """
        Run every requested stage.

        Returns:
            The final manifest, also written to manifest.json

        Raises:
            MissingArtifactError: If cached inputs are absent without regenerate
            SwarmMarkersError: For configuration and data errors from any stage
        """
        cfg = self.config
        self.ensure_trajectories()
        matrices = self.ensure_features()
        self._chain = self.manifest.digest()
        self.manifest.parent = self._chain

        needs_data = cfg.targets or cfg.ablations
        if needs_data:
            datasets = self._datasets(matrices)
            self.run_recognition(datasets)
            if cfg.ablations:
                self.run_ablation(datasets)
        if cfg.associate or cfg.attention:
            self.run_interactions(matrices[cfg.primary_plan])

        if self.manifest.timings:
            compute = pd.DataFrame(
                [{"plan": k, **v.model_dump()} for k, v in self.manifest.timings.items()]
            )
            self.write_report("compute_time", compute)

        try:
            summary = self.output_dir / "summary.html"
            self.report_gen.generate_html(
                {"chain": self._chain, "eta": cfg.eta, "tables": self.tables}, summary
            )
            self.manifest.record_output(summary, root=self.output_dir)
        except SwarmMarkersError:
            raise
        except Exception as e:
            raise SwarmMarkersError(f"summary rendering failed: {e}") from e

        self.manifest.write(self.output_dir / "manifest.json")
        logger.info(f"pipeline finished: {len(self.manifest.outputs)} outputs in {self.output_dir}")
        return self.manifest


# -------------------------------------------------
# Single-step helpers used by the CLI
# -------------------------------------------------

def simulate_to_file(spec: ScenarioSpec, seed: int, out: Path, scenario_path: Optional[Path] = None) -> Path:
    """Run one scenario and write the trajectory CSV plus its manifest."""
    traj = run_scenario(spec, seed)
    traj.to_csv(out)
    manifest = RunManifest(command="simulate", seeds=[seed], metadata={
        "scenario": spec.id.value,
        "seed": seed,
        "r_agent_repulse": spec.sim_constants.r_agent_repulse,
        "reached_goal": traj.reached_goal,
        "truncated": traj.truncated,
        "ticks": traj.n_ticks,
    })
    if scenario_path is not None:
        manifest.record_input(scenario_path)
    manifest.record_output(out)
    manifest.write(manifest_path_for(out))
    return out


def markers_to_file(traj_path: Path, plan: WindowPlan, markers: Sequence[str], out: Path) -> MarkerMatrix:
    """Compute the feature file of one trajectory; scenario metadata comes from its manifest if present."""
    if not Path(traj_path).exists():
        raise MissingArtifactError(str(traj_path))
    meta: Dict[str, Any] = {}
    parent = None
    sidecar = manifest_path_for(traj_path)
    if sidecar.exists():
        upstream = RunManifest.read(sidecar)
        meta = upstream.metadata
        parent = upstream.digest()
    scenario = meta.get("scenario")
    traj = Trajectory.read_csv(
        traj_path,
        scenario_id=ScenarioId(scenario) if scenario else None,
        seed=meta.get("seed"),
        r_agent_repulse=float(meta.get("r_agent_repulse", 2.0)),
    )
    matrix = compute_marker_matrix(traj, plan, markers)
    write_feature_csv(matrix, out)

    manifest = RunManifest(command="markers", window_plans=[plan.label], parent=parent,
                           seeds=[traj.seed] if traj.seed is not None else [])
    manifest.record_input(traj_path)
    manifest.record_output(out)
    manifest.timings[plan.label] = WindowTiming(
        mean_window_seconds=matrix.mean_window_seconds, total_seconds=matrix.total_seconds
    )
    manifest.write(manifest_path_for(out))
    logger.info(f"{matrix.n_windows} windows x {len(matrix.agent_labels)} agents -> {out}")
    return matrix
