"""
swarm-markers - Windowing
Slices trajectories into overlapping windows, assembles marker matrices,
normalises them and builds the labelled train/test dataset.
"""

import io
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from sklearn.model_selection import GroupShuffleSplit, StratifiedGroupKFold

from artifacts import atomic_write
from errors import ConfigurationError, InsufficientDataError, SchemaError, WindowError
from marker_kernels import MARKER_SET_42, Segment, compute_segment_markers, validate_marker_set
from sim_core import ProfileLabel, ScenarioId, Trajectory

logger = logging.getLogger(__name__)

WINDOW_SIZES = (20, 40, 60, 80, 100)
OVERLAPS = (0.25, 0.50, 0.75)
ID_COLUMNS = ["scenario", "seed", "window_index", "agent_id", "agent_label", "swarm_label"]

HOMOGENEOUS = "homogeneous"
HETEROGENEOUS = "heterogeneous"


# -------------------------------------------------
# Window Plans
# -------------------------------------------------

class WindowPlan(BaseModel):
    """Window size w (ticks) and overlap fraction alpha; stride = round(w * (1 - alpha))."""
    model_config = ConfigDict(frozen=True)

    size: int = Field(..., ge=1)
    overlap: float = Field(..., gt=0, lt=1)

    @field_validator("overlap")
    @classmethod
    def _stride_positive(cls, v: float, info) -> float:
        size = info.data.get("size")
        if size is not None and math.floor(size * (1 - v) + 0.5) < 1:
            raise ValueError(f"overlap {v} leaves no stride for size {size}")
        return v

    @property
    def stride(self) -> int:
        # round half up
        return int(math.floor(self.size * (1 - self.overlap) + 0.5))

    @property
    def label(self) -> str:
        return f"w{self.size}_a{self.overlap:g}"

    @classmethod
    def create(cls, size: int, overlap: float) -> "WindowPlan":
        try:
            return cls(size=size, overlap=overlap)
        except ValidationError as e:
            first = e.errors()[0]
            raise ConfigurationError(first["msg"], field=".".join(map(str, first["loc"])) or "window") from e


def canonical_plans() -> List[WindowPlan]:
    return [WindowPlan(size=w, overlap=a) for a in OVERLAPS for w in WINDOW_SIZES]


def enumerate_variations(
    scenarios: Optional[Sequence[ScenarioId]] = None,
    plans: Optional[Sequence[WindowPlan]] = None,
) -> List[Tuple[ScenarioId, WindowPlan]]:
    scenarios = list(ScenarioId) if scenarios is None else list(scenarios)
    plans = canonical_plans() if plans is None else list(plans)
    return [(sid, plan) for sid in scenarios for plan in plans]


def make_windows(n_ticks: int, plan: WindowPlan) -> List[Tuple[int, int]]:
    """
    Half-open tick ranges [s*j, s*j + w) for j = 0..floor((T - w) / s).

    Raises:
        WindowError: If the trajectory is shorter than one window
    """
    if n_ticks < plan.size:
        raise WindowError(f"trajectory of {n_ticks} ticks is shorter than window size {plan.size}")
    s = plan.stride
    return [(s * j, s * j + plan.size) for j in range((n_ticks - plan.size) // s + 1)]


# -------------------------------------------------
# Marker Matrix
# -------------------------------------------------

@dataclass
class MarkerMatrix:
    """
    values[w, i, m]: marker m of sheep i in window w. NaN marks a not-available cell.
    """
    values: np.ndarray
    marker_set: List[str]
    plan: WindowPlan
    windows: List[Tuple[int, int]]
    agent_labels: Tuple[ProfileLabel, ...]
    scenario_id: Optional[ScenarioId] = None
    seed: Optional[int] = None
    mean_window_seconds: float = 0.0
    total_seconds: float = 0.0
    normalized: bool = False
    zero_variance: Optional[np.ndarray] = None

    @property
    def mask(self) -> np.ndarray:
        """True where a value is available."""
        return ~np.isnan(self.values)

    @property
    def n_windows(self) -> int:
        return self.values.shape[0]

    @property
    def swarm_label_2(self) -> str:
        return HOMOGENEOUS if len(set(self.agent_labels)) == 1 else HETEROGENEOUS

    def to_frame(self) -> pd.DataFrame:
        w, n, _ = self.values.shape
        scenario = self.scenario_id.value if self.scenario_id else ""
        ids = pd.DataFrame({
            "scenario": [scenario] * (w * n),
            "seed": [self.seed if self.seed is not None else -1] * (w * n),
            "window_index": np.repeat(np.arange(w), n),
            "agent_id": np.tile(np.arange(n), w),
            "agent_label": [label.value for label in self.agent_labels] * w,
            "swarm_label": [scenario] * (w * n),
        })
        markers = pd.DataFrame(self.values.reshape(w * n, -1), columns=self.marker_set)
        return pd.concat([ids, markers], axis=1)


def compute_marker_matrix(
    traj: Trajectory,
    plan: WindowPlan,
    marker_set: Sequence[str] = MARKER_SET_42,
) -> MarkerMatrix:
    """
    Evaluate every marker in marker_set for every (window, sheep).

    Raises:
        WindowError: If the trajectory is shorter than one window
        ConfigurationError: If the marker set names unknown markers
    """
    marker_set = validate_marker_set(marker_set)
    windows = make_windows(traj.n_ticks, plan)
    values = np.empty((len(windows), traj.n_sheep, len(marker_set)))
    elapsed = []
    for w, (start, end) in enumerate(windows):
        t0 = time.perf_counter()
        seg = Segment(traj.positions[start:end], dt=traj.dt, r_agent_repulse=traj.r_agent_repulse, start=start)
        values[w] = compute_segment_markers(seg, marker_set)
        elapsed.append(time.perf_counter() - t0)

    values[~np.isfinite(values)] = np.nan
    logger.debug(f"{plan.label}: {len(windows)} windows, {np.isnan(values).sum()} masked cells")
    return MarkerMatrix(
        values=values,
        marker_set=list(marker_set),
        plan=plan,
        windows=windows,
        agent_labels=tuple(traj.profile_labels),
        scenario_id=traj.scenario_id,
        seed=traj.seed,
        mean_window_seconds=float(np.mean(elapsed)),
        total_seconds=float(np.sum(elapsed)),
    )


def zscore_normalize(matrix: MarkerMatrix) -> MarkerMatrix:
    """
    Per-window z-score of every marker across agents (population std).

    Zero-variance or single-agent columns become zeros and are flagged in
    zero_variance[w, m]; masked cells stay masked.
    """
    values = matrix.values
    out = np.full_like(values, np.nan)
    flags = np.zeros((values.shape[0], values.shape[2]), dtype=bool)
    for w in range(values.shape[0]):
        for m in range(values.shape[2]):
            col = values[w, :, m]
            ok = ~np.isnan(col)
            if not ok.any():
                continue
            std = float(col[ok].std())
            if ok.sum() < 2 or std < 1e-12:
                out[w, ok, m] = 0.0
                flags[w, m] = True
                continue
            out[w, ok, m] = (col[ok] - col[ok].mean()) / std
    if flags.any():
        logger.debug(f"{flags.sum()} zero-variance window columns set to 0")
    return replace(matrix, values=out, normalized=True, zero_variance=flags)


# -------------------------------------------------
# Feature Files
# -------------------------------------------------

def write_feature_csv(matrix: MarkerMatrix, path: Union[str, Path]) -> Path:
    """Masked cells are written as empty fields."""
    buf = io.StringIO()
    matrix.to_frame().to_csv(buf, index=False, na_rep="")
    return atomic_write(path, buf.getvalue())


def read_feature_csv(path: Union[str, Path], plan: WindowPlan) -> MarkerMatrix:
    """
    Read a feature file back into a MarkerMatrix.

    Raises:
        SchemaError: If the id columns are missing or the rows are not rectangular
    """
    try:
        frame = pd.read_csv(path, dtype={"scenario": str, "swarm_label": str, "agent_label": str},
                            keep_default_na=False, na_values={m: [""] for m in MARKER_SET_42})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"cannot read feature file {path}: {e}") from e
    if list(frame.columns[: len(ID_COLUMNS)]) != ID_COLUMNS:
        raise SchemaError(f"feature header must start with {','.join(ID_COLUMNS)}")
    marker_set = list(frame.columns[len(ID_COLUMNS):])
    try:
        validate_marker_set(marker_set)
    except ConfigurationError as e:
        raise SchemaError(str(e)) from e

    frame = frame.sort_values(["window_index", "agent_id"], kind="stable")
    n_windows = frame["window_index"].nunique()
    n_agents = frame["agent_id"].nunique()
    if len(frame) != n_windows * n_agents:
        raise SchemaError("feature rows are not one per (window, agent)")

    first = frame[frame["window_index"] == frame["window_index"].min()]
    scenario = str(first["scenario"].iloc[0])
    seed = int(first["seed"].iloc[0])
    values = frame[marker_set].to_numpy(dtype=float).reshape(n_windows, n_agents, len(marker_set))
    s = plan.stride
    return MarkerMatrix(
        values=values,
        marker_set=marker_set,
        plan=plan,
        windows=[(s * j, s * j + plan.size) for j in range(n_windows)],
        agent_labels=tuple(ProfileLabel(v) for v in first["agent_label"]),
        scenario_id=ScenarioId(scenario) if scenario else None,
        seed=None if seed < 0 else seed,
    )


# -------------------------------------------------
# Labelled Dataset
# -------------------------------------------------

@dataclass
class LabeledDataset:
    """
    One row per (window, sheep) with its labels and split.

    frame columns: scenario, seed, window_index, agent_id, agent_label,
    swarm_label, swarm_label_2, split, then one column per marker.
    """
    frame: pd.DataFrame
    marker_set: List[str]
    seed: int = 0

    TARGETS = {"agent": "agent_label", "swarm11": "swarm_label", "swarm2": "swarm_label_2"}

    @property
    def train(self) -> pd.DataFrame:
        return self.frame[self.frame["split"] == "train"]

    @property
    def test(self) -> pd.DataFrame:
        return self.frame[self.frame["split"] == "test"]

    def features(self, split: Optional[str] = None) -> np.ndarray:
        rows = self.frame if split is None else self.frame[self.frame["split"] == split]
        return rows[self.marker_set].to_numpy(dtype=float)

    def labels(self, target: str = "agent", split: Optional[str] = None) -> np.ndarray:
        if target not in self.TARGETS:
            raise ConfigurationError(f"unknown target {target!r}", field="train")
        rows = self.frame if split is None else self.frame[self.frame["split"] == split]
        return rows[self.TARGETS[target]].to_numpy()

    def groups(self, split: Optional[str] = None) -> np.ndarray:
        rows = self.frame if split is None else self.frame[self.frame["split"] == split]
        return (rows["scenario"].astype(str) + "|" + rows["seed"].astype(str) + "|"
                + rows["window_index"].astype(str)).to_numpy()

    def with_markers(self, markers: Sequence[str]) -> "LabeledDataset":
        keep = [c for c in self.frame.columns if c not in self.marker_set or c in markers]
        return LabeledDataset(self.frame[keep].copy(), [m for m in self.marker_set if m in markers], self.seed)


def _split_groups(labels: np.ndarray, groups: np.ndarray, seed: int, test_fraction: float) -> np.ndarray:
    """Boolean test mask; groups never straddle the split."""
    n_groups = len(np.unique(groups))
    if n_groups < 2:
        raise InsufficientDataError(f"need at least 2 windows to split, got {n_groups}")
    n_splits = max(2, int(round(1 / test_fraction)))
    idx = np.arange(len(labels))
    if n_groups >= n_splits:
        try:
            folds = StratifiedGroupKFold(n_splits=n_splits, shuffle=True, random_state=seed)
            _, test_idx = next(folds.split(idx, labels, groups))
            mask = np.zeros(len(labels), dtype=bool)
            mask[test_idx] = True
            return mask
        except ValueError as e:
            logger.warning(f"stratified group split unavailable ({e}); using group shuffle split")
    splitter = GroupShuffleSplit(n_splits=1, test_size=test_fraction, random_state=seed)
    _, test_idx = next(splitter.split(idx, labels, groups))
    mask = np.zeros(len(labels), dtype=bool)
    mask[test_idx] = True
    return mask


def build_labeled_dataset(
    matrices: Sequence[MarkerMatrix],
    shuffle_seed: int,
    test_fraction: float = 0.2,
) -> LabeledDataset:
    """
    Flatten marker matrices into a shuffled 80/20 labelled dataset.

    Rows whose markers are all masked are dropped. Rows are grouped by
    (scenario, seed, window) so no window contributes to both splits, and
    the split is stratified by agent label. The split unit is the window,
    not the row: ten one-sheep windows split 8/2, while one window of ten
    sheep cannot be split at all.

    Raises:
        SchemaError: If the matrices carry different marker sets or no scenario id
        InsufficientDataError: If there are fewer than two windows
    """
    if not matrices:
        raise InsufficientDataError("no marker matrices given")
    marker_set = list(matrices[0].marker_set)
    frames = []
    for mat in matrices:
        if list(mat.marker_set) != marker_set:
            raise SchemaError(f"marker sets differ: {marker_set} vs {mat.marker_set}")
        if mat.scenario_id is None:
            raise SchemaError("marker matrix has no scenario id to label rows with")
        frame = mat.to_frame()
        frame.insert(6, "swarm_label_2", mat.swarm_label_2)
        frames.append(frame[~frame[marker_set].isna().all(axis=1)])

    frame = pd.concat(frames, ignore_index=True)
    dataset = LabeledDataset(frame, marker_set, shuffle_seed)
    test = _split_groups(frame["agent_label"].to_numpy(), dataset.groups(), shuffle_seed, test_fraction)
    frame.insert(7, "split", np.where(test, "test", "train"))

    order = np.random.default_rng(shuffle_seed).permutation(len(frame))
    dataset.frame = frame.iloc[order].reset_index(drop=True)
    logger.info(f"dataset: {len(frame)} rows, {int(test.sum())} test, {len(marker_set)} markers")
    return dataset


def representation_report(dataset: LabeledDataset, target: str = "agent", tolerance: float = 0.05) -> pd.DataFrame:
    """Per-class share of each split; warns when train and test shares drift apart."""
    column = LabeledDataset.TARGETS[target]
    shares = (
        dataset.frame.groupby("split")[column].value_counts(normalize=True)
        .unstack(level=0, fill_value=0.0)
        .reindex(columns=["train", "test"], fill_value=0.0)
    )
    shares["gap"] = (shares["train"] - shares["test"]).abs()
    worst = float(shares["gap"].max()) if len(shares) else 0.0
    if worst > tolerance:
        logger.warning(f"{column} representation differs between splits by {worst:.3f}")
    return shares
