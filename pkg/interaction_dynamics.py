"""
swarm-markers - Interaction dynamics
Agent association from per-window co-clustering, and swarm attention points.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from errors import ConfigurationError, InsufficientDataError
from marker_kernels import MARKER_SET_23
from sim_core import ProfileLabel
from windowing import MarkerMatrix

logger = logging.getLogger(__name__)

ATTENTION_TOL = 1e-12


# -------------------------------------------------
# Marker Profiles
# -------------------------------------------------

def normalized_marker_profile(values: np.ndarray) -> np.ndarray:
    """
    Divide each marker column by its L1 norm across agents.

    Columns with a masked (NaN) cell or an all-zero column are dropped.

    Args:
        values: (N, M) marker values of one window
    """
    values = np.asarray(values, dtype=float)
    usable = ~np.isnan(values).any(axis=0)
    cols = values[:, usable]
    norms = np.abs(cols).sum(axis=0)
    cols = cols[:, norms > 0]
    return cols / norms[norms > 0]


def agent_l1_profile(values: np.ndarray) -> np.ndarray:
    """
    Per-agent share of the window: L1 norm of each normalised row, scaled to sum 1.

    A window with no usable columns gives uniform shares.
    """
    norm = normalized_marker_profile(values)
    n = norm.shape[0]
    if norm.shape[1] == 0:
        return np.full(n, 1.0 / n)
    l1 = np.abs(norm).sum(axis=1)
    return l1 / l1.sum()


def _window_values(matrix: MarkerMatrix, markers: Optional[Sequence[str]]) -> np.ndarray:
    if markers is None:
        markers = [m for m in matrix.marker_set if m in MARKER_SET_23] or list(matrix.marker_set)
    missing = [m for m in markers if m not in matrix.marker_set]
    if missing:
        raise ConfigurationError(f"markers {missing} not in matrix", field="markers")
    idx = [matrix.marker_set.index(m) for m in markers]
    return matrix.values[:, :, idx]


# -------------------------------------------------
# k-means
# -------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: List[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else 0.0


def _first_seen(labels: np.ndarray) -> np.ndarray:
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse]


def _plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d2 = cdist(points, np.array(centroids), metric="sqeuclidean").min(axis=1)
        probs = d2 / d2.sum()
        centroids.append(points[rng.choice(len(points), p=probs)])
    return np.array(centroids)


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-9) -> KMeansResult:
    """
    Lloyd's algorithm with k-means++ seeding.

    Stops after max_iter iterations or when no centroid moves more than tol.
    When k is at least the number of distinct points every distinct point is
    its own cluster. Labels are numbered in order of first appearance.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if not 1 <= k <= n:
        raise ConfigurationError(f"k={k} must be in [1, {n}]", field="k")

    distinct, inverse = np.unique(points, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if k >= len(distinct):
        labels = _first_seen(inverse)
        centroids = np.stack([points[labels == c].mean(axis=0) for c in range(labels.max() + 1)])
        return KMeansResult(labels, centroids, [0.0])

    rng = np.random.default_rng(seed)
    centroids = _plus_plus(points, k, rng)
    history: List[float] = []
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = cdist(points, centroids, metric="sqeuclidean")
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), labels].sum()))

        new = centroids.copy()
        for c in range(k):
            members = points[labels == c]
            if len(members):
                new[c] = members.mean(axis=0)
            else:
                # empty cluster takes the point worst served by its centroid
                worst = int(d2[np.arange(n), labels].argmax())
                new[c] = points[worst]
                labels[worst] = c
        shift = float(np.linalg.norm(new - centroids, axis=1).max())
        centroids = new
        if shift < tol:
            break

    d2 = cdist(points, centroids, metric="sqeuclidean")
    labels = d2.argmin(axis=1)
    final = float(d2[np.arange(n), labels].sum())
    if final < history[-1]:
        history.append(final)
    return KMeansResult(_first_seen(labels), centroids, history)


# -------------------------------------------------
# Agent Association
# -------------------------------------------------

@dataclass
class AssociationResult:
    """
    adjacency_sum[i, j]: number of windows in which agents i and j shared a cluster.
    scores: normalised degree (sums to 1).
    """
    adjacency_sum: np.ndarray
    scores: np.ndarray
    assignments: np.ndarray
    zero_interaction: bool = False

    @property
    def per_agent_percent(self) -> np.ndarray:
        return self.scores * 100.0


def association_from_assignments(assignments: np.ndarray) -> AssociationResult:
    """
    Accumulate co-clustering edges over windows.

    Args:
        assignments: (W, N) cluster id of every agent in every window

    Raises:
        InsufficientDataError: If fewer than two windows are given
    """
    assignments = np.asarray(assignments)
    if assignments.ndim != 2 or assignments.shape[0] < 2:
        raise InsufficientDataError("agent association needs at least two windows")
    n = assignments.shape[1]
    adjacency = np.zeros((n, n), dtype=np.int64)
    for labels in assignments:
        adjacency += (labels[:, None] == labels[None, :]).astype(np.int64)
    np.fill_diagonal(adjacency, 0)

    degree = adjacency.sum(axis=1).astype(float)
    total = degree.sum()
    if total == 0:
        logger.debug("no co-clustered agents in any window; association is uniform")
        return AssociationResult(adjacency, np.full(n, 1.0 / n), assignments, zero_interaction=True)
    return AssociationResult(adjacency, degree / total, assignments)


def agent_association(
    matrix: MarkerMatrix,
    k: int,
    seed: int = 0,
    markers: Optional[Sequence[str]] = None,
) -> AssociationResult:
    """
    Cluster the normalised marker profiles of the agents in every window and
    accumulate the co-clustering graph.

    Args:
        matrix: Marker matrix of one run
        k: Number of agent types assumed present
        seed: Base seed; window p uses default_rng([seed, p])
        markers: Marker subset (default: M1..M23 present in the matrix)
    """
    values = _window_values(matrix, markers)
    if values.shape[0] < 2:
        raise InsufficientDataError(f"agent association needs at least two windows, got {values.shape[0]}")
    rows = []
    for p, window in enumerate(values):
        profile = normalized_marker_profile(window)
        if profile.shape[1] == 0:
            profile = np.zeros((window.shape[0], 1))
        window_seed = int(np.random.default_rng([seed, p]).integers(2 ** 31))
        rows.append(kmeans(profile, k, window_seed).labels)
    return association_from_assignments(np.stack(rows))


# -------------------------------------------------
# Attention Points
# -------------------------------------------------

@dataclass
class AttentionResult:
    """membership[w, i] is True when agent i is an attention point in window w."""
    eta: float
    membership: np.ndarray
    shares: np.ndarray

    @property
    def fractions(self) -> np.ndarray:
        return self.membership.mean(axis=0)

    @property
    def per_agent_percent(self) -> np.ndarray:
        return self.fractions * 100.0


def attention_set(shares: np.ndarray, eta: float) -> np.ndarray:
    """
    Minimal descending-share prefix whose cumulative sum reaches eta; ties by agent index.

    eta = 1 selects every agent with a nonzero share.
    """
    shares = np.asarray(shares, dtype=float)
    if eta >= 1:
        return shares > 0
    order = np.lexsort((np.arange(len(shares)), -shares))
    cum = np.cumsum(shares[order])
    reach = np.nonzero(cum >= eta - ATTENTION_TOL)[0]
    count = int(reach[0]) + 1 if len(reach) else len(shares)
    member = np.zeros(len(shares), dtype=bool)
    member[order[:count]] = True
    return member


def attention_points(profiles: np.ndarray, eta: float = 0.5) -> AttentionResult:
    """
    Attention points of every window.

    Args:
        profiles: (W, N) per-window agent shares, each row summing to 1
        eta: Threshold in (0, 1]

    Raises:
        ConfigurationError: If eta is outside (0, 1]
    """
    if not 0 < eta <= 1:
        raise ConfigurationError(f"eta={eta} must be in (0, 1]", field="eta")
    profiles = np.atleast_2d(np.asarray(profiles, dtype=float))
    membership = np.stack([attention_set(row, eta) for row in profiles])
    return AttentionResult(eta, membership, profiles)


def window_shares(matrix: MarkerMatrix, markers: Optional[Sequence[str]] = None) -> np.ndarray:
    """(W, N) agent_l1_profile of every window."""
    return np.stack([agent_l1_profile(w) for w in _window_values(matrix, markers)])


# -------------------------------------------------
# Statistics
# -------------------------------------------------

Result = Union[AssociationResult, AttentionResult]


def _stats(values: np.ndarray) -> Dict[str, float]:
    values = np.asarray(values, dtype=float)
    return {
        "max": float(values.max()),
        "min": float(values.min()),
        "range": float(values.max() - values.min()),
        "mean": float(values.mean()),
        "std": float(values.std()),
    }


def summarize(result: Union[Result, Sequence[Result]]) -> Dict[str, float]:
    """Percentage statistics of per-agent association scores or attention fractions, pooled over runs."""
    results = [result] if isinstance(result, (AssociationResult, AttentionResult)) else list(result)
    return _stats(np.concatenate([r.per_agent_percent for r in results]))


ASSOCIATION_COLUMNS = ["max", "min", "range", "mean", "std"]
ATTENTION_COLUMNS = ["mean", "std", "range", "max", "min"]


def summarize_scenarios(results: Mapping[str, Union[Result, Sequence[Result]]]) -> pd.DataFrame:
    """One row per scenario, columns ordered as the association or attention table."""
    rows = {str(name): summarize(res) for name, res in results.items()}
    first = next(iter(results.values()), None)
    sample = first if isinstance(first, (AssociationResult, AttentionResult)) else (first or [None])[0]
    columns = ATTENTION_COLUMNS if isinstance(sample, AttentionResult) else ASSOCIATION_COLUMNS
    frame = pd.DataFrame.from_dict(rows, orient="index", columns=columns)
    frame.index.name = "scenario"
    return frame


def stats_by_agent_type(values: Sequence[float], labels: Sequence[Union[ProfileLabel, str]]) -> pd.DataFrame:
    """Per-profile distribution (count, mean, std, min, max) of per-agent values."""
    frame = pd.DataFrame({
        "profile": [lab.value if isinstance(lab, ProfileLabel) else str(lab) for lab in labels],
        "value": np.asarray(values, dtype=float),
    })
    grouped = frame.groupby("profile")["value"]
    out = pd.DataFrame({
        "count": grouped.count(),
        "mean": grouped.mean(),
        "std": grouped.std(ddof=0),
        "min": grouped.min(),
        "max": grouped.max(),
    })
    return out.sort_index()
