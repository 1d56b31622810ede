"""
swarm-markers - Marker kernels
Computes markers M1..M42 for one agent over one window of positions.

All series are derived from positions alone: per-step speeds, per-step
heading changes and distances to the shepherd. Information-theoretic markers
use heading changes symbolised into three equal-width bins.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numba as nb
import numpy as np
from scipy.signal import periodogram
from scipy.spatial.distance import cdist
from scipy.stats import entropy
from sklearn.metrics import mutual_info_score

from errors import ConfigurationError, EstimatorError, WindowError

logger = logging.getLogger(__name__)

CONSTANT_STD = 1e-9
_STEP_EPS = 1e-12
N_SYMBOLS = 3


# -------------------------------------------------
# Marker Catalogue
# -------------------------------------------------

@dataclass(frozen=True)
class MarkerInfo:
    method: str
    variation: str


MARKER_CATALOGUE: Dict[str, MarkerInfo] = {
    "M1": MarkerInfo("Speed", "Segment"),
    "M2": MarkerInfo("Distance", "Segment Rate"),
    "M3": MarkerInfo("Speed", "Mean"),
    "M4": MarkerInfo("Speed", "Var"),
    "M5": MarkerInfo("Heading", "Mean"),
    "M6": MarkerInfo("Heading", "Var"),
    "M7": MarkerInfo("Situation Awareness", "Mean"),
    "M8": MarkerInfo("Situation Awareness", "Var"),
    "M9": MarkerInfo("Predation Risk", "Mean"),
    "M10": MarkerInfo("Predation Risk", "Var"),
    "M11": MarkerInfo("Dynamic Body Acceleration", "Mean"),
    "M12": MarkerInfo("Dynamic Body Acceleration", "Var"),
    "M13": MarkerInfo("Dynamic Body Acceleration", "Cumulative"),
    "M14": MarkerInfo("Rate Of Change (Angular)", "Velocity"),
    "M15": MarkerInfo("Cross Correlation", "Mean"),
    "M16": MarkerInfo("Cross Correlation", "Var"),
    "M17": MarkerInfo("Distance", "Mean"),
    "M18": MarkerInfo("Distance", "Var"),
    "M19": MarkerInfo("Distance", "Max"),
    "M20": MarkerInfo("Distance", "Min"),
    "M21": MarkerInfo("Synchronicity", "Mean"),
    "M22": MarkerInfo("Synchronicity", "Var"),
    "M23": MarkerInfo("Transfer Entropy", "Net"),
    "M24": MarkerInfo("Dynamic Time Warping", "Mean"),
    "M25": MarkerInfo("Dynamic Time Warping", "Var"),
    "M26": MarkerInfo("Active Information Storage", "Mean"),
    "M27": MarkerInfo("Transfer Entropy", "Total"),
    "M28": MarkerInfo("Effort to Compress", "Value"),
    "M29": MarkerInfo("Transfer Entropy", "Internal Net"),
    "M30": MarkerInfo("Transfer Entropy", "External Net"),
    "M31": MarkerInfo("Transfer Entropy", "Agg. Infl."),
    "M32": MarkerInfo("Transfer Entropy", "Net Source"),
    "M33": MarkerInfo("Information Flow", "Incoming Mean"),
    "M34": MarkerInfo("Information Flow", "Incoming Var"),
    "M35": MarkerInfo("Information Flow", "Outgoing Mean"),
    "M36": MarkerInfo("Information Flow", "Outgoing Var"),
    "M37": MarkerInfo("Lyapunov Exponent", "Mean"),
    "M38": MarkerInfo("Lyapunov Exponent", "Var"),
    "M39": MarkerInfo("Noise-to-Signal", "Mean"),
    "M40": MarkerInfo("Noise-to-Signal", "Var"),
    "M41": MarkerInfo("Power Spectral Density", "Entropy"),
    "M42": MarkerInfo("Shannon Entropy", "Value"),
}

MARKER_IDS: List[str] = list(MARKER_CATALOGUE)
MARKER_SET_23: List[str] = MARKER_IDS[:23]
MARKER_SET_42: List[str] = MARKER_IDS
MI95_REFERENCE_SET: List[str] = [
    "M1", "M3", "M4", "M5", "M6", "M11", "M12", "M13", "M14", "M15", "M16", "M22", "M23",
]
COI_SET: List[str] = ["M7", "M8", "M9", "M10", "M21", "M22"]

# M5 is an absolute direction; the others do not depend on the global frame
FRAME_DEPENDENT_MARKERS = frozenset({"M5"})


def validate_marker_set(markers: Iterable[str]) -> List[str]:
    markers = list(markers)
    unknown = [m for m in markers if m not in MARKER_CATALOGUE]
    if unknown:
        raise ConfigurationError(f"unknown markers {unknown}", field="markers")
    if len(set(markers)) != len(markers):
        raise ConfigurationError("duplicate markers", field="markers")
    if not markers:
        raise ConfigurationError("marker set is empty", field="markers")
    return markers


# -------------------------------------------------
# Segment
# -------------------------------------------------

def _safe_var(x: np.ndarray) -> float:
    return float(np.var(x)) if len(x) else 0.0


def _safe_mean(x: np.ndarray) -> float:
    return float(np.mean(x)) if len(x) else 0.0


def _is_constant(x: np.ndarray) -> bool:
    return len(x) == 0 or float(np.std(x)) < CONSTANT_STD


def heading_changes(steps: np.ndarray) -> np.ndarray:
    """
    Wrapped turn angles between consecutive displacement vectors.

    Args:
        steps: (n, 2) displacements

    Returns:
        (n-1,) angles in (-pi, pi]; 0 where either step is shorter than 1e-12
    """
    if len(steps) < 2:
        return np.zeros(0)
    angles = np.arctan2(steps[:, 1], steps[:, 0])
    turn = np.diff(angles)
    turn = np.pi - np.mod(np.pi - turn, 2 * np.pi)
    moving = np.linalg.norm(steps, axis=1) > _STEP_EPS
    return np.where(moving[1:] & moving[:-1], turn, 0.0)


@dataclass
class Segment:
    """
    Positions of every agent over a window of k ticks.

    positions is (k, N+1, 2) with the shepherd as the last agent. Series that
    several markers share are cached per segment.
    """
    positions: np.ndarray
    dt: float = 1.0
    r_agent_repulse: float = 2.0
    start: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 3 or self.positions.shape[2] != 2 or self.positions.shape[1] < 2:
            raise WindowError(f"segment positions must be (k, N+1, 2), got {self.positions.shape}")
        if self.k < 1:
            raise WindowError("segment has no ticks")

    @property
    def k(self) -> int:
        return self.positions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    @property
    def n_sheep(self) -> int:
        return self.n_agents - 1

    @property
    def shepherd(self) -> int:
        return self.n_agents - 1

    @property
    def duration(self) -> float:
        return (self.k - 1) * self.dt

    def require(self, min_k: int, what: str) -> None:
        if self.k < min_k:
            raise WindowError(f"{what} needs k >= {min_k}, window has k={self.k}")

    def check_sheep(self, i: int) -> None:
        if not 0 <= i < self.n_sheep:
            raise ConfigurationError(f"{i} is not a sheep index", field="agent")

    @cached_property
    def steps(self) -> np.ndarray:
        """(k-1, A, 2) displacements."""
        return np.diff(self.positions, axis=0)

    @cached_property
    def speeds(self) -> np.ndarray:
        """(A, k-1) per-step speeds."""
        return (np.linalg.norm(self.steps, axis=2) / self.dt).T

    @cached_property
    def turns(self) -> np.ndarray:
        """(A, k-2) heading changes."""
        return np.stack([heading_changes(self.steps[:, a]) for a in range(self.n_agents)])

    @cached_property
    def symbols(self) -> np.ndarray:
        return np.stack([symbolize(t, N_SYMBOLS) for t in self.turns])

    @cached_property
    def shepherd_distances(self) -> np.ndarray:
        """(N, k) distance of every sheep to the shepherd."""
        sheep = self.positions[:, :-1]
        beta = self.positions[:, -1:]
        return np.linalg.norm(sheep - beta, axis=2).T

    @cached_property
    def te_matrix(self) -> np.ndarray:
        """te[j, i] = transfer entropy j -> i in bits; zero diagonal."""
        self.require(4, "transfer entropy")
        return pairwise_te(self.symbols)

    @cached_property
    def dtw_matrix(self) -> np.ndarray:
        self.require(2, "dynamic time warping")
        n = self.n_sheep
        out = np.zeros((n, n))
        for a in range(n):
            for b in range(a + 1, n):
                out[a, b] = out[b, a] = dtw_distance(self.speeds[a], self.speeds[b])
        return out

    @cached_property
    def spatial_series(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-tick SA and PR, each (N, k)."""
        sa = np.zeros((self.n_sheep, self.k))
        pr = np.zeros((self.n_sheep, self.k))
        for t in range(self.k):
            sheep = self.positions[t, :-1]
            beta = self.positions[t, -1]
            for i in range(self.n_sheep):
                ctx = spatial_context(sheep, beta, i, self.r_agent_repulse)
                sa[i, t] = situation_awareness(ctx)
                pr[i, t] = predation_risk(ctx, self.n_sheep)
        return sa, pr

    def pair(self, j: int, i: int) -> "PairwiseTE":
        te = self.te_matrix
        return PairwiseTE(te_fwd=float(te[j, i]), te_rev=float(te[i, j]))


# -------------------------------------------------
# Kinematics
# -------------------------------------------------

def kinematic_stats(seg: Segment, i: int) -> Dict[str, float]:
    """
    Speed, heading, turn-rate and shepherd-distance markers.

    Rates use the window duration (k-1)*dt.

    Raises:
        WindowError: If k < 3
    """
    seg.check_sheep(i)
    seg.require(3, "kinematic markers")
    path = seg.positions[:, i]
    steps = seg.steps[:, i]
    speeds = seg.speeds[i]
    step_len = np.linalg.norm(steps, axis=1)

    moving = steps[step_len > _STEP_EPS]
    if len(moving):
        unit = moving / np.linalg.norm(moving, axis=1, keepdims=True)
        mean_vec = unit.mean(axis=0)
        heading_mean = float(np.arctan2(mean_vec[1], mean_vec[0]))
        heading_var = float(max(0.0, 1.0 - np.linalg.norm(mean_vec)))
    else:
        heading_mean = heading_var = 0.0

    dist = seg.shepherd_distances[i]
    return {
        "M1": float(np.linalg.norm(path[-1] - path[0]) / seg.duration),
        "M2": float(step_len.sum() / seg.duration),
        "M3": _safe_mean(speeds),
        "M4": _safe_var(speeds),
        "M5": heading_mean,
        "M6": heading_var,
        "M14": _safe_mean(seg.turns[i] / seg.dt),
        "M17": float(dist.mean()),
        "M18": float(dist.var()),
        "M19": float(dist.max()),
        "M20": float(dist.min()),
    }


def dba_stats(seg: Segment, i: int) -> Dict[str, float]:
    """
    Dynamic body acceleration from second differences of position.

    M13 (overall DBA) sums |a_x| + |a_y| over the interior ticks.
    """
    seg.check_sheep(i)
    seg.require(3, "body acceleration")
    acc = np.diff(seg.positions[:, i], n=2, axis=0) / seg.dt ** 2
    magnitude = np.linalg.norm(acc, axis=1)
    return {
        "M11": float(magnitude.mean()),
        "M12": float(magnitude.var()),
        "M13": float(np.abs(acc).sum()),
    }


# -------------------------------------------------
# Spatial Context
# -------------------------------------------------

@dataclass(frozen=True)
class SpatialContext:
    d_pi_beta: float
    d_pi_gcm: float
    d_gcm_beta: float
    theta: int
    bin_order: int
    n_bins: int
    omega_pipi: int


def line_of_sight_obstructions(
    positions: np.ndarray, i: int, beta: np.ndarray, r_agent_repulse: float = 2.0
) -> int:
    """
    Count other sheep within r_a/2 of the open segment from sheep i to the shepherd.

    Args:
        positions: (N, 2) sheep positions
        i: Observing sheep
        beta: Shepherd position
    """
    positions = np.asarray(positions, dtype=float)
    origin = positions[i]
    axis = np.asarray(beta, dtype=float) - origin
    length_sq = float(axis @ axis)
    if length_sq <= _STEP_EPS ** 2:
        return 0
    others = np.delete(positions, i, axis=0)
    if not len(others):
        return 0
    rel = others - origin
    u = rel @ axis / length_sq
    perp = np.abs(rel[:, 0] * axis[1] - rel[:, 1] * axis[0]) / math.sqrt(length_sq)
    return int(np.count_nonzero((u > 0) & (u < 1) & (perp <= r_agent_repulse / 2)))


def spatial_context(
    positions: np.ndarray, beta: np.ndarray, i: int, r_agent_repulse: float = 2.0
) -> SpatialContext:
    """Distances, obstruction count, shepherd-distance bin and crowding for sheep i at one tick."""
    positions = np.asarray(positions, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = len(positions)
    gcm = positions.mean(axis=0)
    to_beta = np.linalg.norm(positions - beta, axis=1)

    n_bins = math.ceil(math.sqrt(n))
    lo, hi = float(to_beta.min()), float(to_beta.max())
    if hi - lo <= CONSTANT_STD:
        bin_order = 1
    else:
        bin_order = min(n_bins, int((to_beta[i] - lo) / (hi - lo) * n_bins) + 1)

    near = np.linalg.norm(positions - positions[i], axis=1) <= 3 * r_agent_repulse
    return SpatialContext(
        d_pi_beta=float(to_beta[i]),
        d_pi_gcm=float(np.linalg.norm(positions[i] - gcm)),
        d_gcm_beta=float(np.linalg.norm(gcm - beta)),
        theta=line_of_sight_obstructions(positions, i, beta, r_agent_repulse),
        bin_order=bin_order,
        n_bins=n_bins,
        omega_pipi=int(np.count_nonzero(near)) - 1,
    )


def situation_awareness(ctx: SpatialContext) -> float:
    """
    SA = 1 / ((d_pi_beta^2 / (d_pi_gcm * d_gcm_beta)) * theta + 1).

    With a zero denominator distance SA is 1 when unobstructed and 0 otherwise.
    """
    if ctx.theta == 0:
        return 1.0
    denom = ctx.d_pi_gcm * ctx.d_gcm_beta
    if denom <= 0:
        return 0.0
    return 1.0 / ((ctx.d_pi_beta ** 2 / denom) * ctx.theta + 1.0)


def predation_risk(ctx: SpatialContext, n: int) -> float:
    """PR = (1 / bin_order) * N / (omega + 1)."""
    return (1.0 / ctx.bin_order) * n / (ctx.omega_pipi + 1)


def spatial_stats(seg: Segment, i: int) -> Dict[str, float]:
    seg.check_sheep(i)
    sa, pr = seg.spatial_series
    return {
        "M7": float(sa[i].mean()),
        "M8": float(sa[i].var()),
        "M9": float(pr[i].mean()),
        "M10": float(pr[i].var()),
    }


# -------------------------------------------------
# Cross Correlation
# -------------------------------------------------

def cross_correlation(x: np.ndarray, y: np.ndarray, max_lag: int) -> np.ndarray:
    """
    Pearson correlation of x[t] with y[t + lag] for lag in -max_lag..max_lag.

    Lags whose overlap is shorter than two samples, or where either side is
    constant, give 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = min(len(x), len(y))
    out = np.zeros(2 * max_lag + 1)
    for idx, lag in enumerate(range(-max_lag, max_lag + 1)):
        if lag >= 0:
            a, b = x[: n - lag], y[lag:n]
        else:
            a, b = x[-lag:n], y[: n + lag]
        if len(a) < 2 or _is_constant(a) or _is_constant(b):
            continue
        out[idx] = float(np.corrcoef(a, b)[0, 1])
    return out


def cross_correlation_stats(seg: Segment, i: int) -> Dict[str, float]:
    seg.check_sheep(i)
    seg.require(4, "cross correlation")
    coeffs = cross_correlation(seg.speeds[i], seg.speeds[seg.shepherd], seg.k // 4)
    return {"M15": float(coeffs.mean()), "M16": float(coeffs.var())}


# -------------------------------------------------
# Discrete Estimators
# -------------------------------------------------

def symbolize(series: Sequence[float], n_bins: int) -> np.ndarray:
    """
    Equal-width binning over the series' own range into 0..n_bins-1.

    Constant series map to all zeros.
    """
    if n_bins < 2:
        raise ConfigurationError("need at least two bins", field="n_bins")
    x = np.asarray(series, dtype=float)
    if _is_constant(x):
        return np.zeros(len(x), dtype=np.int64)
    lo, hi = x.min(), x.max()
    codes = np.floor((x - lo) / (hi - lo) * n_bins).astype(np.int64)
    return np.clip(codes, 0, n_bins - 1)


def local_transfer_entropy(source: Sequence[int], target: Sequence[int]) -> np.ndarray:
    """
    Local transfer entropy source -> target in bits, history length 1.

    Returns one value per transition t -> t+1 (length n-1).

    Raises:
        EstimatorError: If the series differ in length or have fewer than 2 samples
    """
    x = np.asarray(source, dtype=np.int64)
    y = np.asarray(target, dtype=np.int64)
    if len(x) != len(y):
        raise EstimatorError("source and target lengths differ")
    if len(x) < 2:
        raise EstimatorError("transfer entropy needs at least two samples")

    a = int(max(x.max(), y.max())) + 1
    y_next, y_prev, x_prev = y[1:], y[:-1], x[:-1]
    joint = (y_next * a + y_prev) * a + x_prev
    past = y_prev * a + x_prev
    pair = y_next * a + y_prev

    c_joint = np.bincount(joint)[joint]
    c_past = np.bincount(past)[past]
    c_pair = np.bincount(pair)[pair]
    c_prev = np.bincount(y_prev)[y_prev]
    return np.log2(c_joint * c_prev / (c_past * c_pair))


def transfer_entropy(source: Sequence[int], target: Sequence[int]) -> float:
    """Average of the local values; the plug-in estimate is non-negative."""
    return max(0.0, float(local_transfer_entropy(source, target).mean()))


def pairwise_te(symbols: np.ndarray) -> np.ndarray:
    """te[j, i] for every ordered pair of rows of a (A, n) symbol array."""
    a = len(symbols)
    out = np.zeros((a, a))
    for j in range(a):
        for i in range(a):
            if i != j:
                out[j, i] = transfer_entropy(symbols[j], symbols[i])
    return out


@dataclass(frozen=True)
class PairwiseTE:
    """Transfer entropy between J and I: te_fwd = te(J -> I), te_rev = te(I -> J)."""
    te_fwd: float
    te_rev: float

    @property
    def net(self) -> float:
        return self.te_fwd - self.te_rev

    @property
    def tot(self) -> float:
        return self.te_fwd + self.te_rev

    @property
    def sync(self) -> float:
        return synchronicity(self)


def synchronicity(pair: PairwiseTE) -> float:
    """sgn(net) * |tot|: positive when J informs I, 0 when neither leads."""
    return float(np.sign(pair.net)) * abs(pair.tot)


def active_information_storage(symbols: Sequence[int]) -> float:
    """I(X_t ; X_{t-1}) in bits."""
    x = np.asarray(symbols)
    if len(x) < 2:
        raise EstimatorError("storage needs at least two samples")
    return float(mutual_info_score(x[:-1], x[1:])) / math.log(2)


def shannon_entropy(symbols: Sequence[int]) -> float:
    x = np.asarray(symbols)
    if not len(x):
        return 0.0
    _, counts = np.unique(x, return_counts=True)
    return float(entropy(counts, base=2))


def effort_to_compress(symbols: Sequence[int]) -> int:
    """
    Number of non-sequential recursive pair substitution passes.

    Each pass replaces the most frequent adjacent pair (lowest pair on ties)
    with a new symbol, until the sequence is constant or a single symbol.
    """
    seq = [int(s) for s in symbols]
    passes = 0
    next_symbol = max(seq, default=0) + 1
    while len(seq) > 1 and len(set(seq)) > 1:
        counts: Dict[Tuple[int, int], int] = {}
        last_same: Dict[Tuple[int, int], int] = {}
        for t in range(len(seq) - 1):
            p = (seq[t], seq[t + 1])
            # overlapping runs like aaa count once per non-overlapping pair
            if p[0] == p[1] and last_same.get(p) == t - 1:
                continue
            counts[p] = counts.get(p, 0) + 1
            if p[0] == p[1]:
                last_same[p] = t
        best = min(counts, key=lambda p: (-counts[p], p))

        out: List[int] = []
        t = 0
        while t < len(seq):
            if t + 1 < len(seq) and (seq[t], seq[t + 1]) == best:
                out.append(next_symbol)
                t += 2
            else:
                out.append(seq[t])
                t += 1
        seq = out
        next_symbol += 1
        passes += 1
    return passes


def spectral_entropy(series: Sequence[float]) -> float:
    """Shannon entropy (bits) of the normalised periodogram; 0 for constant series."""
    x = np.asarray(series, dtype=float)
    if len(x) < 2 or _is_constant(x):
        return 0.0
    _, psd = periodogram(x, detrend="constant")
    total = psd.sum()
    if total <= 0:
        return 0.0
    return float(entropy(psd / total, base=2))


def transfer_entropy_suite(seg: Segment, i: int) -> Dict[str, float]:
    """Net, total and aggregate transfer entropy of sheep i (bits)."""
    seg.check_sheep(i)
    te = seg.te_matrix
    b = seg.shepherd
    sheep = [j for j in range(seg.n_sheep) if j != i]
    others = sheep + [b]
    return {
        "M23": float(te[i, b] - te[b, i]),
        "M27": float(te[i, b] + te[b, i]),
        "M29": float(sum(te[j, i] - te[i, j] for j in sheep)),
        "M30": float(te[b, i] - te[i, b]),
        "M31": float(sum(te[j, i] + te[i, j] for j in others)),
        "M32": float(sum(te[i, j] for j in others)),
    }


def synchronicity_stats(seg: Segment, i: int) -> Dict[str, float]:
    seg.check_sheep(i)
    s = np.array([seg.pair(j, i).sync for j in range(seg.n_agents) if j != i])
    return {"M21": float(s.mean()), "M22": float(s.var())}


def storage_entropy_suite(seg: Segment, i: int) -> Dict[str, float]:
    seg.check_sheep(i)
    seg.require(4, "storage and entropy markers")
    sym = seg.symbols[i]
    return {
        "M26": active_information_storage(sym),
        "M28": float(effort_to_compress(sym)),
        "M41": spectral_entropy(seg.speeds[i]),
        "M42": shannon_entropy(sym),
    }


# -------------------------------------------------
# Time-Series Markers
# -------------------------------------------------

@nb.njit(nogil=True, cache=False)
def _dtw_accumulate(cost):
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return acc[n, m]


def dtw_distance(x: Sequence[float], y: Sequence[float]) -> float:
    """DTW with the symmetric1 step pattern and absolute-difference local cost."""
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    if not len(x) or not len(y):
        raise WindowError("DTW needs non-empty series")
    return float(_dtw_accumulate(cdist(x, y, metric="euclidean")))


def largest_lyapunov(
    series: Sequence[float],
    dim: int = 2,
    lag: int = 1,
    min_separation: int = 1,
    horizon: Optional[int] = None,
    dt: float = 1.0,
) -> Tuple[float, float]:
    """
    Rosenstein largest Lyapunov estimate.

    For each reference point the nearest neighbour in the delay embedding
    (excluding temporal neighbours within min_separation) is followed for
    `horizon` steps and the slope of ln(divergence) is fitted.

    Returns:
        (mean, var) of the per-point slopes in nats per time unit

    Raises:
        WindowError: If the series is too short for the embedding and horizon
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if horizon is None:
        horizon = max(2, min(5, n // 8))
    m = n - (dim - 1) * lag
    if n < 7 or m - horizon < 2:
        raise WindowError(f"Lyapunov estimate needs a longer series (n={n})")
    if _is_constant(x):
        return 0.0, 0.0

    emb = np.stack([x[d * lag: d * lag + m] for d in range(dim)], axis=1)
    usable = m - horizon
    dist = cdist(emb[:usable], emb[:usable])
    idx = np.arange(usable)
    dist[np.abs(idx[:, None] - idx[None, :]) <= min_separation] = np.inf
    dist[dist < CONSTANT_STD] = np.inf

    times = np.arange(horizon + 1) * dt
    slopes = []
    for t in range(usable):
        if not np.isfinite(dist[t]).any():
            continue
        # nearest neighbour, lowest index among distances equal within CONSTANT_STD
        j = int(np.argmax(dist[t] <= dist[t].min() + CONSTANT_STD))
        div = np.linalg.norm(emb[t: t + horizon + 1] - emb[j: j + horizon + 1], axis=1)
        if np.any(div < CONSTANT_STD):
            continue
        slopes.append(np.polyfit(times, np.log(div), 1)[0])
    if not slopes:
        return 0.0, 0.0
    slopes = np.asarray(slopes)
    return float(slopes.mean()), float(slopes.var())


def noise_to_signal(series: Sequence[float]) -> np.ndarray:
    """
    Per-tick squared residual of the centred 3-point moving average over the series variance.

    Raises:
        WindowError: If fewer than 3 samples
    """
    x = np.asarray(series, dtype=float)
    if len(x) < 3:
        raise WindowError("noise-to-signal needs at least three samples")
    if _is_constant(x):
        return np.zeros(len(x) - 2)
    smooth = np.convolve(x, np.ones(3) / 3, mode="valid")
    return (x[1:-1] - smooth) ** 2 / x.var()


def timeseries_suite(seg: Segment, i: int) -> Dict[str, float]:
    """
    DTW, information flow, Lyapunov and noise-to-signal markers.

    Lyapunov markers are NaN in windows shorter than 8 ticks.
    """
    seg.check_sheep(i)
    seg.require(4, "time-series markers")
    out: Dict[str, float] = {}

    partners = [j for j in range(seg.n_sheep) if j != i]
    if partners:
        d = seg.dtw_matrix[i, partners]
        out.update(M24=float(d.mean()), M25=float(d.var()))
    else:
        out.update(M24=math.nan, M25=math.nan)

    te = seg.te_matrix
    others = [j for j in range(seg.n_agents) if j != i]
    incoming, outgoing = te[others, i], te[i, others]
    out.update(
        M33=float(incoming.mean()), M34=float(incoming.var()),
        M35=float(outgoing.mean()), M36=float(outgoing.var()),
    )

    try:
        mean, var = largest_lyapunov(seg.speeds[i], dt=seg.dt)
    except WindowError:
        mean = var = math.nan
    out.update(M37=mean, M38=var)

    ratio = noise_to_signal(seg.speeds[i])
    out.update(M39=float(ratio.mean()), M40=float(ratio.var()))
    return out


# -------------------------------------------------
# Assembly
# -------------------------------------------------

_GROUPS: List[Tuple[Callable[[Segment, int], Dict[str, float]], Tuple[str, ...]]] = [
    (kinematic_stats, ("M1", "M2", "M3", "M4", "M5", "M6", "M14", "M17", "M18", "M19", "M20")),
    (spatial_stats, ("M7", "M8", "M9", "M10")),
    (dba_stats, ("M11", "M12", "M13")),
    (cross_correlation_stats, ("M15", "M16")),
    (synchronicity_stats, ("M21", "M22")),
    (transfer_entropy_suite, ("M23", "M27", "M29", "M30", "M31", "M32")),
    (storage_entropy_suite, ("M26", "M28", "M41", "M42")),
    (timeseries_suite, ("M24", "M25", "M33", "M34", "M35", "M36", "M37", "M38", "M39", "M40")),
]


def compute_agent_markers(seg: Segment, i: int, marker_set: Sequence[str] = MARKER_SET_42) -> np.ndarray:
    """
    Marker vector of sheep i in marker_set order.

    A group whose preconditions fail yields NaN (not available) for its
    markers instead of aborting the window.
    """
    wanted = set(marker_set)
    values: Dict[str, float] = {}
    for fn, names in _GROUPS:
        if wanted.isdisjoint(names):
            continue
        try:
            values.update(fn(seg, i))
        except WindowError as e:
            logger.debug(f"window@{seg.start} agent {i}: {fn.__name__} not available ({e})")
            values.update({name: math.nan for name in names})
    return np.array([values[m] for m in marker_set], dtype=float)


def compute_segment_markers(seg: Segment, marker_set: Sequence[str] = MARKER_SET_42) -> np.ndarray:
    """(N, M) marker values for every sheep in the segment."""
    return np.stack([compute_agent_markers(seg, i, marker_set) for i in range(seg.n_sheep)])
