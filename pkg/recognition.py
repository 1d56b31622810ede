"""
swarm-markers - Recognition
Decision-tree classification of agent and swarm profiles, window sweeps,
marker ablation and mutual-information marker selection.
"""

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import entropy
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import accuracy_score, f1_score, mutual_info_score
from sklearn.model_selection import StratifiedKFold
from sklearn.preprocessing import KBinsDiscretizer

from errors import DegenerateModelError, InsufficientDataError
from marker_kernels import COI_SET
from windowing import LabeledDataset, WindowPlan, canonical_plans

logger = logging.getLogger(__name__)

DEPTH_RANGE = (2, 30)
MIN_LEAF_RANGE = (1, 50)
N_STARTUP_TRIALS = 10
TPE_GAMMA = 0.25
TPE_CANDIDATES = 24


# -------------------------------------------------
# Gini Tree
# -------------------------------------------------

TIE_TOL = 1e-9
TREE_LEAF = -1
TREE_UNDEFINED = -2


@dataclass
class TreeArrays:
    """Node arrays of a fitted tree, preorder with left subtrees first."""
    feature: np.ndarray
    threshold: np.ndarray
    children_left: np.ndarray
    children_right: np.ndarray
    missing_go_to_left: np.ndarray
    value: np.ndarray  # (nodes, 1, classes) training class counts
    n_node_samples: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(len(X), dtype=np.intp)
        active = self.children_left[node] != TREE_LEAF
        while active.any():
            rows = np.nonzero(active)[0]
            at = node[rows]
            x = X[rows, self.feature[at]]
            go_left = np.where(np.isnan(x), self.missing_go_to_left[at], x <= self.threshold[at])
            node[rows] = np.where(go_left, self.children_left[at], self.children_right[at])
            active = self.children_left[node] != TREE_LEAF
        return node


def best_split(
    X: np.ndarray, codes: np.ndarray, n_classes: int, min_leaf: int
) -> Optional[Tuple[int, float, Optional[bool]]]:
    """
    Best Gini split of one node as (feature, threshold, missing_left).

    Features are scanned in index order and thresholds in ascending order;
    a candidate replaces the incumbent only if strictly better, so ties go
    to the lowest feature index. Thresholds are midpoints between adjacent
    distinct values. NaN cells are tried on the left, then on the right;
    missing_left is None when the feature has no NaN in this node.
    """
    n = len(codes)
    onehot = np.eye(n_classes)[codes]
    total = onehot.sum(axis=0)
    best, best_score = None, -np.inf
    for j in range(X.shape[1]):
        x = X[:, j]
        present = ~np.isnan(x)
        order = np.argsort(x[present], kind="stable")
        xs = x[present][order]
        if len(xs) == 0:
            continue
        cum = np.cumsum(onehot[present][order], axis=0)
        n_missing = n - len(xs)
        cut = np.nonzero(xs[:-1] < xs[1:])[0]
        thresholds = (xs[cut] + xs[cut + 1]) / 2
        thresholds = np.where(thresholds == xs[cut + 1], xs[cut], thresholds)
        if n_missing:
            cut = np.append(cut, len(xs) - 1)
            thresholds = np.append(thresholds, np.inf)
        for missing_left in ((True, False) if n_missing else (None,)):
            extra = total - cum[-1] if missing_left else 0.0
            left = cum[cut] + extra
            n_left = cut + 1 + (n_missing if missing_left else 0)
            n_right = n - n_left
            ok = (n_left >= min_leaf) & (n_right >= min_leaf)
            if not ok.any():
                continue
            right = total - left
            with np.errstate(divide="ignore", invalid="ignore"):
                score = (left ** 2).sum(axis=1) / n_left + (right ** 2).sum(axis=1) / n_right
            score = np.where(ok, score, -np.inf)
            i = int(np.argmax(score))
            if score[i] > best_score + TIE_TOL:
                best_score = float(score[i])
                best = (j, float(thresholds[i]), missing_left)
    return best


class GiniTree(ClassifierMixin, BaseEstimator):
    """
    CART classifier: Gini impurity, midpoint thresholds, lowest-index ties.

    Fitting is deterministic; no random state is involved. The fitted
    tree_ carries the node arrays sklearn trees expose.
    """

    def __init__(self, max_depth: Optional[int] = None, min_samples_leaf: int = 1):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GiniTree":
        X = np.asarray(X, dtype=float)
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        self.n_features_in_ = X.shape[1]
        nodes: Dict[str, list] = {f.name: [] for f in fields(TreeArrays)}
        self._grow(X, codes.ravel(), 0, nodes)
        self.tree_ = TreeArrays(
            feature=np.array(nodes["feature"], dtype=np.intp),
            threshold=np.array(nodes["threshold"], dtype=float),
            children_left=np.array(nodes["children_left"], dtype=np.intp),
            children_right=np.array(nodes["children_right"], dtype=np.intp),
            missing_go_to_left=np.array(nodes["missing_go_to_left"], dtype=bool),
            value=np.array(nodes["value"], dtype=float)[:, None, :],
            n_node_samples=np.array(nodes["n_node_samples"], dtype=np.intp),
        )
        return self

    def _grow(self, X: np.ndarray, codes: np.ndarray, depth: int, nodes: Dict[str, list]) -> int:
        """Append the subtree for these rows in preorder; returns its root id."""
        node_id = len(nodes["feature"])
        counts = np.bincount(codes, minlength=len(self.classes_)).astype(float)
        for key, default in (("feature", TREE_UNDEFINED), ("threshold", float(TREE_UNDEFINED)),
                             ("children_left", TREE_LEAF), ("children_right", TREE_LEAF),
                             ("missing_go_to_left", False), ("value", counts),
                             ("n_node_samples", len(codes))):
            nodes[key].append(default)

        min_leaf = int(self.min_samples_leaf)
        if np.count_nonzero(counts) < 2 or len(codes) < 2 * min_leaf:
            return node_id
        if self.max_depth is not None and depth >= self.max_depth:
            return node_id
        split = best_split(X, codes, len(self.classes_), min_leaf)
        if split is None:
            return node_id

        feature, threshold, missing_left = split
        x = X[:, feature]
        go_left = x <= threshold
        if missing_left is None:
            missing_left = bool(go_left.sum() >= len(x) - go_left.sum())
        go_left = np.where(np.isnan(x), missing_left, go_left)
        nodes["feature"][node_id] = feature
        nodes["threshold"][node_id] = threshold
        nodes["missing_go_to_left"][node_id] = missing_left
        nodes["children_left"][node_id] = self._grow(X[go_left], codes[go_left], depth + 1, nodes)
        nodes["children_right"][node_id] = self._grow(X[~go_left], codes[~go_left], depth + 1, nodes)
        return node_id

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        counts = self.tree_.value[self.tree_.apply(np.asarray(X, dtype=float)), 0]
        return counts / counts.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


# -------------------------------------------------
# Tree Model
# -------------------------------------------------

@dataclass
class TreeModel:
    """
    A fitted CART classifier (Gini) with the settings and scores that produced it.

    search is "tpe", "random" (budget too small for the model-based stage)
    or "fixed" (hyperparameters given).
    """
    estimator: GiniTree
    marker_set: List[str]
    target: str
    max_depth: int
    min_leaf: int
    seed: int
    search: str = "fixed"
    cv_accuracy: float = math.nan
    test_accuracy: float = math.nan
    trials: List[Dict[str, float]] = field(default_factory=list)

    @property
    def classes(self) -> List[str]:
        return [str(c) for c in self.estimator.classes_]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.estimator.predict(np.asarray(X, dtype=float))

    def used_markers(self) -> List[str]:
        feats = self.estimator.tree_.feature
        return sorted({self.marker_set[f] for f in feats if f >= 0}, key=self.marker_set.index)

    def to_dict(self) -> Dict:
        tree = self.estimator.tree_
        nodes = []
        for n in range(tree.node_count):
            counts = tree.value[n][0]
            node = {"id": n, "samples": int(tree.n_node_samples[n])}
            if tree.children_left[n] < 0:
                node["distribution"] = (counts / counts.sum()).round(12).tolist()
            else:
                node.update(
                    marker=self.marker_set[tree.feature[n]],
                    threshold=float(tree.threshold[n]),
                    left=int(tree.children_left[n]),
                    right=int(tree.children_right[n]),
                    missing_left=bool(tree.missing_go_to_left[n]),
                )
            nodes.append(node)
        return {
            "criterion": "gini",
            "target": self.target,
            "classes": self.classes,
            "markers": self.marker_set,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "seed": self.seed,
            "search": self.search,
            "cv_accuracy": self.cv_accuracy,
            "test_accuracy": self.test_accuracy,
            "nodes": nodes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int) -> GiniTree:
    clf = GiniTree(max_depth=int(max_depth), min_samples_leaf=int(min_leaf))
    return clf.fit(np.asarray(X, dtype=float), y)


def cross_val_accuracy(
    X: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int, folds: int, seed: int
) -> float:
    """Mean of per-fold accuracies over stratified folds."""
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = []
    for train_idx, val_idx in splitter.split(X, y):
        clf = fit_tree(X[train_idx], y[train_idx], max_depth, min_leaf)
        scores.append(accuracy_score(y[val_idx], clf.predict(X[val_idx])))
    return float(np.mean(scores))


# -------------------------------------------------
# Hyperparameter Search
# -------------------------------------------------

def _parzen_logpdf(x: float, centres: np.ndarray, low: int, high: int) -> float:
    span = high - low
    sigma = max(1.0, span / max(1.0, math.sqrt(len(centres))))
    dens = np.exp(-0.5 * ((x - centres) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
    prior = 1.0 / (span + 1)
    return math.log((dens.sum() + prior) / (len(centres) + 1))


def tpe_search(
    objective: Callable[[int, int], float],
    budget: int,
    seed: int,
    n_startup: int = N_STARTUP_TRIALS,
    gamma: float = TPE_GAMMA,
    n_candidates: int = TPE_CANDIDATES,
) -> Tuple[Dict[str, int], List[Dict[str, float]], str]:
    """
    Tree-structured Parzen search over (max_depth, min_leaf), maximising objective.

    The first n_startup trials are uniform random; budgets of n_startup or
    fewer are therefore plain random search, reported as "random".

    Returns:
        (best params, trial history, search mode)
    """
    rng = np.random.default_rng(seed)
    bounds = {"max_depth": DEPTH_RANGE, "min_leaf": MIN_LEAF_RANGE}
    cache: Dict[Tuple[int, int], float] = {}
    trials: List[Dict[str, float]] = []

    def evaluate(params: Dict[str, int]) -> None:
        key = (params["max_depth"], params["min_leaf"])
        if key not in cache:
            cache[key] = objective(*key)
        trials.append({**params, "score": cache[key]})

    for t in range(max(1, budget)):
        if t < n_startup:
            params = {name: int(rng.integers(lo, hi + 1)) for name, (lo, hi) in bounds.items()}
        else:
            ranked = sorted(range(len(trials)), key=lambda k: (-trials[k]["score"], k))
            n_good = max(1, math.ceil(gamma * len(trials)))
            good = [trials[k] for k in ranked[:n_good]]
            bad = [trials[k] for k in ranked[n_good:]] or good
            best_ratio, params = -math.inf, None
            for _ in range(n_candidates):
                anchor = good[int(rng.integers(len(good)))]
                cand = {}
                ratio = 0.0
                for name, (lo, hi) in bounds.items():
                    sigma = max(1.0, (hi - lo) / max(1.0, math.sqrt(len(good))))
                    value = int(np.clip(round(anchor[name] + rng.normal(0, sigma)), lo, hi))
                    cand[name] = value
                    ratio += (_parzen_logpdf(value, np.array([g[name] for g in good]), lo, hi)
                              - _parzen_logpdf(value, np.array([b[name] for b in bad]), lo, hi))
                if ratio > best_ratio:
                    best_ratio, params = ratio, cand
        evaluate(params)

    mode = "random" if budget <= n_startup else "tpe"
    best = max(range(len(trials)), key=lambda k: (trials[k]["score"], -k))
    return (
        {"max_depth": int(trials[best]["max_depth"]), "min_leaf": int(trials[best]["min_leaf"])},
        trials,
        mode,
    )


def train_tree(
    data: LabeledDataset,
    target: str = "agent",
    folds: int = 10,
    opt_budget: int = 30,
    seed: int = 0,
    params: Optional[Mapping[str, int]] = None,
) -> TreeModel:
    """
    Tune and fit a Gini decision tree on the training split.

    Args:
        data: Labelled dataset with train/test split
        target: "agent", "swarm11" or "swarm2"
        folds: Stratified cross-validation folds
        opt_budget: Search trials; ignored when params is given
        seed: Seeds folds and search
        params: Fixed {"max_depth", "min_leaf"} to skip the search

    Returns:
        TreeModel with mean CV accuracy and held-out test accuracy

    Raises:
        DegenerateModelError: If the training split has a single class
        InsufficientDataError: If some class has fewer rows than folds
    """
    X = data.features("train")
    y = data.labels(target, "train")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise DegenerateModelError(f"training data for {target} has a single class")
    if counts.min() < folds:
        raise InsufficientDataError(
            f"class {classes[np.argmin(counts)]} has {counts.min()} rows, fewer than {folds} folds"
        )

    def objective(max_depth: int, min_leaf: int) -> float:
        return cross_val_accuracy(X, y, max_depth, min_leaf, folds, seed)

    if params is not None:
        best = {"max_depth": int(params["max_depth"]), "min_leaf": int(params["min_leaf"])}
        score = objective(best["max_depth"], best["min_leaf"])
        trials, mode = [{**best, "score": score}], "fixed"
    else:
        best, trials, mode = tpe_search(objective, opt_budget, seed)
        if mode == "random":
            logger.warning(f"budget {opt_budget} too small for model-based search; random search used")
        score = max(t["score"] for t in trials)

    clf = fit_tree(X, y, best["max_depth"], best["min_leaf"])
    X_test = data.features("test")
    test_acc = (
        float(accuracy_score(data.labels(target, "test"), clf.predict(X_test))) if len(X_test) else math.nan
    )
    logger.info(
        f"tree[{target}] depth={best['max_depth']} leaf={best['min_leaf']} cv={score:.3f} test={test_acc:.3f}"
    )
    return TreeModel(
        estimator=clf,
        marker_set=list(data.marker_set),
        target=target,
        max_depth=best["max_depth"],
        min_leaf=best["min_leaf"],
        seed=seed,
        search=mode,
        cv_accuracy=score,
        test_accuracy=test_acc,
        trials=trials,
    )


# -------------------------------------------------
# Window Sweeps
# -------------------------------------------------

@dataclass
class SweepResult:
    """
    One row per (size, overlap) cell: validation/test accuracy and marker
    computation cost (mean_window_seconds = mu_t, total_seconds = T).
    """
    cells: pd.DataFrame
    target: str
    partial: bool = False
    missing: List[str] = field(default_factory=list)

    def accuracy_table(self) -> pd.DataFrame:
        rows = {}
        for overlap, grp in self.cells.groupby("overlap", sort=False):
            grp = grp.set_index("size")
            rows[f"validation {overlap:g}"] = grp["validation_accuracy"]
            rows[f"test {overlap:g}"] = grp["test_accuracy"]
        return pd.DataFrame(rows).T

    def compute_table(self) -> pd.DataFrame:
        rows = {}
        for overlap, grp in self.cells.groupby("overlap", sort=False):
            grp = grp.set_index("size")
            rows[f"mu_t {overlap:g}"] = grp["mean_window_seconds"]
            rows[f"T {overlap:g}"] = grp["total_seconds"]
        return pd.DataFrame(rows).T

    def best_cell(self, metric: str = "validation_accuracy") -> Tuple[int, float]:
        row = self.cells.loc[self.cells[metric].idxmax()]
        return int(row["size"]), float(row["overlap"])

    def pareto_front(self, metric: str = "validation_accuracy") -> pd.DataFrame:
        """Cells not dominated on (higher accuracy, lower T/mu_t)."""
        done = self.cells.dropna(subset=[metric, "proportional_time"])
        keep = []
        for idx, row in done.iterrows():
            dominated = (
                (done[metric] >= row[metric]) & (done["proportional_time"] <= row["proportional_time"])
                & ((done[metric] > row[metric]) | (done["proportional_time"] < row["proportional_time"]))
            ).any()
            if not dominated:
                keep.append(idx)
        return done.loc[keep].sort_values("proportional_time")

    def best_tradeoff(self, metric: str = "validation_accuracy") -> Tuple[int, float]:
        """Front cell closest to the ideal corner after min-max scaling both axes."""
        front = self.pareto_front(metric)
        if front.empty:
            raise InsufficientDataError("sweep has no completed cells")
        acc, cost = front[metric], front["proportional_time"]
        acc_n = (acc - acc.min()) / (acc.max() - acc.min()) if acc.max() > acc.min() else acc * 0 + 1
        cost_n = (cost - cost.min()) / (cost.max() - cost.min()) if cost.max() > cost.min() else cost * 0
        dist = np.hypot(1 - acc_n, cost_n)
        row = front.loc[dist.idxmin()]
        return int(row["size"]), float(row["overlap"])


def sweep(
    datasets: Mapping[WindowPlan, LabeledDataset],
    timings: Mapping[WindowPlan, Tuple[float, float]],
    target: str = "agent",
    folds: int = 10,
    opt_budget: int = 30,
    seed: int = 0,
    plans: Optional[Sequence[WindowPlan]] = None,
) -> SweepResult:
    """
    Train one tree per window plan and tabulate accuracy against compute time.

    Args:
        datasets: Labelled dataset per plan
        timings: (mu_t, T) per plan
        plans: Grid to report (default: the 15 canonical plans)

    Missing cells are reported as NaN and flag the result partial.
    """
    plans = canonical_plans() if plans is None else list(plans)
    rows, missing = [], []
    for plan in plans:
        mu_t, total = timings.get(plan, (math.nan, math.nan))
        row = {
            "size": plan.size,
            "overlap": plan.overlap,
            "validation_accuracy": math.nan,
            "test_accuracy": math.nan,
            "mean_window_seconds": mu_t,
            "total_seconds": total,
            "proportional_time": total / mu_t if mu_t and not math.isnan(mu_t) else math.nan,
        }
        if plan not in datasets:
            missing.append(plan.label)
        else:
            model = train_tree(datasets[plan], target, folds, opt_budget, seed)
            row.update(validation_accuracy=model.cv_accuracy, test_accuracy=model.test_accuracy)
            logger.info(f"sweep cell {plan.label} done")
        rows.append(row)
    if missing:
        logger.warning(f"sweep is partial, missing {missing}")
    return SweepResult(pd.DataFrame(rows), target, partial=bool(missing), missing=missing)


# -------------------------------------------------
# Ablation
# -------------------------------------------------

@dataclass
class AblationReport:
    """
    Metric per removed marker set against the full-set baseline.

    rows columns: removed, markers, value, pct_change, delta.
    """
    protocol: str
    metric: str
    baseline: float
    rows: pd.DataFrame

    def to_frame(self) -> pd.DataFrame:
        base = pd.DataFrame([{"removed": "none", "markers": "", "value": self.baseline,
                              "pct_change": 0.0, "delta": 0.0}])
        return pd.concat([base, self.rows], ignore_index=True)


def _change(value: float, baseline: float) -> Tuple[float, float]:
    pct = (value - baseline) / baseline * 100 if baseline else math.nan
    return pct, value - baseline


def default_removal_sets(
    baseline_markers: Sequence[str],
    mi_selected: Sequence[str],
    coi: Sequence[str] = COI_SET,
) -> Dict[str, List[str]]:
    """Every singleton, the markers outside the MI selection, and the centre-of-influence group."""
    sets = {f"{{{m}}}": [m] for m in baseline_markers}
    bottom = [m for m in baseline_markers if m not in set(mi_selected)]
    if bottom:
        sets["MI complement"] = bottom
    centre = [m for m in coi if m in baseline_markers]
    if centre:
        sets["COI"] = centre
    return sets


def ablate_retrain(
    data: LabeledDataset,
    baseline: TreeModel,
    removal_sets: Mapping[str, Sequence[str]],
    folds: int = 10,
) -> AblationReport:
    """
    Retrain without each marker set, reusing the baseline hyperparameters.

    Accuracy is cross-validated on the training split, as for the baseline.
    """
    params = {"max_depth": baseline.max_depth, "min_leaf": baseline.min_leaf}
    base = train_tree(data, baseline.target, folds, seed=baseline.seed, params=params).cv_accuracy
    rows = []
    for name, removed in removal_sets.items():
        keep = [m for m in data.marker_set if m not in set(removed)]
        if not keep:
            logger.warning(f"removal set {name} leaves no markers; skipped")
            continue
        model = train_tree(data.with_markers(keep), baseline.target, folds, seed=baseline.seed, params=params)
        pct, delta = _change(model.cv_accuracy, base)
        rows.append({"removed": name, "markers": ",".join(removed), "value": model.cv_accuracy,
                     "pct_change": pct, "delta": delta})
    return AblationReport("E1", "accuracy", base, pd.DataFrame(rows))


def ablate_impute(
    model: TreeModel,
    data: LabeledDataset,
    removal_sets: Mapping[str, Sequence[str]],
) -> AblationReport:
    """
    Replace each marker set with its dataset mean and re-score the fixed model (macro F1, test split).
    """
    split = "test" if len(data.test) else None
    X = data.features(split)
    y = data.labels(model.target, split)
    means = np.nanmean(data.features(), axis=0)
    base = float(f1_score(y, model.predict(X), average="macro"))

    rows = []
    for name, removed in removal_sets.items():
        Xi = X.copy()
        for m in removed:
            j = model.marker_set.index(m)
            Xi[:, j] = means[j]
        value = float(f1_score(y, model.predict(Xi), average="macro"))
        pct, delta = _change(value, base)
        rows.append({"removed": name, "markers": ",".join(removed), "value": value,
                     "pct_change": pct, "delta": delta})
    return AblationReport("E2", "f1_macro", base, pd.DataFrame(rows))


# -------------------------------------------------
# Mutual Information Selection
# -------------------------------------------------

@dataclass
class MISelection:
    """
    ranking: greedy order of every marker; gains: marginal MI (nats) in that
    order; selected: shortest prefix reaching the requested coverage.
    """
    ranking: List[str]
    gains: List[float]
    selected: List[str]
    coverage: float

    def to_frame(self) -> pd.DataFrame:
        gains = np.asarray(self.gains)
        total = gains.sum()
        return pd.DataFrame({
            "marker": self.ranking,
            "gain": gains,
            "cumulative_share": np.cumsum(gains) / total if total > 0 else np.zeros(len(gains)),
            "selected": [m in self.selected for m in self.ranking],
        })


def discretize(X: np.ndarray, n_bins: int = 16) -> np.ndarray:
    """
    Equal-frequency codes per column; NaN gets its own code n_bins.

    Columns with at most n_bins distinct values are coded by value rank.
    """
    X = np.asarray(X, dtype=float)
    codes = np.full(X.shape, n_bins, dtype=np.int64)
    for j in range(X.shape[1]):
        ok = ~np.isnan(X[:, j])
        if ok.sum() < 2:
            codes[ok, j] = 0
            continue
        distinct, rank = np.unique(X[ok, j], return_inverse=True)
        if len(distinct) <= n_bins:
            codes[ok, j] = rank.reshape(-1)
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            enc = KBinsDiscretizer(n_bins=n_bins, encode="ordinal", strategy="quantile")
            codes[ok, j] = enc.fit_transform(X[ok, j:j + 1])[:, 0].astype(np.int64)
    return codes


def _joint_entropy(*cols: np.ndarray) -> float:
    _, counts = np.unique(np.stack(cols, axis=1), axis=0, return_counts=True)
    return float(entropy(counts))


def conditional_mi(x: np.ndarray, y: np.ndarray, s: np.ndarray) -> float:
    """I(X; Y | S) in nats from discrete codes."""
    value = _joint_entropy(x, s) + _joint_entropy(y, s) - _joint_entropy(x, y, s) - _joint_entropy(s)
    return max(0.0, value)


def mi_select(
    data: LabeledDataset,
    coverage: float = 0.95,
    target: str = "agent",
    n_bins: int = 16,
    split: Optional[str] = "train",
) -> MISelection:
    """
    Greedy conditional-MI maximisation (CMIM) against the label.

    The gain of a candidate is min over already-chosen markers s of
    I(candidate; label | s). Zero-gain markers are ranked last and never selected.
    """
    if len(data.marker_set) < 2:
        raise InsufficientDataError("MI selection needs at least two markers")
    rows = split if split and len(data.frame[data.frame["split"] == split]) else None
    codes = discretize(data.features(rows), n_bins)
    _, y = np.unique(data.labels(target, rows), return_inverse=True)

    remaining = list(range(codes.shape[1]))
    relevance = [float(mutual_info_score(y, codes[:, j])) for j in remaining]
    worst = list(relevance)
    order, gains = [], []
    while remaining:
        pick = max(remaining, key=lambda j: (worst[j], -j))
        order.append(pick)
        gains.append(worst[pick] if worst[pick] > 1e-12 else 0.0)
        remaining.remove(pick)
        for j in remaining:
            cmi = conditional_mi(codes[:, j], y, codes[:, pick])
            worst[j] = cmi if len(order) == 1 else min(worst[j], cmi)

    total = sum(gains)
    selected = []
    running = 0.0
    for j, g in zip(order, gains):
        if g <= 0 or (total > 0 and running >= coverage * total - 1e-12):
            break
        selected.append(data.marker_set[j])
        running += g
    logger.info(f"MI selection kept {len(selected)}/{len(order)} markers for {coverage:.0%} coverage")
    return MISelection(
        ranking=[data.marker_set[j] for j in order],
        gains=gains,
        selected=selected,
        coverage=coverage,
    )


def marker_correlation(data: LabeledDataset, threshold: float = 0.9) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Pearson correlation between markers and the pairs with |r| >= threshold.
    """
    corr = data.frame[data.marker_set].astype(float).corr(method="pearson")
    pairs = []
    for a_idx, a in enumerate(data.marker_set):
        for b in data.marker_set[a_idx + 1:]:
            r = corr.loc[a, b]
            if not pd.isna(r) and abs(r) >= threshold:
                pairs.append({"marker_a": a, "marker_b": b, "r": float(r)})
    return corr, pd.DataFrame(pairs, columns=["marker_a", "marker_b", "r"])
