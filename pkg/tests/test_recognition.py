"""
Unit tests for recognition.py - Decision trees, sweeps, ablation and MI selection.
"""

import json

import numpy as np
import pandas as pd
import pytest
from sklearn.tree import DecisionTreeClassifier

from errors import DegenerateModelError, InsufficientDataError
from recognition import (
    TREE_UNDEFINED,
    GiniTree,
    SweepResult,
    ablate_impute,
    ablate_retrain,
    conditional_mi,
    default_removal_sets,
    discretize,
    marker_correlation,
    mi_select,
    sweep,
    tpe_search,
    train_tree,
)
from sim_core import ProfileLabel, ScenarioId
from windowing import LabeledDataset, WindowPlan, build_labeled_dataset

FIXED = {"max_depth": 3, "min_leaf": 1}


def _coded_dataset(columns, labels) -> LabeledDataset:
    """All-train dataset from explicit marker columns."""
    frame = pd.DataFrame(columns)
    markers = list(frame.columns)
    frame.insert(0, "agent_label", [str(v) for v in labels])
    frame.insert(1, "split", "train")
    return LabeledDataset(frame, markers)


class TestGiniTree:
    """Test the CART estimator."""

    def test_tied_columns_split_on_lowest_index(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=200)
        X = np.column_stack([rng.normal(size=200), np.exp(x), x])
        tree = GiniTree(max_depth=3).fit(X, (x > 0).astype(int))
        assert tree.tree_.feature.tolist() == [1, TREE_UNDEFINED, TREE_UNDEFINED]

    def test_midpoint_threshold(self):
        tree = GiniTree(max_depth=1).fit(np.array([[1.0], [2.0], [4.0], [6.0]]), ["a", "a", "b", "b"])
        assert tree.tree_.threshold[0] == pytest.approx(3.0)
        assert tree.predict(np.array([[2.9], [3.1]])).tolist() == ["a", "b"]

    def test_missing_values_follow_their_class(self):
        X = np.array([[-0.5], [-0.2], [-0.9], [1.5], [np.nan], [np.nan]])
        tree = GiniTree(max_depth=1).fit(X, [0, 0, 0, 1, 1, 1])
        assert not tree.tree_.missing_go_to_left[0]
        assert tree.predict(np.array([[np.nan], [-1.0], [2.0]])).tolist() == [1, 0, 1]

    def test_min_leaf_respected(self):
        X = np.random.default_rng(1).normal(size=(60, 3))
        y = np.random.default_rng(2).integers(0, 3, 60)
        tree = GiniTree(max_depth=10, min_samples_leaf=7).fit(X, y)
        leaves = tree.tree_.children_left == -1
        assert tree.tree_.n_node_samples[leaves].min() >= 7

    def test_probabilities_sum_to_one(self):
        X = np.random.default_rng(3).normal(size=(80, 2))
        y = np.random.default_rng(4).integers(0, 2, 80)
        proba = GiniTree(max_depth=2).fit(X, y).predict_proba(X)
        assert np.allclose(proba.sum(axis=1), 1.0)

    def test_blobs_fit_like_reference(self):
        rng = np.random.default_rng(5)
        X = np.vstack([rng.normal(0, 0.3, (30, 2)), rng.normal(5, 0.3, (30, 2)), rng.normal([0, 8], 0.3, (30, 2))])
        y = np.repeat([0, 1, 2], 30)
        ours = GiniTree(max_depth=2).fit(X, y).predict(X)
        reference = DecisionTreeClassifier(max_depth=2, random_state=0).fit(X, y).predict(X)
        assert np.array_equal(ours, y)
        assert np.array_equal(ours, reference)

    def test_model_independent_of_seed(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=120)
        data = _coded_dataset({"M1": rng.normal(size=120), "M2": x, "M3": x.copy()}, (x > 0).astype(int))
        nodes = [train_tree(data, folds=3, seed=s, params=FIXED).to_dict()["nodes"] for s in range(4)]
        assert all(n == nodes[0] for n in nodes)
        assert nodes[0][0]["marker"] == "M2"


class TestTrainTree:
    """Test tree tuning and fitting."""

    def test_separable_classes(self, separable_dataset):
        model = train_tree(separable_dataset, "agent", folds=3, opt_budget=3, seed=0)
        assert model.search == "random"
        assert model.cv_accuracy == pytest.approx(1.0)
        assert model.test_accuracy == pytest.approx(1.0)
        assert "M1" in model.used_markers()

    def test_fixed_params(self, separable_dataset):
        model = train_tree(separable_dataset, folds=3, params=FIXED)
        assert (model.search, model.max_depth, model.min_leaf) == ("fixed", 3, 1)
        assert len(model.trials) == 1

    def test_same_seed_same_model(self, separable_dataset):
        a = train_tree(separable_dataset, folds=3, opt_budget=4, seed=2)
        b = train_tree(separable_dataset, folds=3, opt_budget=4, seed=2)
        assert a.to_json() == b.to_json()

    def test_model_json(self, separable_dataset):
        payload = json.loads(train_tree(separable_dataset, folds=3, params=FIXED).to_json())
        assert payload["criterion"] == "gini"
        assert payload["classes"] == ["A1", "A7"]
        leaves = [n for n in payload["nodes"] if "distribution" in n]
        assert leaves and all(sum(n["distribution"]) == pytest.approx(1.0) for n in leaves)

    def test_single_class_is_degenerate(self, factory):
        matrices = [m for m in factory.separable_matrices() if m.scenario_id == ScenarioId.S5]
        data = build_labeled_dataset(matrices, shuffle_seed=0)
        with pytest.raises(DegenerateModelError):
            train_tree(data, "agent", folds=3, params=FIXED)

    def test_fewer_rows_than_folds(self, separable_dataset):
        with pytest.raises(InsufficientDataError):
            train_tree(separable_dataset, folds=500, params=FIXED)

    def test_permuted_labels_fall_to_chance(self, factory):
        data = build_labeled_dataset(factory.separable_matrices(n_runs=6, n_windows=10), shuffle_seed=1)
        assert train_tree(data, folds=3, params=FIXED).test_accuracy == pytest.approx(1.0)
        frame = data.frame.copy()
        frame["agent_label"] = np.random.default_rng(7).permutation(frame["agent_label"].to_numpy())
        shuffled = LabeledDataset(frame, list(data.marker_set), data.seed)
        model = train_tree(shuffled, folds=3, params=FIXED)
        assert 0.3 < model.test_accuracy < 0.7
        assert model.cv_accuracy < 0.7

    def test_monotone_rescaling_keeps_predictions(self, separable_dataset):
        frame = separable_dataset.frame.copy()
        frame[separable_dataset.marker_set] = np.exp(frame[separable_dataset.marker_set] / 4.0)
        scaled = LabeledDataset(frame, list(separable_dataset.marker_set), separable_dataset.seed)
        a = train_tree(separable_dataset, folds=3, params=FIXED)
        b = train_tree(scaled, folds=3, params=FIXED)
        assert np.array_equal(a.predict(separable_dataset.features("train")), b.predict(scaled.features("train")))


class TestTpeSearch:
    """Test the hyperparameter search."""

    def test_finds_good_region(self):
        def objective(depth, leaf):
            return -((depth - 10) ** 2 + (leaf - 5) ** 2)

        best, trials, mode = tpe_search(objective, budget=40, seed=0)
        assert mode == "tpe"
        assert len(trials) == 40
        assert objective(best["max_depth"], best["min_leaf"]) == max(t["score"] for t in trials)
        assert max(t["score"] for t in trials) >= max(t["score"] for t in trials[:10])

    def test_small_budget_is_random(self):
        _, trials, mode = tpe_search(lambda d, m: 0.0, budget=5, seed=0)
        assert mode == "random" and len(trials) == 5

    def test_stays_in_bounds(self):
        _, trials, _ = tpe_search(lambda d, m: float(d), budget=25, seed=1)
        assert all(2 <= t["max_depth"] <= 30 and 1 <= t["min_leaf"] <= 50 for t in trials)


class TestSweep:
    """Test window sweeps and their trade-off front."""

    def test_partial_sweep(self, separable_dataset):
        p20, p40, p20_half = (WindowPlan(size=20, overlap=0.75), WindowPlan(size=40, overlap=0.75),
                              WindowPlan(size=20, overlap=0.5))
        result = sweep(
            {p20: separable_dataset, p40: separable_dataset},
            {p20: (0.01, 2.0), p40: (0.02, 1.0)},
            folds=3, opt_budget=2, plans=[p20, p40, p20_half],
        )
        assert result.partial and result.missing == ["w20_a0.5"]
        assert result.accuracy_table().shape == (4, 2)
        assert list(result.compute_table().index) == ["mu_t 0.75", "T 0.75", "mu_t 0.5", "T 0.5"]
        assert result.best_tradeoff() == (40, 0.75)

    def test_two_plan_sweep(self, separable_dataset):
        plans = [WindowPlan(size=20, overlap=0.5), WindowPlan(size=40, overlap=0.5)]
        result = sweep(
            {p: separable_dataset for p in plans},
            {plans[0]: (0.01, 3.0), plans[1]: (0.02, 2.0)},
            folds=3, opt_budget=2, plans=plans,
        )
        assert not result.partial
        assert result.cells.shape == (2, 7)
        assert result.cells[["size", "overlap"]].values.tolist() == [[20, 0.5], [40, 0.5]]
        assert result.cells["proportional_time"].tolist() == pytest.approx([300.0, 100.0])
        assert result.cells["validation_accuracy"].tolist() == pytest.approx([1.0, 1.0])

    def test_knee_point(self):
        cells = pd.DataFrame({
            "size": [20, 40, 60, 80],
            "overlap": [0.5] * 4,
            "validation_accuracy": [0.9, 0.8, 0.95, 0.7],
            "proportional_time": [10.0, 5.0, 20.0, 15.0],
        })
        result = SweepResult(cells, "agent")
        assert sorted(result.pareto_front()["size"]) == [20, 40, 60]
        assert result.best_tradeoff() == (20, 0.5)
        assert result.best_cell() == (60, 0.5)

    def test_empty_front(self):
        cells = pd.DataFrame({"size": [20], "overlap": [0.5], "validation_accuracy": [np.nan],
                              "proportional_time": [np.nan]})
        with pytest.raises(InsufficientDataError):
            SweepResult(cells, "agent").best_tradeoff()


class TestAblation:
    """Test marker removal experiments."""

    def test_retrain_without_key_marker(self, separable_dataset):
        baseline = train_tree(separable_dataset, folds=3, params=FIXED)
        report = ablate_retrain(separable_dataset, baseline, {"{M1}": ["M1"], "all": ["M1", "M2", "M3"]}, folds=3)
        frame = report.to_frame()
        assert frame["removed"].tolist() == ["none", "{M1}"]
        assert report.baseline == pytest.approx(1.0)
        assert frame.loc[1, "delta"] < 0

    def test_impute_noise_marker_changes_nothing(self, separable_dataset):
        model = train_tree(separable_dataset, folds=3, params=FIXED)
        report = ablate_impute(model, separable_dataset, {"{M1}": ["M1"], "{M2}": ["M2"]})
        rows = report.rows.set_index("removed")
        assert report.metric == "f1_macro"
        assert rows.loc["{M1}", "delta"] < 0
        assert rows.loc["{M2}", "delta"] == 0.0

    def test_impute_nothing_keeps_baseline(self, separable_dataset):
        model = train_tree(separable_dataset, folds=3, params=FIXED)
        report = ablate_impute(model, separable_dataset, {"none": []})
        row = report.rows.iloc[0]
        assert row["value"] == report.baseline
        assert row["delta"] == 0.0 and row["pct_change"] == 0.0

    def test_default_removal_sets(self):
        sets = default_removal_sets(["M1", "M7", "M21"], mi_selected=["M1"])
        assert sets["{M7}"] == ["M7"]
        assert sets["MI complement"] == ["M7", "M21"]
        assert sets["COI"] == ["M7", "M21"]


class TestMutualInformation:
    """Test discretisation and greedy MI selection."""

    def test_discretize_binary_and_missing(self):
        X = np.array([[0.0, 1.0], [1.0, np.nan], [0.0, 2.0], [1.0, 3.0]])
        codes = discretize(X, n_bins=4)
        assert codes[:, 0].tolist() == [0, 1, 0, 1]
        assert codes[1, 1] == 4

    def test_discretize_equal_frequency(self):
        x = np.random.default_rng(0).normal(size=(1000, 1))
        _, counts = np.unique(discretize(x, n_bins=4), return_counts=True)
        assert np.all(np.abs(counts - 250) <= 2)

    def test_conditional_mi(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 2, 4000)
        s = rng.integers(0, 2, 4000)
        assert conditional_mi(x, x, s) == pytest.approx(np.log(2), abs=0.01)
        assert conditional_mi(x, x, x) == pytest.approx(0.0, abs=1e-12)

    def test_noise_marker_ranked_last(self):
        rng = np.random.default_rng(2)
        b1, b2 = rng.integers(0, 2, 800), rng.integers(0, 2, 800)
        data = _coded_dataset({"M1": b1.astype(float), "M2": b2.astype(float), "M3": rng.normal(size=800)}, 2 * b1 + b2)
        selection = mi_select(data, coverage=0.9)
        assert selection.ranking[-1] == "M3"
        assert sorted(selection.selected) == ["M1", "M2"]

    def test_duplicate_marker_has_no_gain(self):
        rng = np.random.default_rng(3)
        b1, b2 = rng.integers(0, 2, 800), rng.integers(0, 2, 800)
        data = _coded_dataset({"M1": b1.astype(float), "M2": b2.astype(float), "M3": b1.astype(float)}, 2 * b1 + b2)
        selection = mi_select(data, coverage=1.0)
        gains = dict(zip(selection.ranking, selection.gains))
        assert gains["M3"] == 0.0
        assert "M3" not in selection.selected
        assert selection.to_frame()["cumulative_share"].iloc[-1] == pytest.approx(1.0)

    def test_needs_two_markers(self):
        with pytest.raises(InsufficientDataError):
            mi_select(_coded_dataset({"M1": [0.0, 1.0]}, [0, 1]))

    def test_correlated_pairs(self):
        x = np.random.default_rng(4).normal(size=50)
        data = _coded_dataset({"M1": x, "M2": np.random.default_rng(5).normal(size=50), "M3": 2 * x}, [0] * 50)
        corr, pairs = marker_correlation(data)
        assert corr.shape == (3, 3)
        assert pairs[["marker_a", "marker_b"]].values.tolist() == [["M1", "M3"]]


def test_labels_kept_as_profile_values(separable_dataset):
    assert set(separable_dataset.labels("agent", "test")) <= {ProfileLabel.A1.value, ProfileLabel.A7.value}
