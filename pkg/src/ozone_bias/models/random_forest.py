"""Random forest regression on per-pixel samples (CART trees with variance reduction)."""
import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ozone_bias.dataset import Dataset
from ozone_bias.errors import DimensionMismatch, EmptyInput, FormatError, IoError
from ozone_bias.grid import MaskedField
from ozone_bias.io import PathLike, format_errors

logger = logging.getLogger(__name__)

FOREST_SUFFIX = ".rfckpt"
FOREST_FORMAT = "ozone-bias-forest"
# decreases closer than this are considered equal, and a split has to gain more than this
TIE_TOLERANCE = 1e-12
LEAF = -1


@dataclasses.dataclass(frozen=True)
class ForestConfig:
    """Hyperparameters of the random forest.

    Args:
        n_trees: Number of trees.
        max_depth: Maximal depth of a tree (the root has depth 0). None means unlimited.
        min_samples_leaf: Minimal number of samples in every leaf.
        features_per_split: Number of randomly drawn candidate features per node. None means
            ceil(num_features / 3).
        bootstrap: Train every tree on a bootstrap resample of size n (with replacement)
            instead of on all samples.
        seed: Seeds the bootstrap resamples and the feature subsets.
    """

    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_leaf: int = 3
    features_per_split: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees has to be positive, but got {self.n_trees}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError(f"max_depth must not be negative, but got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf has to be positive, but got {self.min_samples_leaf}")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError(
                f"features_per_split has to be positive, but got {self.features_per_split}"
            )

    def num_split_features(self, num_features: int) -> int:
        if self.features_per_split is None:
            return max(1, math.ceil(num_features / 3))
        return min(self.features_per_split, num_features)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ForestConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown ForestConfig keys: {unknown}")
        return cls(**data)


class Split(NamedTuple):
    feature: int
    threshold: float
    # weighted variance reduction: Var(y) - (n_left * Var(y_left) + n_right * Var(y_right)) / n
    decrease: float


def _split_candidates(
    x: np.ndarray, y_centered: np.ndarray, min_samples_leaf: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Thresholds and decreases of all admissible midpoints of one feature, ascending."""
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    left_sums = np.cumsum(y_centered[order])[:-1]
    n_left = np.arange(1, n)
    # a split after position i keeps xs[:i + 1] on the left
    admissible = (xs[:-1] < xs[1:]) & (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
    idx = np.flatnonzero(admissible)
    if len(idx) == 0:
        return np.zeros(0), np.zeros(0)
    lo, hi = xs[idx], xs[idx + 1]
    thresholds = lo + (hi - lo) / 2.0
    # adjacent floats: keep the threshold strictly below the right value
    thresholds = np.where(thresholds < hi, thresholds, lo)
    s = left_sums[idx]
    nl = n_left[idx].astype(np.float64)
    nr = n - nl
    decreases = (s * s / nl + s * s / nr) / n
    return thresholds, decreases


def best_split(
    x: np.ndarray,
    y: np.ndarray,
    feature_subset: Optional[Sequence[int]] = None,
    min_samples_leaf: int = 1,
) -> Optional[Split]:
    """Finds the split (x[:, feature] <= threshold goes left) with the largest weighted
    variance reduction among all midpoints between consecutive distinct values of the given
    features.

    Ties (up to TIE_TOLERANCE) go to the lower feature index, then to the lower threshold.
    Returns None if no admissible split reduces the variance.

    Args:
        x: The features [n x p].
        y: The targets [n].
        feature_subset: The candidate features. All features if None.
        min_samples_leaf: Minimal number of samples on each side of the split.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch(f"expected features [n x p] for {len(y)} targets, but got {x.shape}")
    features = range(x.shape[1]) if feature_subset is None else sorted(feature_subset)
    if len(y) < 2 * min_samples_leaf:
        return None
    y_centered = y - y.mean()
    candidates = []
    for feature in features:
        thresholds, decreases = _split_candidates(x[:, feature], y_centered, min_samples_leaf)
        if len(decreases) > 0:
            candidates.append((feature, thresholds, decreases))
    if not candidates:
        return None
    best = max(float(decreases.max()) for _, _, decreases in candidates)
    if best <= TIE_TOLERANCE:
        return None
    for feature, thresholds, decreases in candidates:
        close = np.flatnonzero(decreases >= best - TIE_TOLERANCE)
        if len(close) > 0:
            i = int(close[0])
            return Split(feature=feature, threshold=float(thresholds[i]), decrease=float(decreases[i]))
    return None


@dataclasses.dataclass(frozen=True, eq=False)
class Tree:
    """A regression tree as parallel node arrays in pre-order. Leaves have feature == LEAF."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    decrease: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(self.num_nodes, dtype=np.int64)
        for node in range(self.num_nodes):
            if self.feature[node] != LEAF:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Returns the leaf index of every row of x."""
        nodes = np.zeros(len(x), dtype=np.int64)
        active = self.feature[nodes] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = nodes[rows]
            go_left = x[rows, self.feature[current]] <= self.threshold[current]
            nodes[rows] = np.where(go_left, self.left[current], self.right[current])
            active[rows] = self.feature[nodes[rows]] != LEAF
        return nodes

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]


def fit_tree(x: np.ndarray, y: np.ndarray, config: ForestConfig, rng: np.random.Generator) -> Tree:
    """Grows a single CART tree depth-first. Nodes are numbered in pre-order."""
    n, p = x.shape
    k = config.num_split_features(p)
    nodes: Dict[str, List[Any]] = {
        key: [] for key in ("feature", "threshold", "left", "right", "value", "count", "decrease")
    }
    # (sample indices, depth, parent node, is left child)
    stack: List[Tuple[np.ndarray, int, int, bool]] = [(np.arange(n), 0, -1, True)]
    while stack:
        indices, depth, parent, is_left = stack.pop()
        node = len(nodes["feature"])
        if parent >= 0:
            nodes["left" if is_left else "right"][parent] = node
        y_node = y[indices]
        nodes["value"].append(float(y_node.mean()))
        nodes["count"].append(len(indices))
        split = None
        if config.max_depth is None or depth < config.max_depth:
            subset = np.sort(rng.choice(p, size=k, replace=False))
            split = best_split(x[indices], y_node, subset, config.min_samples_leaf)
        if split is None:
            nodes["feature"].append(LEAF)
            nodes["threshold"].append(math.nan)
            nodes["decrease"].append(0.0)
            nodes["left"].append(LEAF)
            nodes["right"].append(LEAF)
            continue
        nodes["feature"].append(split.feature)
        nodes["threshold"].append(split.threshold)
        nodes["decrease"].append(split.decrease)
        nodes["left"].append(LEAF)
        nodes["right"].append(LEAF)
        go_left = x[indices, split.feature] <= split.threshold
        # the left child is popped (and numbered) first
        stack.append((indices[~go_left], depth + 1, node, False))
        stack.append((indices[go_left], depth + 1, node, True))
    return Tree(
        feature=np.array(nodes["feature"], dtype=np.int64),
        threshold=np.array(nodes["threshold"], dtype=np.float64),
        left=np.array(nodes["left"], dtype=np.int64),
        right=np.array(nodes["right"], dtype=np.int64),
        value=np.array(nodes["value"], dtype=np.float64),
        count=np.array(nodes["count"], dtype=np.int64),
        decrease=np.array(nodes["decrease"], dtype=np.float64),
    )


@dataclasses.dataclass(frozen=True, eq=False)
class Forest:
    trees: Tuple[Tree, ...]
    config: ForestConfig
    num_features: int
    channels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(self.channels))
            if len(self.channels) != self.num_features:
                raise DimensionMismatch(
                    f"got {len(self.channels)} channel names for {self.num_features} features"
                )

    def save(self, path: PathLike) -> Path:
        return save_forest(self, path)

    @classmethod
    def load(cls, path: PathLike) -> "Forest":
        return load_forest(path)


def _fit_tree_with_seed(x: np.ndarray, y: np.ndarray, config: ForestConfig, tree_idx: int) -> Tree:
    # the stream depends only on (seed, tree index), not on the scheduling of the trees
    rng = np.random.default_rng([config.seed, tree_idx])
    if config.bootstrap:
        sample = rng.integers(0, len(y), size=len(y))
        x, y = x[sample], y[sample]
    tree = fit_tree(x, y, config, rng)
    logger.debug(f"tree {tree_idx}: {tree.num_nodes} nodes, depth {tree.depth}")
    return tree


def fit_forest(
    x: np.ndarray,
    y: np.ndarray,
    config: ForestConfig = ForestConfig(),
    channels: Optional[Sequence[str]] = None,
    threads: int = 1,
) -> Forest:
    """Fits a random forest on per-pixel samples.

    Args:
        x: The features [n x p].
        y: The targets [n].
        config: The hyperparameters (including the seed).
        channels: Optional names of the p features.
        threads: Number of trees fitted in parallel. Does not change the result.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise EmptyInput("cannot fit a forest without any sample")
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch(f"expected features [n x p] for {len(y)} targets, but got {x.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("features and targets have to be finite")
    with ThreadPoolExecutor(max_workers=threads) as executor:
        trees = list(
            executor.map(lambda idx: _fit_tree_with_seed(x, y, config, idx), range(config.n_trees))
        )
    logger.info(
        f"fitted {config.n_trees} trees on {len(y)} samples with {x.shape[1]} features "
        f"(mean number of nodes: {np.mean([tree.num_nodes for tree in trees]):.1f})"
    )
    return Forest(trees=tuple(trees), config=config, num_features=x.shape[1], channels=channels)


def predict(forest: Forest, features: np.ndarray) -> np.ndarray:
    """Mean of the tree predictions for a single feature vector [p] or for rows [n x p]."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    if single:
        features = features[None, :]
    if features.ndim != 2 or features.shape[1] != forest.num_features:
        raise DimensionMismatch(
            f"expected {forest.num_features} features per sample, but got shape {features.shape}"
        )
    # sorted per sample, so the float sum does not depend on the order of the trees
    per_tree = np.sort(np.stack([tree.predict(features) for tree in forest.trees]), axis=0)
    prediction = per_tree.sum(axis=0) / len(forest.trees)
    return prediction[0] if single else prediction


def predict_dataset(forest: Forest, dataset: Dataset) -> List[MaskedField]:
    """Predicts the full bias field (every cell) of every day of dataset."""
    fields = []
    for day in dataset:
        data = day.inputs.data
        rows = data.reshape(data.shape[0], -1).T
        values = predict(forest, rows).reshape(data.shape[1:])
        fields.append(MaskedField.full(day.inputs.spec, values, date=day.date))
    return fields


def feature_importance(forest: Forest) -> np.ndarray:
    """Impurity-based importance: per tree, the sum of n_node / n_root * decrease over the
    nodes splitting on a feature, averaged over the trees and normalized to sum 1 (uniform if
    no tree splits at all)."""
    scores = np.zeros(forest.num_features, dtype=np.float64)
    for tree in forest.trees:
        internal = tree.feature != LEAF
        weighted = tree.count[internal] / tree.count[0] * tree.decrease[internal]
        scores += np.bincount(tree.feature[internal], weights=weighted, minlength=forest.num_features)
    scores /= len(forest.trees)
    total = scores.sum()
    if total <= 0.0:
        return np.full(forest.num_features, 1.0 / forest.num_features)
    return scores / total


def rank_features(forest: Forest, channel_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Returns a table with the columns rank (starting at 1), channel and importance, sorted
    by decreasing importance (ties keep the channel order)."""
    names = channel_names if channel_names is not None else forest.channels
    if names is None:
        names = [f"feature_{idx}" for idx in range(forest.num_features)]
    if len(names) != forest.num_features:
        raise DimensionMismatch(f"got {len(names)} channel names for {forest.num_features} features")
    frame = pd.DataFrame({"channel": list(names), "importance": feature_importance(forest)})
    frame = frame.sort_values("importance", ascending=False, kind="mergesort").reset_index(drop=True)
    frame.insert(0, "rank", np.arange(1, len(frame) + 1))
    return frame


def select_top_channels(dataset: Dataset, names: Sequence[str], k: Optional[int] = None) -> Dataset:
    """Down-selects the input stacks to the first k channels of names (all if k is None),
    e.g. the channel column of rank_features."""
    selected = list(names)[:k] if k is not None else list(names)
    logger.info(f"selecting {len(selected)} of {len(dataset.channels)} channels: {selected}")
    return dataset.select_channels(selected)


def save_forest(forest: Forest, path: PathLike) -> Path:
    """Writes the forest as text: a JSON header line, then per tree a line "tree <num_nodes>"
    followed by one line per node in pre-order, either "split <feature> <threshold> <count>
    <decrease>" or "leaf <value> <count>". Floats are written with repr."""
    path = Path(path)
    header = {
        "format": FOREST_FORMAT,
        "config": forest.config.to_dict(),
        "num_features": forest.num_features,
        "channels": list(forest.channels) if forest.channels is not None else None,
        "num_trees": len(forest.trees),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for tree in forest.trees:
        lines.append(f"tree {tree.num_nodes}")
        for node in range(tree.num_nodes):
            if tree.feature[node] == LEAF:
                lines.append(f"leaf {float(tree.value[node])!r} {int(tree.count[node])}")
            else:
                lines.append(
                    f"split {int(tree.feature[node])} {float(tree.threshold[node])!r} "
                    f"{int(tree.count[node])} {float(tree.decrease[node])!r}"
                )
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise IoError(f"could not write {path}: {e}") from e
    logger.info(f"wrote forest with {len(forest.trees)} trees to {path}")
    return path


def _parse_tree(lines: List[str], path: PathLike) -> Tree:
    n = len(lines)
    feature = np.full(n, LEAF, dtype=np.int64)
    threshold = np.full(n, math.nan)
    left = np.full(n, LEAF, dtype=np.int64)
    right = np.full(n, LEAF, dtype=np.int64)
    value = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    decrease = np.zeros(n)
    # split nodes whose right child is still missing
    open_splits: List[int] = []
    for node, line in enumerate(lines):
        if open_splits:
            parent = open_splits[-1]
            if left[parent] == LEAF:
                left[parent] = node
            else:
                right[parent] = node
                open_splits.pop()
        parts = line.split()
        try:
            if parts[0] == "leaf" and len(parts) == 3:
                value[node], count[node] = float(parts[1]), int(parts[2])
            elif parts[0] == "split" and len(parts) == 5:
                feature[node] = int(parts[1])
                threshold[node] = float(parts[2])
                count[node] = int(parts[3])
                decrease[node] = float(parts[4])
                open_splits.append(node)
            else:
                raise ValueError(line)
        except (ValueError, IndexError) as e:
            raise FormatError(f"{path}: invalid node line '{line}'") from e
    if open_splits:
        raise FormatError(f"{path}: a tree ends before all of its nodes are complete")
    # values of split nodes are not serialized, recompute them from the leaves
    for node in reversed(range(n)):
        if feature[node] != LEAF:
            l, r = left[node], right[node]
            value[node] = (value[l] * count[l] + value[r] * count[r]) / count[node]
    return Tree(feature, threshold, left, right, value, count, decrease)


def load_forest(path: PathLike) -> Forest:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise IoError(f"could not read {path}: {e}") from e
    if not lines:
        raise FormatError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} does not start with a JSON header line") from e
    with format_errors(path):
        if header.get("format") != FOREST_FORMAT:
            raise FormatError(f"{path} is not a forest checkpoint (format: {header.get('format')})")
        num_trees = int(header["num_trees"])
        config = ForestConfig.from_dict(header["config"])
        num_features = int(header["num_features"])
        channels = header["channels"]
    trees = []
    pos = 1
    for _ in range(num_trees):
        if pos >= len(lines) or not lines[pos].startswith("tree "):
            raise FormatError(f"{path}: expected a tree line at line {pos + 1}")
        with format_errors(path):
            num_nodes = int(lines[pos].split()[1])
        if num_nodes < 1 or pos + 1 + num_nodes > len(lines):
            raise FormatError(f"{path}: tree at line {pos + 1} is empty or truncated")
        trees.append(_parse_tree(lines[pos + 1 : pos + 1 + num_nodes], path))
        pos += 1 + num_nodes
    if pos != len(lines):
        raise FormatError(f"{path} has {len(lines) - pos} trailing lines")
    return Forest(
        trees=tuple(trees),
        config=config,
        num_features=num_features,
        channels=channels,
    )
