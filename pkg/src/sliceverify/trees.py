"""From-scratch CART trees and softmax gradient boosting for slice classification.

Classification trees split on Gini impurity; the boosted ensemble fits one
regression tree per class and round to softmax residuals, with variance-reduction
splits. All tie-breaks are deterministic (lowest feature index, then lowest
threshold, then lowest class index) so fits are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

N_CLASSES = 3

MODEL_FORMAT = "sliceverify-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 6
    min_samples_split: int = 20
    min_gain: float = 1e-7

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "min_samples_split": self.min_samples_split,
            "min_gain": self.min_gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeParams":
        return cls(**d)


@dataclass(frozen=True)
class EnsembleParams:
    rounds: int = 50
    learning_rate: float = 0.3

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "learning_rate": self.learning_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleParams":
        return cls(**d)


@dataclass(frozen=True)
class TreeNode:
    """Classification tree node: internal if feature is not None, else leaf.

    Internal nodes route x[feature] <= threshold to the left child.
    """

    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    class_counts: tuple[int, ...] | None = None
    probs: tuple[float, ...] | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class RegNode:
    """Regression tree node used by the boosted ensemble; leaves carry a real value."""

    feature: int | None = None
    threshold: float | None = None
    left: "RegNode | None" = None
    right: "RegNode | None" = None
    value: float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class Ensemble:
    """Boosted multiclass model: per-class regression trees on softmax residuals."""

    base_score: tuple[float, ...]
    params: EnsembleParams
    tree_params: TreeParams
    trees: tuple[tuple[RegNode, ...], ...] = field(default_factory=tuple)  # [class][round]


def gini(class_counts) -> float:
    """Gini impurity 1 - sum((c/n)^2); an empty node has impurity 0."""
    counts = np.asarray(class_counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.dot(p, p))


def _split_candidates(xs: np.ndarray) -> np.ndarray:
    """Indices i (into the sorted column) where xs[i] < xs[i+1]."""
    return np.nonzero(xs[:-1] < xs[1:])[0]


def best_split(X: np.ndarray, y: np.ndarray, min_gain: float = 1e-7):
    """Exhaustive Gini split search over midpoints of consecutive distinct values.

    Returns (feature, threshold, gain) or None when no split gains at least
    min_gain. Ties go to the lowest feature index, then the lowest threshold.
    """
    n = len(y)
    if n < 2:
        return None
    parent_counts = np.bincount(y, minlength=N_CLASSES).astype(float)
    parent_gini = gini(parent_counts)
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        bnd = _split_candidates(xs)
        if len(bnd) == 0:
            continue
        onehot = np.zeros((n, N_CLASSES))
        onehot[np.arange(n), ys] = 1.0
        cum = np.cumsum(onehot, axis=0)
        nl = (bnd + 1).astype(float)
        nr = n - nl
        lc = cum[bnd]
        rc = parent_counts - lc
        gini_l = 1.0 - ((lc / nl[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((rc / nr[:, None]) ** 2).sum(axis=1)
        gains = parent_gini - (nl * gini_l + nr * gini_r) / n
        i = int(np.argmax(gains))  # first max -> lowest threshold on ties
        if best is None or gains[i] > best[2]:
            thr = (xs[bnd[i]] + xs[bnd[i] + 1]) / 2.0
            best = (f, float(thr), float(gains[i]))
    if best is None or best[2] < min_gain:
        return None
    return best


def _leaf(y: np.ndarray) -> TreeNode:
    counts = np.bincount(y, minlength=N_CLASSES)
    total = counts.sum()
    probs = counts / total
    return TreeNode(
        class_counts=tuple(int(c) for c in counts),
        probs=tuple(float(p) for p in probs),
    )


def fit_tree(X, y, params: TreeParams = TreeParams()) -> TreeNode:
    """Grow a CART classification tree with the standard stopping rules."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise ValueError("empty dataset")

    def grow(Xn, yn, depth):
        counts = np.bincount(yn, minlength=N_CLASSES)
        pure = np.count_nonzero(counts) <= 1
        if depth >= params.max_depth or len(yn) < params.min_samples_split or pure:
            return _leaf(yn)
        split = best_split(Xn, yn, params.min_gain)
        if split is None:
            return _leaf(yn)
        f, thr, _ = split
        mask = Xn[:, f] <= thr
        return TreeNode(
            feature=f,
            threshold=thr,
            left=grow(Xn[mask], yn[mask], depth + 1),
            right=grow(Xn[~mask], yn[~mask], depth + 1),
        )

    return grow(X, y, 0)


def predict_tree(tree: TreeNode, x) -> np.ndarray:
    """Class probabilities at the leaf x routes to (x[feature] <= threshold goes left)."""
    node = tree
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return np.asarray(node.probs, dtype=float)


def predict_tree_batch(tree: TreeNode, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    out = np.empty((len(X), N_CLASSES))

    def route(node, idx):
        if node.is_leaf:
            out[idx] = node.probs
            return
        mask = X[idx, node.feature] <= node.threshold
        route(node.left, idx[mask])
        route(node.right, idx[~mask])

    route(tree, np.arange(len(X)))
    return out


def predicted_class(probs: np.ndarray) -> int:
    """Argmax with ties resolved to the lowest class index."""
    return int(np.argmax(probs))


# -- regression trees for boosting -------------------------------------------


def _best_split_reg(X, r, min_gain):
    n = len(r)
    if n < 2:
        return None
    s_tot = r.sum()
    ss_tot = np.dot(r, r)
    sse_parent = max(ss_tot - s_tot * s_tot / n, 0.0)
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        rs = r[order]
        bnd = _split_candidates(xs)
        if len(bnd) == 0:
            continue
        cs = np.cumsum(rs)
        css = np.cumsum(rs * rs)
        nl = (bnd + 1).astype(float)
        nr = n - nl
        sse_l = np.maximum(css[bnd] - cs[bnd] ** 2 / nl, 0.0)
        sse_r = np.maximum((ss_tot - css[bnd]) - (s_tot - cs[bnd]) ** 2 / nr, 0.0)
        gains = (sse_parent - sse_l - sse_r) / n  # variance reduction
        i = int(np.argmax(gains))
        if best is None or gains[i] > best[2]:
            thr = (xs[bnd[i]] + xs[bnd[i] + 1]) / 2.0
            best = (f, float(thr), float(gains[i]))
    if best is None or best[2] < min_gain:
        return None
    return best


def fit_reg_tree(X, r, params: TreeParams) -> RegNode:
    X = np.asarray(X, dtype=float)
    r = np.asarray(r, dtype=float)
    if len(r) == 0:
        raise ValueError("empty dataset")

    def grow(Xn, rn, depth):
        if depth >= params.max_depth or len(rn) < params.min_samples_split:
            return RegNode(value=float(rn.mean()))
        split = _best_split_reg(Xn, rn, params.min_gain)
        if split is None:
            return RegNode(value=float(rn.mean()))
        f, thr, _ = split
        mask = Xn[:, f] <= thr
        return RegNode(
            feature=f,
            threshold=thr,
            left=grow(Xn[mask], rn[mask], depth + 1),
            right=grow(Xn[~mask], rn[~mask], depth + 1),
        )

    return grow(X, r, 0)


def predict_reg_tree(tree: RegNode, x) -> float:
    node = tree
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


def predict_reg_batch(tree: RegNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(len(X))

    def route(node, idx):
        if node.is_leaf:
            out[idx] = node.value
            return
        mask = X[idx, node.feature] <= node.threshold
        route(node.left, idx[mask])
        route(node.right, idx[~mask])

    route(tree, np.arange(len(X)))
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fit_gbdt(
    X,
    y,
    params: EnsembleParams = EnsembleParams(),
    tree_params: TreeParams = TreeParams(),
) -> Ensemble:
    """Softmax gradient boosting: per round, one regression tree per class fitted
    to the residuals (one_hot - softmax probability); leaf value is the mean residual.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise ValueError("empty dataset")
    counts = np.bincount(y, minlength=N_CLASSES)
    for c in range(N_CLASSES):
        if counts[c] == 0:
            raise ValueError(f"class absent from training data: {c}")
    base = np.log(counts / len(y))
    scores = np.tile(base, (len(y), 1))
    onehot = np.zeros((len(y), N_CLASSES))
    onehot[np.arange(len(y)), y] = 1.0
    trees: list[list[RegNode]] = [[], [], []]
    for _ in range(params.rounds):
        p = softmax(scores)
        for c in range(N_CLASSES):
            t = fit_reg_tree(X, onehot[:, c] - p[:, c], tree_params)
            trees[c].append(t)
            scores[:, c] += params.learning_rate * predict_reg_batch(t, X)
    return Ensemble(
        base_score=tuple(float(b) for b in base),
        params=params,
        tree_params=tree_params,
        trees=tuple(tuple(ts) for ts in trees),
    )


def ensemble_scores(ens: Ensemble, x) -> np.ndarray:
    scores = np.asarray(ens.base_score, dtype=float).copy()
    for c in range(N_CLASSES):
        acc = 0.0
        for t in ens.trees[c]:
            acc += predict_reg_tree(t, x)
        scores[c] += ens.params.learning_rate * acc
    return scores


def predict_ensemble(ens: Ensemble, x) -> np.ndarray:
    """softmax(base + lr * sum of per-round tree outputs) for one sample."""
    return softmax(ensemble_scores(ens, x))


def predict_ensemble_batch(ens: Ensemble, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    scores = np.tile(np.asarray(ens.base_score, dtype=float), (len(X), 1))
    for c in range(N_CLASSES):
        for t in ens.trees[c]:
            scores[:, c] += ens.params.learning_rate * predict_reg_batch(t, X)
    return softmax(scores)


# -- persistence ---------------------------------------------------------------


def _tree_to_nodes(root) -> list[dict]:
    """Flatten a tree to an array of nodes; children referenced by index, root at 0."""
    nodes: list[dict] = []

    def walk(node) -> int:
        idx = len(nodes)
        nodes.append({})
        if node.is_leaf:
            if isinstance(node, TreeNode):
                nodes[idx] = {"counts": list(node.class_counts), "probs": list(node.probs)}
            else:
                nodes[idx] = {"value": node.value}
        else:
            nodes[idx] = {"feature": node.feature, "threshold": node.threshold}
            nodes[idx]["left"] = walk(node.left)
            nodes[idx]["right"] = walk(node.right)
        return idx

    walk(root)
    return nodes


def _nodes_to_tree(nodes: list[dict], idx: int, cls):
    d = nodes[idx]
    if "feature" in d:
        return cls(
            feature=d["feature"],
            threshold=d["threshold"],
            left=_nodes_to_tree(nodes, d["left"], cls),
            right=_nodes_to_tree(nodes, d["right"], cls),
        )
    if cls is TreeNode:
        return TreeNode(class_counts=tuple(d["counts"]), probs=tuple(d["probs"]))
    return RegNode(value=d["value"])


def model_to_dict(model) -> dict:
    if isinstance(model, TreeNode):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "tree",
            "nodes": _tree_to_nodes(model),
        }
    if isinstance(model, Ensemble):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "ensemble",
            "base_score": list(model.base_score),
            "ensemble_params": model.params.to_dict(),
            "tree_params": model.tree_params.to_dict(),
            "trees": [[_tree_to_nodes(t) for t in ts] for ts in model.trees],
        }
    raise TypeError(f"not a persistable model: {type(model)!r}")


def model_from_dict(d: dict):
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a sliceverify model document")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')!r}")
    if d["kind"] == "tree":
        return _nodes_to_tree(d["nodes"], 0, TreeNode)
    if d["kind"] == "ensemble":
        return Ensemble(
            base_score=tuple(d["base_score"]),
            params=EnsembleParams.from_dict(d["ensemble_params"]),
            tree_params=TreeParams.from_dict(d["tree_params"]),
            trees=tuple(
                tuple(_nodes_to_tree(nodes, 0, RegNode) for nodes in ts)
                for ts in d["trees"]
            ),
        )
    raise ValueError(f"unknown model kind {d['kind']!r}")


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
