"""The slice-verifier xApp: slice prediction plus drift, misclassification, and
conflict flags at near-real-time cost.

Drift uses the population stability index over the reference decile bins with a
3-consecutive-breach rule; conflicts are detected against a bounded ring buffer
of recent predictions in z-score space.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import trees
from .datagen import stratified_split
from .domain import (
    SLICES,
    FeatureStats,
    SliceId,
    UserKpi,
    feature_stats,
    features_matrix,
    zscore_normalize,
)
from .trees import Ensemble, EnsembleParams, TreeNode, TreeParams

PSI_FLOOR = 1e-6


@dataclass(frozen=True)
class VerifierParams:
    train_fraction: float = 0.05
    min_per_class: int = 30
    classifier: str = "ensemble"  # "ensemble" or "tree"
    tree: TreeParams = TreeParams()
    ensemble: EnsembleParams = EnsembleParams()
    drift_window: int = 500
    psi_threshold: float = 0.25
    psi_consecutive: int = 3
    conflict_eps: float = 0.1
    conflict_cache: int = 1000
    misclass_rate_threshold: float = 0.25
    misclass_windows: int = 20

    def to_dict(self) -> dict:
        return {
            "train_fraction": self.train_fraction,
            "min_per_class": self.min_per_class,
            "classifier": self.classifier,
            "tree": self.tree.to_dict(),
            "ensemble": self.ensemble.to_dict(),
            "drift_window": self.drift_window,
            "psi_threshold": self.psi_threshold,
            "psi_consecutive": self.psi_consecutive,
            "conflict_eps": self.conflict_eps,
            "conflict_cache": self.conflict_cache,
            "misclass_rate_threshold": self.misclass_rate_threshold,
            "misclass_windows": self.misclass_windows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerifierParams":
        d = dict(d)
        d["tree"] = TreeParams.from_dict(d["tree"])
        d["ensemble"] = EnsembleParams.from_dict(d["ensemble"])
        return cls(**d)


@dataclass(frozen=True)
class VerdictFlags:
    drift: bool = False
    misclass: bool = False
    conflict: bool = False


@dataclass(frozen=True)
class Verdict:
    window_id: int
    user_id: int
    predicted_slice: SliceId
    true_slice: SliceId
    flags: VerdictFlags
    inference_latency_us: int

    def __post_init__(self):
        if self.inference_latency_us < 0:
            raise ValueError("latency must be >= 0")
        if self.flags.misclass != (self.predicted_slice != self.true_slice):
            raise ValueError("misclass flag must equal (predicted != true)")


def bin_index(edges: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Map values into the 10 bins of an 11-edge histogram; a value equal to an
    interior edge falls in the lower bin, out-of-range values clamp to the ends."""
    return np.searchsorted(edges[1:-1], np.asarray(values, dtype=float), side="left")


def bin_proportions(edges: np.ndarray, values: np.ndarray) -> np.ndarray:
    counts = np.bincount(bin_index(edges, values), minlength=10)
    return counts / max(len(values), 1)


def psi(p: np.ndarray, q: np.ndarray, floor: float = PSI_FLOOR) -> float:
    """Population stability index with proportions floored to keep logs finite."""
    p = np.maximum(np.asarray(p, dtype=float), floor)
    q = np.maximum(np.asarray(q, dtype=float), floor)
    return float(np.sum((p - q) * np.log(p / q)))


@dataclass(frozen=True)
class VerifierModel:
    """Trained slice classifier plus the reference statistics the checks run against."""

    classifier: TreeNode | Ensemble
    slice_stats: tuple[FeatureStats, ...]  # per slice, from the training subset
    slice_props: np.ndarray  # (3 slices, 3 features, 10 bins) reference proportions
    norm_stats: FeatureStats  # z-score space for the conflict check
    train_fraction: float

    def predict_probs(self, features) -> np.ndarray:
        if isinstance(self.classifier, Ensemble):
            return trees.predict_ensemble(self.classifier, features)
        return trees.predict_tree(self.classifier, features)

    def predict(self, features) -> SliceId:
        return SliceId(trees.predicted_class(self.predict_probs(features)))

    def to_dict(self) -> dict:
        return {
            "classifier": trees.model_to_dict(self.classifier),
            "slice_stats": [st.to_dict() for st in self.slice_stats],
            "slice_props": self.slice_props.tolist(),
            "norm_stats": self.norm_stats.to_dict(),
            "train_fraction": self.train_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerifierModel":
        return cls(
            classifier=trees.model_from_dict(d["classifier"]),
            slice_stats=tuple(FeatureStats.from_dict(x) for x in d["slice_stats"]),
            slice_props=np.asarray(d["slice_props"], dtype=float),
            norm_stats=FeatureStats.from_dict(d["norm_stats"]),
            train_fraction=d["train_fraction"],
        )


def train_verifier(
    corpus: list[UserKpi],
    fraction: float,
    params: VerifierParams = VerifierParams(),
    seed: int = 0,
) -> VerifierModel:
    """Fit the verifier on a stratified fraction of the corpus.

    Raises when any slice ends up with fewer than params.min_per_class samples,
    which is the explicit failure mode for fractions that are too small.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        subset = list(corpus)
    else:
        subset, _ = stratified_split(corpus, fraction, np.random.default_rng(seed))
    by_slice = {s: [k for k in subset if k.slice == s] for s in SLICES}
    for s in SLICES:
        if len(by_slice[s]) < params.min_per_class:
            raise ValueError(f"insufficient support for class {s.label}")
    X = features_matrix(subset)
    y = np.array([int(k.slice) for k in subset])
    if params.classifier == "ensemble":
        clf = trees.fit_gbdt(X, y, params.ensemble, params.tree)
    elif params.classifier == "tree":
        clf = trees.fit_tree(X, y, params.tree)
    else:
        raise ValueError(f"unknown classifier kind {params.classifier!r}")
    slice_stats = tuple(feature_stats(by_slice[s]) for s in SLICES)
    props = np.zeros((3, 3, 10))
    for s in SLICES:
        xs = features_matrix(by_slice[s])
        for f in range(3):
            props[int(s), f] = bin_proportions(slice_stats[int(s)].edges[f], xs[:, f])
    return VerifierModel(
        classifier=clf,
        slice_stats=slice_stats,
        slice_props=props,
        norm_stats=feature_stats(subset),
        train_fraction=fraction,
    )


class DriftState:
    """Per-slice sliding windows of recent feature vectors plus breach bookkeeping."""

    def __init__(self, window: int = 500):
        self.window = window
        self.samples = {s: deque(maxlen=window) for s in SLICES}
        self.last_psi = {s: np.zeros(3) for s in SLICES}
        self.breach_streak = {s: 0 for s in SLICES}
        self.in_breach = {s: False for s in SLICES}

    def observe(self, slice_id: SliceId, features: np.ndarray) -> None:
        self.samples[slice_id].append(np.asarray(features, dtype=float))


@dataclass(frozen=True)
class DriftCheck:
    psi: tuple[float, float, float]
    decided: bool  # False when the window is still filling
    breach: bool


def check_drift(
    state: DriftState,
    slice_id: SliceId,
    reference: FeatureStats,
    reference_props: np.ndarray,
    threshold: float = 0.25,
    consecutive: int = 3,
) -> DriftCheck:
    """Evaluate one slice's drift once per window.

    No decision is made until the sliding window holds at least half its capacity;
    a breach requires `consecutive` evaluations in a row with any feature PSI above
    the threshold.
    """
    buf = state.samples[slice_id]
    if len(buf) < state.window / 2:
        return DriftCheck(psi=(0.0, 0.0, 0.0), decided=False, breach=state.in_breach[slice_id])
    xs = np.array(buf)
    vals = []
    for f in range(3):
        p = bin_proportions(reference.edges[f], xs[:, f])
        vals.append(psi(p, reference_props[f]))
    state.last_psi[slice_id] = np.array(vals)
    if max(vals) > threshold:
        state.breach_streak[slice_id] += 1
    else:
        state.breach_streak[slice_id] = 0
    state.in_breach[slice_id] = state.breach_streak[slice_id] >= consecutive
    return DriftCheck(psi=tuple(vals), decided=True, breach=state.in_breach[slice_id])


class ConflictCache:
    """Bounded FIFO of (normalized features, predicted class); powers the
    similar-inputs-different-prediction check."""

    def __init__(self, size: int = 1000):
        self.size = size
        self.vecs = np.zeros((size, 3))
        self.classes = np.full(size, -1, dtype=int)
        self.filled = 0
        self.next = 0

    def check_and_add(self, x_norm: np.ndarray, predicted: int, eps: float = 0.1) -> bool:
        x_norm = np.asarray(x_norm, dtype=float)
        hit = False
        if self.filled:
            d2 = ((self.vecs[: self.filled] - x_norm) ** 2).sum(axis=1)
            hit = bool(np.any((d2 <= eps * eps) & (self.classes[: self.filled] != predicted)))
        self.vecs[self.next] = x_norm
        self.classes[self.next] = predicted
        self.next = (self.next + 1) % self.size
        self.filled = min(self.filled + 1, self.size)
        return hit


def check_conflict(cache: ConflictCache, x_normalized, predicted_class: int, eps: float = 0.1) -> bool:
    """True iff a cached nearby vector (L2 <= eps in z-score space) carries a
    different predicted class; the query is appended after the check."""
    return cache.check_and_add(x_normalized, int(predicted_class), eps)


class Verifier:
    """Stateful per-agent verifier: one verify_sample call per user KPI, one
    end_window call per control window."""

    def __init__(self, model: VerifierModel, params: VerifierParams = VerifierParams()):
        self.model = model
        self.params = params
        self.drift = DriftState(params.drift_window)
        self.cache = ConflictCache(params.conflict_cache)

    def verify_sample(self, kpi: UserKpi) -> Verdict:
        t0 = time.perf_counter_ns()
        feats = (kpi.tx_bitrate_mbps, kpi.tx_packets, kpi.dl_buffer_bytes)
        pred = self.model.predict(feats)
        z = zscore_normalize(np.asarray(feats, dtype=float), self.model.norm_stats)
        conflict = self.cache.check_and_add(z, int(pred), self.params.conflict_eps)
        drift_flag = self.drift.in_breach[kpi.slice]
        self.drift.observe(kpi.slice, feats)
        latency_us = max(time.perf_counter_ns() - t0, 0) // 1000
        return Verdict(
            window_id=kpi.window_id,
            user_id=kpi.user_id,
            predicted_slice=pred,
            true_slice=kpi.slice,
            flags=VerdictFlags(
                drift=drift_flag,
                misclass=pred != kpi.slice,
                conflict=conflict,
            ),
            inference_latency_us=int(latency_us),
        )

    def end_window(self) -> dict[SliceId, DriftCheck]:
        """Run the once-per-window drift evaluation for every slice."""
        out = {}
        for s in SLICES:
            out[s] = check_drift(
                self.drift,
                s,
                self.model.slice_stats[int(s)],
                self.model.slice_props[int(s)],
                self.params.psi_threshold,
                self.params.psi_consecutive,
            )
        return out


class EscalationTracker:
    """Turns verdict streams into at-most-one escalation per reason per run."""

    def __init__(self, params: VerifierParams = VerifierParams()):
        self.params = params
        self.raised: dict[str, int] = {}
        self._history: deque[tuple[int, int]] = deque(maxlen=params.misclass_windows)

    def observe_window(self, window_id: int, verdicts, drift_breach: bool) -> list[str]:
        """Record one window of verdicts; returns newly raised escalation reasons."""
        new = []
        mis = sum(1 for v in verdicts if v.flags.misclass)
        self._history.append((mis, len(verdicts)))
        if drift_breach and "drift" not in self.raised:
            self.raised["drift"] = window_id
            new.append("drift")
        if any(v.flags.conflict for v in verdicts) and "conflict" not in self.raised:
            self.raised["conflict"] = window_id
            new.append("conflict")
        if len(self._history) == self.params.misclass_windows and "misclass_rate" not in self.raised:
            total = sum(t for _, t in self._history)
            bad = sum(m for m, _ in self._history)
            if total > 0 and bad / total > self.params.misclass_rate_threshold:
                self.raised["misclass_rate"] = window_id
                new.append("misclass_rate")
        return new


def latency_stats(verdicts) -> dict[str, int]:
    """Nearest-rank p50/p95/p99 and max of the verdicts' inference latencies (us)."""
    if len(verdicts) == 0:
        raise ValueError("no verdicts")
    lat = sorted(v.inference_latency_us for v in verdicts)
    n = len(lat)

    def rank(q: float) -> int:
        return lat[max(1, math.ceil(q * n)) - 1]

    return {"p50": rank(0.50), "p95": rank(0.95), "p99": rank(0.99), "max": lat[-1]}
