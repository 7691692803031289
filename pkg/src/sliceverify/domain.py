"""Shared domain types: slices, KPIs, actions, and feature statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

# Padding applied to degenerate histogram edges so they stay strictly increasing.
EDGE_EPS = 1e-9

FEATURE_NAMES = ("tx_bitrate_mbps", "tx_packets", "dl_buffer_bytes")
N_FEATURES = 3


class SliceId(IntEnum):
    """Network slice, ordinal order fixed so it doubles as the class index."""

    EMBB = 0
    MMTC = 1
    URLLC = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "SliceId":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ValueError(f"unknown slice label {label!r}") from None


SLICES = (SliceId.EMBB, SliceId.MMTC, SliceId.URLLC)


class SchedulerPolicy(Enum):
    RR = "RR"
    WF = "WF"
    PF = "PF"


@dataclass(frozen=True)
class UserKpi:
    """One user's telemetry for one control window, plus the operator's slice label."""

    user_id: int
    slice: SliceId
    tx_bitrate_mbps: float
    tx_packets: int
    dl_buffer_bytes: int
    window_id: int

    def __post_init__(self):
        for name in FEATURE_NAMES:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")

    def features(self) -> np.ndarray:
        """KPI triple in the fixed (bitrate, packets, buffer) order."""
        return np.array(
            [self.tx_bitrate_mbps, self.tx_packets, self.dl_buffer_bytes], dtype=float
        )


def features_matrix(kpis) -> np.ndarray:
    """(n, 3) feature matrix for a list of UserKpi."""
    return np.array(
        [[k.tx_bitrate_mbps, k.tx_packets, k.dl_buffer_bytes] for k in kpis],
        dtype=float,
    ).reshape(len(kpis), N_FEATURES)


@dataclass(frozen=True)
class SliceAllocation:
    prbs: int
    scheduler: SchedulerPolicy


@dataclass(frozen=True)
class SlicingAction:
    """Per-slice PRB share and intra-slice scheduler, the agent's control output."""

    embb: SliceAllocation
    mmtc: SliceAllocation
    urllc: SliceAllocation

    def for_slice(self, s: SliceId) -> SliceAllocation:
        return (self.embb, self.mmtc, self.urllc)[int(s)]

    def prb_total(self) -> int:
        return self.embb.prbs + self.mmtc.prbs + self.urllc.prbs


def validate_action(action: SlicingAction, total_prbs: int) -> list[str]:
    """Check a SlicingAction against the cell budget.

    Returns a list of violation strings; an empty list means the action is valid.
    Violations are data, not faults: callers decide how to react.
    """
    if total_prbs <= 0:
        raise ValueError(f"total_prbs must be positive, got {total_prbs}")
    violations = []
    for s in SLICES:
        alloc = action.for_slice(s)
        if alloc.prbs < 0:
            violations.append(f"{s.label} prbs {alloc.prbs} < 0")
    total = action.prb_total()
    if total > total_prbs:
        violations.append(f"sum {total} > {total_prbs}")
    return violations


@dataclass(frozen=True, eq=False)
class FeatureStats:
    """Per-feature mean, population std, and 10-bin histogram edges of a reference set.

    edges has shape (3, 11): 11 strictly increasing edges per feature, taken at the
    0,10,...,100 nearest-rank percentiles of the reference data and padded by
    EDGE_EPS where percentiles coincide.
    """

    mean: np.ndarray
    std: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        if self.mean.shape != (N_FEATURES,) or self.std.shape != (N_FEATURES,):
            raise ValueError("stats must cover exactly 3 features")
        if self.edges.shape != (N_FEATURES, 11):
            raise ValueError("expected 11 histogram edges per feature")
        if np.any(self.std < 0):
            raise ValueError("std must be >= 0")
        if np.any(np.diff(self.edges, axis=1) <= 0):
            raise ValueError("histogram edges must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "edges": self.edges.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=float),
            std=np.asarray(d["std"], dtype=float),
            edges=np.asarray(d["edges"], dtype=float),
        )


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: value at 1-based index ceil(pct/100 * n)."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


def feature_stats(dataset) -> FeatureStats:
    """Mean/std (population) and decile histogram edges of a reference KPI set."""
    if len(dataset) == 0:
        raise ValueError("empty reference set")
    x = features_matrix(dataset)
    mean = x.mean(axis=0)
    std = x.std(axis=0)  # population std
    edges = np.empty((N_FEATURES, 11))
    for f in range(N_FEATURES):
        col = np.sort(x[:, f])
        raw = [nearest_rank(col, p) for p in range(0, 101, 10)]
        out = [raw[0]]
        for e in raw[1:]:
            out.append(e if e > out[-1] else out[-1] + EDGE_EPS)
        edges[f] = out
    return FeatureStats(mean=mean, std=std, edges=edges)


def zscore_normalize(x: np.ndarray, stats: FeatureStats) -> np.ndarray:
    """(x - mean) / std per coordinate; constant features (std == 0) map to 0."""
    x = np.asarray(x, dtype=float)
    return np.where(stats.std > 0, (x - stats.mean) / np.where(stats.std > 0, stats.std, 1.0), 0.0)
