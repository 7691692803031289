"""Synthetic labeled KPI generation, CSV ingestion, and dataset splits.

The sampler draws per-slice KPI triples from zero-truncated Gaussian marginals
coupled by a Gaussian copula, which is enough to preserve the joint KPI-slice
structure the verifier is tested against. The overlap knob pulls the eMBB and
mMTC packet-count means toward their midpoint to make those two slices harder
to tell apart.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri

from .domain import SLICES, SliceId, UserKpi

CSV_HEADER = "window_id,user_id,slice,tx_bitrate_mbps,tx_packets,dl_buffer_bytes"

_DEFAULT_CORR = (
    (1.0, 0.5, 0.25),
    (0.5, 1.0, 0.15),
    (0.25, 0.15, 1.0),
)


@dataclass(frozen=True)
class SliceKpiDistribution:
    """Truncated-Gaussian marginals (lower bound 0) for (bitrate, packets, buffer),
    coupled by a correlation matrix via a Gaussian copula."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    correlation: tuple[tuple[float, ...], ...] = _DEFAULT_CORR

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError("stds must be > 0")
        corr = np.asarray(self.correlation, dtype=float)
        if corr.shape != (3, 3):
            raise ValueError("correlation must be 3x3")
        if not np.allclose(corr, corr.T, atol=1e-12):
            raise ValueError("correlation must be symmetric")
        if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
            raise ValueError("correlation must have unit diagonal")
        if np.linalg.eigvalsh(corr).min() < -1e-9:
            raise ValueError("correlation must be positive semi-definite")

    def to_dict(self) -> dict:
        return {
            "mean": list(self.mean),
            "std": list(self.std),
            "correlation": [list(r) for r in self.correlation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SliceKpiDistribution":
        return cls(
            mean=tuple(d["mean"]),
            std=tuple(d["std"]),
            correlation=tuple(tuple(r) for r in d["correlation"]),
        )


@dataclass(frozen=True)
class GenConfig:
    distributions: tuple[SliceKpiDistribution, SliceKpiDistribution, SliceKpiDistribution]
    n_samples: int = 10_000
    balance: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    overlap_lambda: float = 0.5
    seed: int = 42

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be > 0")
        if not 0.0 <= self.overlap_lambda <= 1.0:
            raise ValueError("overlap_lambda must be in [0, 1]")
        if any(b < 0 for b in self.balance) or abs(sum(self.balance) - 1.0) > 1e-9:
            raise ValueError("balance must be nonnegative and sum to 1")

    def to_dict(self) -> dict:
        return {
            "distributions": {
                s.label: self.distributions[int(s)].to_dict() for s in SLICES
            },
            "n_samples": self.n_samples,
            "balance": list(self.balance),
            "overlap_lambda": self.overlap_lambda,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(
            distributions=tuple(
                SliceKpiDistribution.from_dict(d["distributions"][s.label]) for s in SLICES
            ),
            n_samples=d["n_samples"],
            balance=tuple(d["balance"]),
            overlap_lambda=d["overlap_lambda"],
            seed=d["seed"],
        )


def embb_scenario() -> GenConfig:
    """KPI mix for the eMBB-oriented agent: all three slices overlap moderately."""
    return GenConfig(
        distributions=(
            SliceKpiDistribution(mean=(6.0, 420.0, 330_000.0), std=(2.8, 110.0, 160_000.0)),
            SliceKpiDistribution(mean=(1.6, 150.0, 130_000.0), std=(1.3, 45.0, 95_000.0)),
            SliceKpiDistribution(mean=(3.0, 230.0, 190_000.0), std=(1.9, 80.0, 120_000.0)),
        ),
    )


def urllc_scenario() -> GenConfig:
    """KPI mix for the URLLC-oriented agent: eMBB stands apart, URLLC keeps a
    visibly low buffer but still brushes against mMTC."""
    return GenConfig(
        distributions=(
            SliceKpiDistribution(mean=(12.0, 600.0, 500_000.0), std=(2.0, 120.0, 150_000.0)),
            SliceKpiDistribution(mean=(1.2, 150.0, 90_000.0), std=(0.9, 50.0, 70_000.0)),
            SliceKpiDistribution(mean=(1.8, 170.0, 22_000.0), std=(1.1, 60.0, 26_000.0)),
        ),
    )


def class_counts(n: int, balance) -> list[int]:
    """Largest-remainder apportionment of n samples over the three slices."""
    raw = [n * b for b in balance]
    counts = [int(v) for v in raw]
    rem = n - sum(counts)
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(rem):
        counts[order[i]] += 1
    return counts


def _truncnorm_ppf(u: np.ndarray, mean: float, std: float) -> np.ndarray:
    # inverse CDF of a Gaussian truncated to [0, inf)
    alpha = -mean / std
    lo = ndtr(alpha)
    u = np.clip(lo + u * (1.0 - lo), 1e-15, 1.0 - 1e-15)
    return np.maximum(mean + std * ndtri(u), 0.0)


def effective_distributions(config: GenConfig):
    """Per-slice distributions with the overlap knob applied to packet-count means."""
    dists = list(config.distributions)
    lam = config.overlap_lambda
    m_e = dists[SliceId.EMBB].mean
    m_m = dists[SliceId.MMTC].mean
    mid = (m_e[1] + m_m[1]) / 2.0
    dists[SliceId.EMBB] = replace(
        dists[SliceId.EMBB], mean=(m_e[0], (1 - lam) * m_e[1] + lam * mid, m_e[2])
    )
    dists[SliceId.MMTC] = replace(
        dists[SliceId.MMTC], mean=(m_m[0], (1 - lam) * m_m[1] + lam * mid, m_m[2])
    )
    return dists


def sample_dataset(config: GenConfig, rng: np.random.Generator | None = None) -> list[UserKpi]:
    """Draw config.n_samples labeled KPI triples, deterministic under the seed."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    dists = effective_distributions(config)
    counts = class_counts(config.n_samples, config.balance)
    kpis: list[UserKpi] = []
    uid = 0
    for s in SLICES:
        dist = dists[int(s)]
        n = counts[int(s)]
        if n == 0:
            continue
        corr = np.asarray(dist.correlation, dtype=float)
        z = rng.multivariate_normal(np.zeros(3), corr, size=n, method="svd")
        u = ndtr(z)
        cols = [
            _truncnorm_ppf(u[:, j], dist.mean[j], dist.std[j]) for j in range(3)
        ]
        for i in range(n):
            kpis.append(
                UserKpi(
                    user_id=uid,
                    slice=s,
                    tx_bitrate_mbps=float(cols[0][i]),
                    tx_packets=int(round(cols[1][i])),
                    dl_buffer_bytes=int(round(cols[2][i])),
                    window_id=0,
                )
            )
            uid += 1
    return kpis


def stratified_split(dataset, fraction: float, rng: np.random.Generator):
    """Per class, draw round(fraction * n_c) samples without replacement.

    Returns (subset, remainder); the two partition the dataset.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    by_class: dict[SliceId, list[int]] = {s: [] for s in SLICES}
    for i, kpi in enumerate(dataset):
        by_class[kpi.slice].append(i)
    chosen: set[int] = set()
    for s in SLICES:
        idx = by_class[s]
        k = round(fraction * len(idx))
        if k == 0:
            raise ValueError(f"fraction {fraction} yields no samples for class {s.label}")
        picks = rng.choice(len(idx), size=k, replace=False)
        chosen.update(idx[int(p)] for p in picks)
    subset = [dataset[i] for i in range(len(dataset)) if i in chosen]
    remainder = [dataset[i] for i in range(len(dataset)) if i not in chosen]
    return subset, remainder


@dataclass
class CsvLoadResult:
    kpis: list[UserKpi] = field(default_factory=list)
    imputed_cells: int = 0


def save_csv(dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for k in dataset:
            fh.write(
                f"{k.window_id},{k.user_id},{k.slice.label},"
                f"{k.tx_bitrate_mbps!r},{k.tx_packets},{k.dl_buffer_bytes}\n"
            )


def _parse_cell(text: str, kind, line_no: int, col: str):
    if text == "":
        return None
    try:
        return kind(text)
    except ValueError:
        raise ValueError(f"line {line_no}: cannot parse {col} value {text!r}") from None


def load_csv(path) -> CsvLoadResult:
    """Read a KPI dataset; empty numeric KPI cells are imputed with the column median."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").rstrip("\r")
        if header != CSV_HEADER:
            raise ValueError(f"header mismatch: expected {CSV_HEADER!r}")
        rows = []
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ValueError(f"line {line_no}: expected 6 fields, got {len(parts)}")
            window_id = _parse_cell(parts[0], int, line_no, "window_id")
            user_id = _parse_cell(parts[1], int, line_no, "user_id")
            if window_id is None or user_id is None:
                raise ValueError(f"line {line_no}: window_id/user_id must be present")
            try:
                slice_id = SliceId.from_label(parts[2])
            except ValueError:
                raise ValueError(f"line {line_no}: unknown slice {parts[2]!r}") from None
            rows.append(
                (
                    window_id,
                    user_id,
                    slice_id,
                    _parse_cell(parts[3], float, line_no, "tx_bitrate_mbps"),
                    _parse_cell(parts[4], int, line_no, "tx_packets"),
                    _parse_cell(parts[5], int, line_no, "dl_buffer_bytes"),
                    line_no,
                )
            )

    result = CsvLoadResult()
    medians = []
    for col, cast in ((3, float), (4, int), (5, int)):
        observed = [r[col] for r in rows if r[col] is not None]
        if rows and not observed:
            raise ValueError(f"column {CSV_HEADER.split(',')[col]} has no observed values")
        med = statistics.median(observed) if observed else 0
        medians.append(cast(round(med)) if cast is int else float(med))
    for r in rows:
        vals = list(r[3:6])
        for j in range(3):
            if vals[j] is None:
                vals[j] = medians[j]
                result.imputed_cells += 1
        result.kpis.append(
            UserKpi(
                user_id=r[1],
                slice=r[2],
                tx_bitrate_mbps=vals[0],
                tx_packets=vals[1],
                dl_buffer_bytes=vals[2],
                window_id=r[0],
            )
        )
    return result
