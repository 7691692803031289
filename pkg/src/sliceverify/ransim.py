"""Discrete-time sliced gNB emulator.

Time advances in 1 ms TTIs grouped into 250 ms control windows. Each user owns a
bit-granular packet queue fed by an on/off Poisson arrival process; every TTI the
slice's PRB share is distributed among its backlogged users by the slice's
scheduling policy, and served bits are dequeued up to PRB capacity. Per-user KPIs
are reported once per window. All randomness flows through one seeded generator,
so a (config, seed, action trace) triple reproduces the exact report trace.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import (
    SLICES,
    SchedulerPolicy,
    SliceAllocation,
    SliceId,
    SlicingAction,
    UserKpi,
    validate_action,
)

SE_MEDIAN = 360.0  # bits per PRB per TTI at the lognormal median
SE_MIN = 36.0
SE_MAX = 1404.0
PF_BETA = 0.1

DRIFTABLE_PARAMETERS = (
    "mean_arrival_kbps",
    "packet_size_bytes",
    "burst_on_prob",
    "burst_off_prob",
    "fading_sigma",
)


@dataclass(frozen=True)
class SliceTrafficProfile:
    """Per-user traffic model for one slice.

    burst_on_prob is the per-TTI chance that an active burst ends (on -> off);
    burst_off_prob the chance an idle user starts a burst (off -> on). With both
    zero the initial burst state is absorbing, which models always-on traffic.
    """

    mean_arrival_kbps: float
    packet_size_bytes: int
    burst_on_prob: float = 0.0
    burst_off_prob: float = 0.0

    def __post_init__(self):
        if self.mean_arrival_kbps < 0:
            raise ValueError("mean_arrival_kbps must be >= 0")
        if self.packet_size_bytes <= 0:
            raise ValueError("packet_size_bytes must be > 0")
        for name in ("burst_on_prob", "burst_off_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @property
    def packets_per_tti(self) -> float:
        return self.mean_arrival_kbps / (8.0 * self.packet_size_bytes)

    def to_dict(self) -> dict:
        return {
            "mean_arrival_kbps": self.mean_arrival_kbps,
            "packet_size_bytes": self.packet_size_bytes,
            "burst_on_prob": self.burst_on_prob,
            "burst_off_prob": self.burst_off_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SliceTrafficProfile":
        return cls(**d)


def default_profiles() -> tuple[SliceTrafficProfile, ...]:
    """Saturating eMBB, bursty mMTC, light always-on URLLC."""
    return (
        SliceTrafficProfile(4000.0, 1500),
        SliceTrafficProfile(50.0, 200, burst_on_prob=0.3, burst_off_prob=0.1),
        SliceTrafficProfile(200.0, 256),
    )


def stationary_profiles() -> tuple[SliceTrafficProfile, ...]:
    """Load mix where every slice is stable under an equal split; used for
    drift experiments, where the baseline feature distributions must not wander."""
    return (
        SliceTrafficProfile(800.0, 1500),
        SliceTrafficProfile(50.0, 200, burst_on_prob=0.3, burst_off_prob=0.1),
        SliceTrafficProfile(200.0, 256),
    )


@dataclass(frozen=True)
class SimConfig:
    total_prbs: int = 50
    tti_per_window: int = 250
    users_per_slice: int = 6
    profiles: tuple[SliceTrafficProfile, ...] = field(default_factory=default_profiles)
    fading_sigma: float = 0.3
    seed: int = 1

    def __post_init__(self):
        if self.total_prbs <= 0 or self.tti_per_window <= 0 or self.users_per_slice <= 0:
            raise ValueError("total_prbs, tti_per_window, users_per_slice must be > 0")
        if len(self.profiles) != 3:
            raise ValueError("need one traffic profile per slice")

    @property
    def window_seconds(self) -> float:
        return self.tti_per_window * 1e-3

    def to_dict(self) -> dict:
        return {
            "total_prbs": self.total_prbs,
            "tti_per_window": self.tti_per_window,
            "users_per_slice": self.users_per_slice,
            "profiles": {s.label: self.profiles[int(s)].to_dict() for s in SLICES},
            "fading_sigma": self.fading_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(
            total_prbs=d["total_prbs"],
            tti_per_window=d["tti_per_window"],
            users_per_slice=d["users_per_slice"],
            profiles=tuple(
                SliceTrafficProfile.from_dict(d["profiles"][s.label]) for s in SLICES
            ),
            fading_sigma=d["fading_sigma"],
            seed=d["seed"],
        )


class PacketQueue:
    """Bit-granular FIFO of whole packets; the head packet may be partially served."""

    __slots__ = ("runs", "head_served", "bits")

    def __init__(self):
        self.runs: deque = deque()  # [count, bits_each] runs of equal-size packets
        self.head_served = 0
        self.bits = 0

    def enqueue(self, n_packets: int, bits_each: int) -> None:
        if n_packets <= 0:
            return
        if self.runs and self.runs[-1][1] == bits_each and len(self.runs) > 1:
            self.runs[-1][0] += n_packets
        elif self.runs and self.runs[-1][1] == bits_each and self.head_served == 0:
            self.runs[-1][0] += n_packets
        elif self.runs and self.runs[-1][1] == bits_each and len(self.runs) == 1:
            # head run partially served: still safe to extend the tail of the same run
            self.runs[-1][0] += n_packets
        else:
            self.runs.append([n_packets, bits_each])
        self.bits += n_packets * bits_each

    def serve(self, budget_bits: int) -> tuple[int, int]:
        """Dequeue up to budget_bits; returns (served_bits, fully drained packets)."""
        served = budget_bits if budget_bits < self.bits else self.bits
        remaining = served
        completed = 0
        while remaining > 0:
            run = self.runs[0]
            head_left = run[1] - self.head_served
            if remaining >= head_left:
                remaining -= head_left
                completed += 1
                self.head_served = 0
                run[0] -= 1
                if run[0] == 0:
                    self.runs.popleft()
            else:
                self.head_served += remaining
                remaining = 0
        self.bits -= served
        return served, completed


@dataclass
class UserState:
    user_id: int
    slice: SliceId
    spectral_eff: float = SE_MEDIAN
    ema_throughput_mbps: float = 0.0
    burst_on: bool = True
    queue: PacketQueue = field(default_factory=PacketQueue)
    window_served_bits: int = 0
    window_packets: int = 0
    window_arrived_bits: int = 0

    @property
    def queue_bits(self) -> int:
        return self.queue.bits


@dataclass(frozen=True)
class KpiReport:
    window_id: int
    users: tuple[UserKpi, ...]


@dataclass(frozen=True)
class DriftInjection:
    slice: SliceId
    parameter: str
    multiplier: float
    start_window: int

    def __post_init__(self):
        if self.multiplier <= 0:
            raise ValueError("multiplier must be > 0")
        if self.parameter not in DRIFTABLE_PARAMETERS:
            raise ValueError(f"unknown drift parameter {self.parameter!r}")

    def to_dict(self) -> dict:
        return {
            "slice": self.slice.label,
            "parameter": self.parameter,
            "multiplier": self.multiplier,
            "start_window": self.start_window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DriftInjection":
        return cls(
            slice=SliceId.from_label(d["slice"]),
            parameter=d["parameter"],
            multiplier=d["multiplier"],
            start_window=d["start_window"],
        )


def arrivals(profile: SliceTrafficProfile, user: UserState, rng: np.random.Generator) -> int:
    """One TTI of the arrival process for one user.

    Enqueues a Poisson number of whole packets while the burst is on, then
    advances the on/off state. Returns the bits enqueued.
    """
    bits = 0
    if user.burst_on and profile.mean_arrival_kbps > 0:
        n = int(rng.poisson(profile.packets_per_tti))
        if n > 0:
            pkt_bits = profile.packet_size_bytes * 8
            user.queue.enqueue(n, pkt_bits)
            bits = n * pkt_bits
    if user.burst_on:
        if profile.burst_on_prob > 0 and rng.random() < profile.burst_on_prob:
            user.burst_on = False
    else:
        if profile.burst_off_prob > 0 and rng.random() < profile.burst_off_prob:
            user.burst_on = True
    return bits


def schedule_rr(backlogged: list[UserState], prbs: int, rotation: int) -> list[int]:
    """Equal split with the remainder handed out one-each starting at rotation mod n."""
    n = len(backlogged)
    if n == 0 or prbs <= 0:
        return [0] * n
    base, rem = divmod(prbs, n)
    counts = [base] * n
    for i in range(rem):
        counts[(rotation + i) % n] += 1
    return counts


def schedule_wf(backlogged: list[UserState], prbs: int) -> list[int]:
    """Greedy max-min: each PRB goes to the user with the lowest bits served so far
    this window (ties to the lowest user_id); service counts spectral_eff per PRB."""
    n = len(backlogged)
    counts = [0] * n
    if n == 0:
        return counts
    served = [float(u.window_served_bits) for u in backlogged]
    se = [u.spectral_eff for u in backlogged]
    for _ in range(prbs):
        best = 0
        best_v = served[0]
        for i in range(1, n):
            if served[i] < best_v:
                best = i
                best_v = served[i]
        counts[best] += 1
        served[best] += se[best]
    return counts


def schedule_pf(backlogged: list[UserState], prbs: int, window_scale: float) -> list[int]:
    """Proportional fair: argmax of spectral_eff over a provisional EMA throughput
    that absorbs the bits granted so far this window (window_scale converts bits
    to Mbps over the window)."""
    n = len(backlogged)
    counts = [0] * n
    if n == 0:
        return counts
    se = [u.spectral_eff for u in backlogged]
    prov = [
        u.ema_throughput_mbps + u.window_served_bits * window_scale + 1e-6
        for u in backlogged
    ]
    for _ in range(prbs):
        best = 0
        best_v = se[0] / prov[0]
        for i in range(1, n):
            v = se[i] / prov[i]
            if v > best_v:
                best = i
                best_v = v
        counts[best] += 1
        prov[best] += se[best] * window_scale
    return counts


class GnbSimulator:
    """Single-cell gNB with three slices; one run_window call per control period."""

    def __init__(self, config: SimConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self.users: list[UserState] = []
        self._slice_users: list[list[UserState]] = [[], [], []]
        uid = 0
        for s in SLICES:
            for _ in range(config.users_per_slice):
                u = UserState(user_id=uid, slice=s)
                self.users.append(u)
                self._slice_users[int(s)].append(u)
                uid += 1
        self._profiles: list[SliceTrafficProfile] = list(config.profiles)
        self._sigma: list[float] = [config.fading_sigma] * 3
        self._rr_rotation = [0, 0, 0]
        self._last_action = baseline_action(config.total_prbs)
        self._injections: list[DriftInjection] = []
        self.window_id = 0
        self.rejected_actions = 0

    def inject_drift(self, spec: DriftInjection) -> None:
        """Register a parameter scaling that takes effect at spec.start_window."""
        self._injections.append(spec)

    def _apply_due_injections(self) -> None:
        due = [i for i in self._injections if i.start_window <= self.window_id]
        for inj in due:
            self._injections.remove(inj)
            si = int(inj.slice)
            if inj.parameter == "fading_sigma":
                self._sigma[si] *= inj.multiplier
                continue
            prof = self._profiles[si]
            value = getattr(prof, inj.parameter)
            if inj.parameter == "packet_size_bytes":
                value = max(1, int(round(value * inj.multiplier)))
            elif inj.parameter in ("burst_on_prob", "burst_off_prob"):
                value = min(1.0, value * inj.multiplier)
            else:
                value = value * inj.multiplier
            self._profiles[si] = replace(prof, **{inj.parameter: value})

    def run_window(self, action: SlicingAction) -> KpiReport:
        """Advance one control window under the given action and report KPIs.

        An invalid action is rejected (counted) and the previous valid action is
        kept, mirroring a RIC that drops a bad control message without stalling.
        """
        cfg = self.config
        if validate_action(action, cfg.total_prbs):
            self.rejected_actions += 1
            action = self._last_action
        else:
            self._last_action = action
        self._apply_due_injections()

        T = cfg.tti_per_window
        window_seconds = cfg.window_seconds
        window_scale = 1.0 / (window_seconds * 1e6)
        rng = self._rng

        slice_ctx = []
        for s in SLICES:
            users = self._slice_users[int(s)]
            n = len(users)
            prof = self._profiles[int(s)]
            sigma = self._sigma[int(s)]
            z = rng.standard_normal(n)
            for u, zi in zip(users, z):
                u.spectral_eff = min(max(SE_MEDIAN * math.exp(sigma * zi), SE_MIN), SE_MAX)
                u.window_served_bits = 0
                u.window_packets = 0
                u.window_arrived_bits = 0
            lam = prof.packets_per_tti
            if lam > 0:
                pkt_rows = rng.poisson(lam, size=(T, n)).tolist()
            else:
                pkt_rows = None
            bursty = prof.burst_on_prob > 0 or prof.burst_off_prob > 0
            if bursty:
                u01 = rng.random((T, n))
                mask_rows = []
                state = [u.burst_on for u in users]
                for t in range(T):
                    mask_rows.append(list(state))
                    row = u01[t]
                    for i in range(n):
                        if state[i]:
                            if row[i] < prof.burst_on_prob:
                                state[i] = False
                        elif row[i] < prof.burst_off_prob:
                            state[i] = True
                for u, st in zip(users, state):
                    u.burst_on = bool(st)
            else:
                mask_rows = None
            alloc = action.for_slice(s)
            slice_ctx.append(
                {
                    "users": users,
                    "pkt_rows": pkt_rows,
                    "mask_rows": mask_rows,
                    "pkt_bits": prof.packet_size_bytes * 8,
                    "prbs": alloc.prbs,
                    "scheduler": alloc.scheduler,
                    "index": int(s),
                }
            )

        for t in range(T):
            for ctx in slice_ctx:
                users = ctx["users"]
                pkt_bits = ctx["pkt_bits"]
                rows = ctx["pkt_rows"]
                if rows is not None:
                    counts = rows[t]
                    mask = ctx["mask_rows"][t] if ctx["mask_rows"] is not None else None
                    for i, u in enumerate(users):
                        c = counts[i]
                        if c and (mask is None and u.burst_on or mask is not None and mask[i]):
                            u.queue.enqueue(c, pkt_bits)
                            u.window_arrived_bits += c * pkt_bits
                prbs = ctx["prbs"]
                if prbs <= 0:
                    continue
                backlogged = [u for u in users if u.queue.bits > 0]
                if not backlogged:
                    continue
                sched = ctx["scheduler"]
                if sched is SchedulerPolicy.RR:
                    grants = schedule_rr(backlogged, prbs, self._rr_rotation[ctx["index"]])
                    self._rr_rotation[ctx["index"]] += 1
                elif sched is SchedulerPolicy.WF:
                    grants = schedule_wf(backlogged, prbs)
                else:
                    grants = schedule_pf(backlogged, prbs, window_scale)
                for u, g in zip(backlogged, grants):
                    if g:
                        served, completed = u.queue.serve(int(g * u.spectral_eff))
                        u.window_served_bits += served
                        u.window_packets += completed

        kpis = []
        for u in self.users:
            bitrate = u.window_served_bits / window_seconds / 1e6
            kpis.append(
                UserKpi(
                    user_id=u.user_id,
                    slice=u.slice,
                    tx_bitrate_mbps=bitrate,
                    tx_packets=u.window_packets,
                    dl_buffer_bytes=u.queue.bits // 8,
                    window_id=self.window_id,
                )
            )
            u.ema_throughput_mbps = (1 - PF_BETA) * u.ema_throughput_mbps + PF_BETA * bitrate
        report = KpiReport(window_id=self.window_id, users=tuple(kpis))
        self.window_id += 1
        return report


def baseline_action(
    total_prbs: int, scheduler: SchedulerPolicy = SchedulerPolicy.RR
) -> SlicingAction:
    """Static equal split (remainder to the earlier slices) with one scheduler."""
    base, rem = divmod(total_prbs, 3)
    shares = [base + (1 if i < rem else 0) for i in range(3)]
    return SlicingAction(
        embb=SliceAllocation(shares[0], scheduler),
        mmtc=SliceAllocation(shares[1], scheduler),
        urllc=SliceAllocation(shares[2], scheduler),
    )
