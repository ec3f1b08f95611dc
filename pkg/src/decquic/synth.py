"""Deterministic synthetic QUIC-like traces with per-server behavior profiles.

Each trace is built from a per-window response process: the trace duration is
cut into segments one window long, a response count is drawn per segment from
the profile's count distribution, and events are placed jittered-stratified
inside the segment (a piecewise-inhomogeneous point process whose per-window
counts are exactly the drawn values).  Every response event is preceded by a
client request packet about one RTT earlier and followed by a server packet
burst starting exactly at the event time, so labels stay recoverable from the
images.  ACK-sized background packets flow in both directions throughout.

All randomness comes from a counter-based Philox stream keyed on
(seed, trace index); generation is byte-deterministic and order-independent,
so traces may be produced in parallel.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .trace import ManifestRow, PacketRecord, ResponseEvent, Trace, save_trace, write_manifest

MIN_PACKET_LEN = 60  # keeps length bin 0 empty for N=32 grids (dl = 46.875)
MAX_PACKET_LEN = 1500
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class CountDist:
    """Distribution of response starts per window: pmf[k] = P(count == k)."""

    pmf: tuple[float, ...]

    def __post_init__(self) -> None:
        p = np.asarray(self.pmf, dtype=np.float64)
        if p.size < 1 or (p < 0).any():
            raise ConfigError("count pmf must be nonempty and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ConfigError(f"count pmf must sum to 1, got {p.sum()}")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.pmf), p=np.asarray(self.pmf)))

    @property
    def mean(self) -> float:
        return float(np.arange(len(self.pmf)) @ np.asarray(self.pmf))


@dataclass(frozen=True)
class LengthDist:
    """Response packet lengths: near-MTU with probability full_frac, else mid-sized."""

    full_frac: float = 0.75
    full_range: tuple[int, int] = (1200, 1500)
    partial_range: tuple[int, int] = (300, 1199)

    def __post_init__(self) -> None:
        if not (0.0 <= self.full_frac <= 1.0):
            raise ConfigError("full_frac must be in [0, 1]")
        for lo, hi in (self.full_range, self.partial_range):
            if lo > hi or lo < MIN_PACKET_LEN or hi > MAX_PACKET_LEN:
                raise ConfigError(f"length range must lie in [{MIN_PACKET_LEN}, {MAX_PACKET_LEN}]")

    def sample(self, rng: np.random.Generator) -> int:
        lo, hi = self.full_range if rng.random() < self.full_frac else self.partial_range
        return int(rng.integers(lo, hi + 1))


@dataclass(frozen=True)
class BurstDist:
    """Packets per response burst, uniform over [lo, hi]."""

    lo: int = 5
    hi: int = 12

    def __post_init__(self) -> None:
        if self.lo < 1 or self.lo > self.hi:
            raise ConfigError("burst size range must satisfy 1 <= lo <= hi")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi + 1))


@dataclass(frozen=True)
class ServerProfile:
    """Behavioral knobs for one synthetic web server."""

    profile_id: str
    rtt_s: float = 0.03
    jitter_s: float = 0.002
    response_len_dist: LengthDist = LengthDist()
    burst_size_dist: BurstDist = BurstDist()
    responses_per_window_dist: CountDist = CountDist((1.0,))
    segment_s: float = 0.3  # window length the count distribution refers to
    burst_spacing_s: float = 0.001
    background_rate_hz: float = 40.0  # per direction
    request_len_range: tuple[int, int] = (250, 700)

    def __post_init__(self) -> None:
        if self.rtt_s <= 0:
            raise ConfigError("rtt_s must be > 0")
        if self.jitter_s < 0:
            raise ConfigError("jitter_s must be >= 0")
        if self.segment_s <= 0:
            raise ConfigError("segment_s must be > 0")
        if self.burst_spacing_s <= 0:
            raise ConfigError("burst_spacing_s must be > 0")
        if self.background_rate_hz < 0:
            raise ConfigError("background_rate_hz must be >= 0")
        lo, hi = self.request_len_range
        if lo > hi or lo < MIN_PACKET_LEN or hi > MAX_PACKET_LEN:
            raise ConfigError(f"request_len_range must lie in [{MIN_PACKET_LEN}, {MAX_PACKET_LEN}]")


@dataclass(frozen=True)
class GenConfig:
    seed: int
    n_traces: int
    profiles: tuple[ServerProfile, ...]
    trace_duration_s: float = 3.0

    def __post_init__(self) -> None:
        if self.n_traces < 1:
            raise ConfigError("n_traces must be >= 1")
        if not self.profiles:
            raise ConfigError("at least one profile is required")
        if self.trace_duration_s <= 0:
            raise ConfigError("trace_duration_s must be > 0")


def stream_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Philox generator keyed on (seed, index); independent per-index streams."""
    key = np.array([seed & _MASK64, index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _q(t: float) -> float:
    """Quantize a time to 9 decimals so serialization round-trips exactly."""
    return round(t, 9)


def generate_trace(
    profile: ServerProfile,
    seed: int,
    duration_s: float,
    trace_id: str | None = None,
    stream_index: int = 0,
) -> Trace:
    """One synthetic trace; byte-deterministic for fixed arguments."""
    if duration_s <= 0:
        raise ConfigError("duration_s must be > 0")
    rng = stream_rng(seed, stream_index)
    if trace_id is None:
        trace_id = f"{profile.profile_id}-s{seed & _MASK64:x}"

    packets: list[PacketRecord] = []
    events: list[ResponseEvent] = []

    # connection setup: padded client initial, server reply one RTT later
    packets.append(PacketRecord(t=0.0, len=1252, dir="c2s"))
    packets.append(PacketRecord(t=_q(min(profile.rtt_s, duration_s)), len=1252, dir="s2c"))

    n_seg = max(1, math.ceil(duration_s / profile.segment_s))
    for k in range(n_seg):
        seg_start = k * profile.segment_s
        seg_len = min(profile.segment_s, duration_s - seg_start)
        if seg_len <= 0:
            break
        count = profile.responses_per_window_dist.sample(rng)
        for m in range(count):
            # stratified placement keeps concurrent responses separated in time
            t_e = _q(seg_start + (m + rng.uniform(0.15, 0.85)) * seg_len / count)
            events.append(ResponseEvent(t=t_e))

            t_req = t_e - profile.rtt_s + rng.normal(0.0, profile.jitter_s)
            t_req = _q(min(max(t_req, 0.0), max(t_e - 1e-6, 0.0)))
            packets.append(
                PacketRecord(
                    t=t_req,
                    len=int(rng.integers(profile.request_len_range[0], profile.request_len_range[1] + 1)),
                    dir="c2s",
                )
            )

            t_pkt = t_e
            for b in range(profile.burst_size_dist.sample(rng)):
                if b > 0:
                    gap = float(np.clip(rng.exponential(profile.burst_spacing_s), 2e-4, 4e-3))
                    t_pkt += gap
                packets.append(
                    PacketRecord(t=_q(t_pkt), len=profile.response_len_dist.sample(rng), dir="s2c")
                )

    for direction in ("c2s", "s2c"):
        n_bg = int(rng.poisson(profile.background_rate_hz * duration_s))
        times = rng.uniform(0.0, duration_s, size=n_bg)
        lens = rng.integers(60, 81, size=n_bg)
        for t, ln in zip(times, lens):
            packets.append(PacketRecord(t=_q(float(t)), len=int(ln), dir=direction))

    packets.sort(key=lambda p: p.t)
    events.sort(key=lambda e: e.t)
    trace = Trace(trace_id=trace_id, server_id=profile.profile_id, packets=packets, events=events)
    trace.validate()
    return trace


def _gen_one(args) -> ManifestRow:
    config, index, out_dir = args
    profile = config.profiles[index % len(config.profiles)]
    trace = generate_trace(
        profile,
        seed=config.seed,
        duration_s=config.trace_duration_s,
        trace_id=f"{profile.profile_id}-{index:05d}",
        stream_index=index,
    )
    return save_trace(trace, out_dir)


def generate_dataset(config: GenConfig, out_dir: Path | str, workers: int = 1) -> Path:
    """Write n_traces traces (profiles cycled round-robin) plus manifest.csv.

    Per-trace Philox streams make the output independent of worker count.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(config, i, out_dir) for i in range(config.n_traces)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_gen_one, tasks, chunksize=16))
    else:
        rows = [_gen_one(t) for t in tasks]
    manifest = out_dir / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def truncated_poisson_pmf(mean: float, max_count: int) -> tuple[float, ...]:
    """Poisson(mean) truncated to 0..max_count and renormalized."""
    if mean < 0 or max_count < 0:
        raise ConfigError("mean and max_count must be >= 0")
    if mean == 0:
        p = np.zeros(max_count + 1)
        p[0] = 1.0
    else:
        ks = np.arange(max_count + 1)
        logp = ks * np.log(mean) - mean - np.array([math.lgamma(k + 1) for k in ks])
        p = np.exp(logp)
        p /= p.sum()
    return tuple(float(x) for x in p)


def long_tail_pmf(
    head: tuple[float, float] = (0.26, 0.20),
    base: float = 0.13,
    decay: float = 0.85,
    overflow: float = 0.001,
) -> tuple[float, ...]:
    """Skewed count pmf over 0..22: heavy head, geometric tail past class 2.

    Frequencies decrease monotonically beyond class 2; a sliver of mass sits
    on 21/22 so downstream label exclusion has something to exclude.
    """
    p = np.zeros(23)
    p[0], p[1] = head
    for k in range(2, 21):
        p[k] = base * decay ** (k - 2)
    p[21] = p[22] = overflow
    p /= p.sum()
    return tuple(float(x) for x in p)


def full_range_profiles() -> tuple[ServerProfile, ...]:
    """Six server profiles whose windows jointly cover every class 0..20.

    Each profile draws per-window counts from a long-tailed distribution, so
    the label histogram is skewed like real capture data while still giving
    minority classes enough mass to train and test imbalance handling.
    """
    specs = [
        ("srv-alder", 0.018, 0.0010, 0.85, (0.26, 0.20), 0.13, 0.86, (5, 12), 0.0008, 45.0),
        ("srv-birch", 0.032, 0.0015, 0.70, (0.30, 0.18), 0.12, 0.84, (4, 10), 0.0012, 30.0),
        ("srv-cedar", 0.055, 0.0025, 0.80, (0.22, 0.20), 0.14, 0.87, (6, 14), 0.0010, 55.0),
        ("srv-dogwood", 0.012, 0.0008, 0.90, (0.28, 0.22), 0.12, 0.85, (5, 9), 0.0006, 25.0),
        ("srv-elm", 0.040, 0.0020, 0.60, (0.24, 0.18), 0.14, 0.88, (7, 15), 0.0015, 60.0),
        ("srv-fir", 0.025, 0.0012, 0.75, (0.32, 0.20), 0.11, 0.86, (4, 11), 0.0009, 40.0),
    ]
    profiles = []
    for pid, rtt, jitter, full_frac, head, base, decay, burst, spacing, bg in specs:
        profiles.append(
            ServerProfile(
                profile_id=pid,
                rtt_s=rtt,
                jitter_s=jitter,
                response_len_dist=LengthDist(full_frac=full_frac),
                burst_size_dist=BurstDist(*burst),
                responses_per_window_dist=CountDist(long_tail_pmf(head=head, base=base, decay=decay)),
                burst_spacing_s=spacing,
                background_rate_hz=bg,
            )
        )
    return tuple(profiles)


PRESETS = {"full-range": full_range_profiles}
