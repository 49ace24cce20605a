"""Resource telemetry against a deployment budget envelope.

Snapshots combine process-local counters (peak RSS, cumulative tokens,
tokens/s, last-token latency) with an optional external power/utilization
provider. Providers are pluggable because the desk machine has no power
sensor: FILE emulates a sysfs-style reading re-read on every sample, SIM
returns constants for deterministic tests, NONE reports nothing. A failing
sensor flags a warning on the snapshot instead of killing inference.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

GIB = 2 ** 30


@dataclass(frozen=True)
class BudgetEnvelope:
    """Operational limits a deployment target must satisfy."""
    power_min_w: float = 10.0
    power_max_w: float = 30.0
    memory_budget_bytes: int = 32 * GIB
    utilization_target_pct: float = 100.0

    def __post_init__(self):
        if not self.power_min_w < self.power_max_w:
            raise ValueError(
                f"power_min_w {self.power_min_w} must be below power_max_w {self.power_max_w}")
        if self.memory_budget_bytes <= 0:
            raise ValueError("memory_budget_bytes must be positive")


@dataclass
class TelemetrySnapshot:
    timestamp_ms: float
    rss_bytes: int
    tokens_generated: int
    tokens_per_second: float
    last_token_latency_ms: float | None = None
    power_w: float | None = None
    utilization_pct: float | None = None
    sensor_warning: bool = False

    def to_dict(self) -> dict:
        """JSON form; optional fields are omitted when absent, never zeroed."""
        out = {
            "timestamp_ms": self.timestamp_ms,
            "rss_bytes": self.rss_bytes,
            "tokens_generated": self.tokens_generated,
            "tokens_per_second": self.tokens_per_second,
        }
        if self.last_token_latency_ms is not None:
            out["last_token_latency_ms"] = self.last_token_latency_ms
        if self.power_w is not None:
            out["power_w"] = self.power_w
        if self.utilization_pct is not None:
            out["utilization_pct"] = self.utilization_pct
        if self.sensor_warning:
            out["sensor_warning"] = True
        return out


# ---------------------------------------------------------------------------
# power / utilization providers
# ---------------------------------------------------------------------------

class PowerProvider:
    """Yields (power_w, utilization_pct) on demand, or None when unavailable."""

    name = "none"

    def read(self) -> tuple[float, float] | None:
        return None


class NoneProvider(PowerProvider):
    name = "none"


class SimProvider(PowerProvider):
    """Constant readings, for tests and demos."""

    name = "sim"

    def __init__(self, power_w: float, utilization_pct: float):
        self.power_w = float(power_w)
        self.utilization_pct = float(utilization_pct)

    def read(self) -> tuple[float, float]:
        return self.power_w, self.utilization_pct


class FileProvider(PowerProvider):
    """Re-reads a two-line text file on every sample, like a sysfs sensor.

    Expected contents: "power_w=<float>" and "util_pct=<float>" lines.
    """

    name = "file"

    def __init__(self, path):
        self.path = Path(path)

    def read(self) -> tuple[float, float]:
        fields = {}
        for line in self.path.read_text().splitlines():
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            fields[key.strip()] = float(value.strip())
        return fields["power_w"], fields["util_pct"]


def parse_provider_spec(spec: str) -> PowerProvider:
    """CLI/env syntax: none | sim:<watts>,<pct> | file:<path>."""
    if spec == "none":
        return NoneProvider()
    if spec.startswith("sim:"):
        try:
            watts, pct = spec[4:].split(",")
            return SimProvider(float(watts), float(pct))
        except ValueError as exc:
            raise ValueError(f"bad sim provider spec '{spec}', expected sim:<w>,<pct>") from exc
    if spec.startswith("file:"):
        return FileProvider(spec[5:])
    raise ValueError(f"unknown power provider '{spec}'")


# ---------------------------------------------------------------------------
# counters and sampling
# ---------------------------------------------------------------------------

def read_peak_rss_bytes() -> int:
    """Process resident-set high-water mark, via one narrow platform probe."""
    try:
        with open("/proc/self/status") as f:
            for line in f:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    import resource
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


class GenerationCounters:
    """Token counters shared between generation threads and the sampler.

    Rates come from fixed-width time buckets, so on_token stays O(1) and a
    window query is O(n_buckets) at any token rate.
    """

    BUCKET_S = 0.1
    N_BUCKETS = 128  # 12.8 s of history

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0
        self._buckets = [0] * self.N_BUCKETS
        self._bucket_epoch = 0  # absolute index of the current bucket
        self._last_time: float | None = None
        self._last_gap_ms: float | None = None

    def _advance(self, now: float) -> None:
        epoch = int(now / self.BUCKET_S)
        if epoch != self._bucket_epoch:
            behind = min(epoch - self._bucket_epoch, self.N_BUCKETS)
            for i in range(1, behind + 1):
                self._buckets[(self._bucket_epoch + i) % self.N_BUCKETS] = 0
            self._bucket_epoch = epoch

    def on_token(self, _token_id: int | None = None) -> None:
        now = time.monotonic()
        with self._lock:
            self._advance(now)
            self._buckets[self._bucket_epoch % self.N_BUCKETS] += 1
            self._total += 1
            if self._last_time is not None:
                self._last_gap_ms = (now - self._last_time) * 1000.0
            self._last_time = now

    @property
    def tokens_total(self) -> int:
        with self._lock:
            return self._total

    def rate_over_window(self, window_s: float = 1.0) -> float:
        now = time.monotonic()
        n_buckets = max(1, min(int(window_s / self.BUCKET_S), self.N_BUCKETS))
        with self._lock:
            if self._total == 0:
                return 0.0
            self._advance(now)
            recent = sum(self._buckets[(self._bucket_epoch - i) % self.N_BUCKETS]
                         for i in range(n_buckets))
        return recent / (n_buckets * self.BUCKET_S)

    @property
    def last_token_latency_ms(self) -> float | None:
        with self._lock:
            return self._last_gap_ms


def sample(provider: PowerProvider, counters: GenerationCounters,
           window_s: float = 1.0) -> TelemetrySnapshot:
    """One snapshot; a failing provider sets a warning instead of raising."""
    power = util = None
    warning = False
    try:
        reading = provider.read()
        if reading is not None:
            power, util = reading
    except Exception:
        warning = True
    return TelemetrySnapshot(
        timestamp_ms=time.time() * 1000.0,
        rss_bytes=read_peak_rss_bytes(),
        tokens_generated=counters.tokens_total,
        tokens_per_second=counters.rate_over_window(window_s),
        last_token_latency_ms=counters.last_token_latency_ms,
        power_w=power,
        utilization_pct=util,
        sensor_warning=warning,
    )


# ---------------------------------------------------------------------------
# budget verdicts and run aggregation
# ---------------------------------------------------------------------------

OK = "OK"
OVER_POWER = "OVER_POWER"
UNDER_POWER = "UNDER_POWER"
OVER_MEMORY = "OVER_MEMORY"


def check_budget(snapshot: TelemetrySnapshot, envelope: BudgetEnvelope) -> set[str]:
    """Every violated bound, or {OK}. Bounds are inclusive; absent power
    yields no power verdicts."""
    verdicts: set[str] = set()
    if snapshot.power_w is not None:
        if snapshot.power_w > envelope.power_max_w:
            verdicts.add(OVER_POWER)
        if snapshot.power_w < envelope.power_min_w:
            verdicts.add(UNDER_POWER)
    if snapshot.rss_bytes > envelope.memory_budget_bytes:
        verdicts.add(OVER_MEMORY)
    return verdicts or {OK}


@dataclass
class RunReport:
    """Aggregates over a run's snapshots, with the envelope as the expectation."""
    n_snapshots: int
    tokens_total: int
    tokens_per_second_mean: float
    peak_memory_bytes: int
    power_mean_w: float | None
    power_max_w: float | None
    utilization_mean_pct: float | None
    verdicts: list[str]
    envelope: BudgetEnvelope = field(default_factory=BudgetEnvelope)

    def to_dict(self) -> dict:
        out = {
            "n_snapshots": self.n_snapshots,
            "tokens_total": self.tokens_total,
            "tokens_per_second_mean": self.tokens_per_second_mean,
            "peak_memory_bytes": self.peak_memory_bytes,
            "verdicts": self.verdicts,
            "envelope": {
                "power_min_w": self.envelope.power_min_w,
                "power_max_w": self.envelope.power_max_w,
                "memory_budget_bytes": self.envelope.memory_budget_bytes,
                "utilization_target_pct": self.envelope.utilization_target_pct,
            },
        }
        if self.power_mean_w is not None:
            out["power_mean_w"] = self.power_mean_w
            out["power_max_w"] = self.power_max_w
        if self.utilization_mean_pct is not None:
            out["utilization_mean_pct"] = self.utilization_mean_pct
        return out

    def render_table(self) -> str:
        """The three-row metric table: utilization, power, memory."""
        env = self.envelope

        def fmt(v, unit=""):
            return f"{v:.1f}{unit}" if v is not None else "n/a"
        rows = [
            ("Utilization (%)", fmt(self.utilization_mean_pct),
             f"close to {env.utilization_target_pct:.0f}"),
            ("Power (W)", fmt(self.power_mean_w),
             f"{env.power_min_w:.0f}-{env.power_max_w:.0f}"),
            ("Memory (GiB)", f"{self.peak_memory_bytes / GIB:.1f}",
             f"{env.memory_budget_bytes / GIB:.0f}"),
        ]
        out = [f"{'Metric':<20}{'Measured':>12}{'Expected':>16}"]
        out.append("-" * len(out[0]))
        for name, measured, expected in rows:
            out.append(f"{name:<20}{measured:>12}{expected:>16}")
        out.append(f"verdicts: {', '.join(self.verdicts)}")
        return "\n".join(out) + "\n"


def aggregate_run(snapshots: list[TelemetrySnapshot],
                  envelope: BudgetEnvelope | None = None) -> RunReport:
    """Fold snapshots into a RunReport; aggregates are exact recomputations."""
    if not snapshots:
        raise ValueError("aggregate_run: no snapshots")
    envelope = envelope or BudgetEnvelope()
    powers = [s.power_w for s in snapshots if s.power_w is not None]
    utils = [s.utilization_pct for s in snapshots if s.utilization_pct is not None]
    verdicts: set[str] = set()
    for s in snapshots:
        verdicts |= check_budget(s, envelope) - {OK}
    return RunReport(
        n_snapshots=len(snapshots),
        tokens_total=max(s.tokens_generated for s in snapshots),
        tokens_per_second_mean=sum(s.tokens_per_second for s in snapshots) / len(snapshots),
        peak_memory_bytes=max(s.rss_bytes for s in snapshots),
        power_mean_w=sum(powers) / len(powers) if powers else None,
        power_max_w=max(powers) if powers else None,
        utilization_mean_pct=sum(utils) / len(utils) if utils else None,
        verdicts=sorted(verdicts) if verdicts else [OK],
        envelope=envelope,
    )


class TelemetrySampler:
    """Periodic sampler thread feeding a bounded snapshot queue.

    Generation threads only touch the counters; readers never block token
    production.
    """

    def __init__(self, provider: PowerProvider | None = None,
                 counters: GenerationCounters | None = None,
                 interval_s: float = 0.1, capacity: int = 600):
        self.provider = provider or NoneProvider()
        self.counters = counters or GenerationCounters()
        self.interval_s = interval_s
        self.snapshots: deque[TelemetrySnapshot] = deque(maxlen=capacity)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def sample_once(self) -> TelemetrySnapshot:
        snap = sample(self.provider, self.counters)
        self.snapshots.append(snap)
        return snap

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()

        def loop():
            while not self._stop.wait(self.interval_s):
                self.sample_once()

        self._thread = threading.Thread(target=loop, name="telemetry-sampler", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join(timeout=2.0)
        self._thread = None

    def latest(self) -> TelemetrySnapshot | None:
        return self.snapshots[-1] if self.snapshots else None

    def report(self, envelope: BudgetEnvelope | None = None) -> RunReport | None:
        snaps = list(self.snapshots)
        return aggregate_run(snaps, envelope) if snaps else None
