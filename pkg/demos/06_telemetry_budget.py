"""Resource snapshots, pluggable power providers, and the budget envelope.

Run: python3 demos/06_telemetry_budget.py
"""

import tempfile
from pathlib import Path

from microvlm.telemetry import (
    BudgetEnvelope, FileProvider, GenerationCounters, NoneProvider,
    SimProvider, aggregate_run, check_budget, sample,
)

counters = GenerationCounters()
for _ in range(30):
    counters.on_token()

print("== provider NONE: power/utilization absent, not zero ==")
snap = sample(NoneProvider(), counters)
print(snap.to_dict())

print("\n== provider SIM at an edge-device operating point ==")
snap = sample(SimProvider(18.9, 62.0), counters)
print(f"power {snap.power_w} W, utilization {snap.utilization_pct}%")
print("verdicts vs default envelope:", check_budget(snap, BudgetEnvelope()))

print("\n== provider FILE re-reads a sysfs-style sensor every sample ==")
sensor = Path(tempfile.mkstemp(suffix=".txt")[1])
sensor.write_text("power_w=29.5\nutil_pct=93\n")
provider = FileProvider(sensor)
print("reading 1:", provider.read())
sensor.write_text("power_w=31.0\nutil_pct=97\n")
print("reading 2:", provider.read())
over = sample(provider, counters)
print("verdicts at 31 W:", check_budget(over, BudgetEnvelope()))

print("\n== a run report in the three-metric table shape ==")
snaps = [sample(SimProvider(p, u), counters) for p, u in
         [(15.0, 55.0), (18.9, 62.0), (25.0, 70.0)]]
report = aggregate_run(snaps)
print(report.render_table())
