"""Closed-loop effect of a sensor-offset implant on a level-controlled tank.

The controller holds the tank between its fill and drain setpoints.  A
+4 mm sensor offset, armed by the 3-1-4 command sequence at scan 100,
makes the controller regulate a flattering lie: the plant settles 4 mm
below where the clean controller keeps it, while the trace the operator
sees looks perfectly on-setpoint.

Usage: python3 demos/closed_loop_divergence.py
"""

from llbforge import baseline_text
from llbforge.l5k import parse
from llbforge.llb import preset_descriptors
from llbforge.sim import Scenario, TankModel, run_scenario

tank = TankModel(level_mm=280.0, area_cm2=5000.0, inflow_lpm=2.0,
                 outflow_lpm=2.0, capacity_mm=1200.0,
                 level_hi_mm=950.0, level_lo_mm=25.0)
sequence = ((100, 1, 3), (101, 1, 1), (102, 1, 4), (103, 1, 0))
common = dict(project=parse(baseline_text()), tank=tank,
              level_channel=0, pump_channel=0, valve_channel=1,
              duration_scans=500, dt_ms=60000,
              trigger_schedule=sequence, watch=("LevelEng",))

clean = run_scenario(Scenario(**common))
dirty = run_scenario(Scenario(attack=preset_descriptors()["2"], **common))

print("events (attacked run):", dirty.events)
print()
print("scan   controller view   true level (clean)   true level (attacked)")
for n in (50, 99, 105, 150, 300, 500):
    rec = dirty.records[n - 1]
    view = dict(rec.values)["LevelEng"]
    print(f"{n:4}   {view:15}   {clean.tank_levels[n - 1]:18.1f}"
          f"   {dirty.tank_levels[n - 1]:21.1f}")

gap = clean.tank_levels[-1] - dirty.tank_levels[-1]
print(f"\nsteady-state gap the operator never sees: {gap:.1f} mm")
