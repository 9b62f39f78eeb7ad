"""Plant the command-sequence implant and watch it sit, then fire.

Runs the bundled tank controller and an injected twin side by side over
the same inputs: 20 quiet scans, then the 3-1-4 command sequence.  Until
the sequence completes the two controllers publish identical outputs;
on the completing scan the implant latches and the level tag starts
reading 4 mm high.

Usage: python3 demos/implant_tour.py
"""

import json

from llbforge import baseline_text
from llbforge.l5k import parse
from llbforge.llb import inject, preset_descriptors
from llbforge.vm import run

base = parse(baseline_text())
implanted, report = inject(base, preset_descriptors()["2"])

print("injection manifest (abridged):")
print(json.dumps({
    "added_routines": report.added_routines,
    "added_tags": report.added_tags,
    "armed_tag": report.armed_tag,
    "raloc_percent": round(report.raloc_percent, 2),
    "io_delta_bytes": report.io_delta_bytes,
}, indent=2, default=list))
print()

quiet = {0: 500, 1: 0, 2: 0, 3: 0}
trace = [dict(quiet)] * 20 + [{1: 3}, {1: 1}, {1: 4}, {1: 0}] + [{}] * 4

clean = run(base, input_trace=trace, dt_ms=100, watch=("LIT101",))
dirty = run(implanted, input_trace=trace, dt_ms=100, watch=("LIT101",))

print("scan  clean LIT101  implant LIT101  records differ?")
for c, d in zip(clean.records, dirty.records):
    lit_c = dict(c.values)["LIT101"]
    lit_d = dict(d.values)["LIT101"]
    differ = "yes" if c.values != d.values else "-"
    marker = "   <- sequence completes" if c.scan == 23 else ""
    if c.scan >= 18 or lit_c != lit_d:
        print(f"{c.scan:4}  {lit_c:12}  {lit_d:14}  {differ}{marker}")

assert clean.outputs_per_scan()[:22] == dirty.outputs_per_scan()[:22]
print("\nidentical for 22 scans, then a permanent +4 on the level input")
