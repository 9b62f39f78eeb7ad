"""llbforge: a ladder-logic security workbench.

Parse a small controller-export dialect, run it on a deterministic
scan-cycle VM, inject classified logic bombs, quantify their footprint,
drive a closed-loop tank process, validate running logic against a golden
store, and verify signed firmware bundles.
"""

from importlib import resources

from .model import (  # noqa: F401
    DiffReport,
    LadderError,
    MemoryReport,
    Project,
    diff,
    memory_report,
    normalize,
    raloc,
)
from .l5k import parse, serialize, extract_serial  # noqa: F401

__version__ = "0.1.0"


def baseline_text() -> str:
    """Source text of the bundled tank-stage baseline project."""
    return (
        resources.files(__name__).joinpath("data/baseline.l5k").read_text("utf-8")
    )


def baseline_project() -> Project:
    return parse(baseline_text())
