"""Desk-scale teleoperation data-collection engine.

Hand-gesture targets are mapped to a simulated instrument end-effector,
solved to joint states, stepped through a deterministic 72 Hz task world,
recorded as line-delimited JSON session logs, and replayed post-hoc for
multi-view image export and throughput reports.
"""

__version__ = "0.1.0"

PROTOCOL_VERSION = "1"
TICK_RATE_HZ = 72.0
DT = 1.0 / 72.0
DEFAULT_SCALE = 6.0
