"""Hand-frame to arm-command mapping.

The thumb tip (with a fixed offset in its own frame) anchors the virtual
end-effector; positional deltas are amplified by the workspace scale factor
while orientation passes through unscaled. The index-thumb pinch distance
maps linearly onto the jaw opening.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose

DEFAULT_SCALE = 6.0
JAW_ANGLE_MAX = 1.047  # rad, fully open


@dataclass(frozen=True)
class HandFrame:
    """One tracked-hand sample; only thumb tip and index tip are consumed."""

    thumb_tip: Pose
    index_tip_position: np.ndarray
    hand_id: str = "right"           # left | right
    timestamp_tick: int = 0

    def __post_init__(self):
        pos = np.asarray(self.index_tip_position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite index tip position")
        object.__setattr__(self, "index_tip_position", pos)
        if self.hand_id not in ("left", "right"):
            raise ValueError(f"hand_id must be left or right, got {self.hand_id!r}")


@dataclass(frozen=True)
class MappingSettings:
    scale: float = DEFAULT_SCALE
    anchor_offset: Pose = field(default_factory=lambda: Pose((0.0, 0.0, 0.02)))
    pinch_closed: float = 0.01       # m, jaw fully closed at or below
    pinch_open: float = 0.08         # m, jaw fully open at or above
    workspace_origin_world: tuple = (0.0, 0.0, 0.0)
    workspace_origin_hand: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not self.pinch_closed < self.pinch_open:
            raise ValueError("pinch_closed must be below pinch_open")

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "anchor_offset_pos": list(map(float, self.anchor_offset.position)),
            "anchor_offset_quat": list(map(float, self.anchor_offset.orientation)),
            "pinch_closed": self.pinch_closed,
            "pinch_open": self.pinch_open,
            "workspace_origin_world": list(map(float, self.workspace_origin_world)),
            "workspace_origin_hand": list(map(float, self.workspace_origin_hand)),
        }

    @staticmethod
    def from_dict(d: dict) -> "MappingSettings":
        return MappingSettings(
            scale=float(d["scale"]),
            anchor_offset=Pose(d["anchor_offset_pos"], d["anchor_offset_quat"]),
            pinch_closed=float(d["pinch_closed"]),
            pinch_open=float(d["pinch_open"]),
            workspace_origin_world=tuple(d["workspace_origin_world"]),
            workspace_origin_hand=tuple(d["workspace_origin_hand"]),
        )


@dataclass(frozen=True)
class ArmCommand:
    """End-effector pose target (world frame, virtual scale) plus jaw fraction."""

    ee_target: Pose
    jaw: float                       # 0 = fully closed, 1 = fully open

    def __post_init__(self):
        object.__setattr__(self, "jaw", min(1.0, max(0.0, float(self.jaw))))


def pinch_to_jaw(distance: float, settings: MappingSettings = None) -> float:
    """Linear pinch-distance to jaw-fraction map, clamped to [0, 1]."""
    s = settings or MappingSettings()
    if distance < 0:
        raise ValueError("pinch distance must be non-negative")
    frac = (distance - s.pinch_closed) / (s.pinch_open - s.pinch_closed)
    return min(1.0, max(0.0, frac))


def jaw_to_angle(jaw: float, jaw_max: float = JAW_ANGLE_MAX) -> float:
    """Jaw fraction to jaw opening angle in radians."""
    if not 0.0 <= jaw <= 1.0:
        raise ValueError(f"jaw fraction out of range: {jaw}")
    if jaw_max <= 0:
        raise ValueError("jaw_max must be positive")
    return jaw * jaw_max


def map_hand(frame: HandFrame, settings: MappingSettings = None) -> ArmCommand:
    """Anchored, scale-amplified pose target plus pinch-driven jaw command."""
    s = settings or MappingSettings()
    anchored = frame.thumb_tip.compose(s.anchor_offset)
    origin_world = np.asarray(s.workspace_origin_world, dtype=np.float64)
    origin_hand = np.asarray(s.workspace_origin_hand, dtype=np.float64)
    position = origin_world + s.scale * (anchored.position - origin_hand)
    pinch = float(np.linalg.norm(frame.index_tip_position - frame.thumb_tip.position))
    return ArmCommand(
        ee_target=Pose(position, anchored.orientation),
        jaw=pinch_to_jaw(pinch, s),
    )
