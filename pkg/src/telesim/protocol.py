"""Wire and session-log codecs.

Canonical JSON everywhere: fixed key order, positions/quaternions/jaw at 5
decimal places, no insignificant whitespace. A session log is line-delimited
JSON: one header line, one line per frame (the tick's effective input packet
plus the resulting state packet), and a terminal line carrying the outcome.

Decoding canonicalizes: float fields are re-quantized to the wire precision,
so a decoded packet re-encodes to identical bytes and the engine consumes
exactly what a later replay will read back.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional

from .geometry import Pose
from .mapping import ArmCommand

PROTOCOL_VERSION = "1"
FORMAT_VERSION = 1

ARM_IDS = ("psm1", "psm2")

INPUT_MIN_BYTES = 80
INPUT_MAX_BYTES = 300

# decoded quaternions: deviation from unit norm at or below quantization
# noise is kept verbatim, renormalized up to the reject threshold
QUAT_KEEP_TOL = 2e-5
QUAT_REJECT_TOL = 1e-3

_COORD_BOUND = 1000.0


class ProtocolError(ValueError):
    pass


class PacketSizeError(ProtocolError):
    pass


def fmt5(x: float) -> str:
    """Canonical 5-decimal rendering of a wire float."""
    x = float(x)
    if not math.isfinite(x):
        raise ProtocolError("non-finite value in packet")
    if abs(x) >= _COORD_BOUND:
        raise ProtocolError(f"wire value out of range: {x!r}")
    return f"{x:.5f}"


def quant5(x: float) -> float:
    """The float a canonical encoding of x parses back to."""
    return float(fmt5(x))


@dataclass(frozen=True)
class ArmTarget:
    """One arm's slice of an input packet."""

    arm_id: str
    pos: tuple
    quat: tuple                    # (w, x, y, z)
    jaw: float

    def target_pose(self) -> Pose:
        """Semantic pose; normalizes quantization noise on the quaternion."""
        return Pose(self.pos, self.quat)

    def command(self) -> ArmCommand:
        return ArmCommand(ee_target=self.target_pose(), jaw=self.jaw)

    @staticmethod
    def from_command(arm_id: str, cmd: ArmCommand) -> "ArmTarget":
        return ArmTarget(
            arm_id=arm_id,
            pos=tuple(quant5(v) for v in cmd.ee_target.position),
            quat=tuple(quant5(v) for v in cmd.ee_target.orientation),
            jaw=quant5(cmd.jaw),
        )


@dataclass(frozen=True)
class InputPacket:
    tick: int
    arms: tuple                    # 1-2 ArmTarget records


@dataclass(frozen=True)
class ArmStateWire:
    arm_id: str
    q: tuple
    jaw: float
    pos: tuple
    quat: tuple


@dataclass(frozen=True)
class EntityPoseWire:
    entity_id: str
    pos: tuple
    quat: tuple


@dataclass(frozen=True)
class EventWire:
    kind: str
    tick: int
    data: tuple                    # sorted ((key, value), ...) pairs

    @staticmethod
    def make(kind: str, tick: int, **data) -> "EventWire":
        items = []
        for k in sorted(data):
            v = data[k]
            items.append((k, quant5(v) if isinstance(v, float) else v))
        return EventWire(kind, tick, tuple(items))


@dataclass(frozen=True)
class StatePacket:
    tick: int
    status: str                    # running | success | failure
    arms: tuple                    # ArmStateWire records
    entities: tuple                # EntityPoseWire records changed this tick
    events: tuple                  # EventWire records emitted this tick


# ---------------------------------------------------------------- encoding

def _vec(values) -> str:
    return "[" + ",".join(fmt5(v) for v in values) + "]"


def _encode_event(ev: EventWire) -> str:
    parts = []
    for k, v in ev.data:
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise ProtocolError(f"unsupported event payload value {v!r}")
        if isinstance(v, float):
            parts.append(f"{json.dumps(k)}:{fmt5(v)}")
        else:
            parts.append(f"{json.dumps(k)}:{json.dumps(v)}")
    return f'{{"kind":{json.dumps(ev.kind)},"tick":{ev.tick},"data":{{{",".join(parts)}}}}}'


def encode_input(p: InputPacket) -> bytes:
    """Canonical input-packet bytes; enforces the 80-300 byte size contract."""
    if not 1 <= len(p.arms) <= 2:
        raise ProtocolError(f"input packet needs 1-2 arms, got {len(p.arms)}")
    seen = set()
    arm_parts = []
    for arm in p.arms:
        if arm.arm_id not in ARM_IDS:
            raise ProtocolError(f"unknown arm_id {arm.arm_id!r}")
        if arm.arm_id in seen:
            raise ProtocolError(f"duplicate arm_id {arm.arm_id!r}")
        seen.add(arm.arm_id)
        arm_parts.append(
            f'{{"arm_id":{json.dumps(arm.arm_id)},"pos":{_vec(arm.pos)},'
            f'"quat":{_vec(arm.quat)},"jaw":{fmt5(arm.jaw)}}}'
        )
    if int(p.tick) < 0:
        raise ProtocolError("negative tick")
    text = f'{{"tick":{int(p.tick)},"arms":[{",".join(arm_parts)}]}}'
    data = text.encode("ascii")
    if not INPUT_MIN_BYTES <= len(data) <= INPUT_MAX_BYTES:
        raise PacketSizeError(
            f"input packet is {len(data)} bytes, outside "
            f"[{INPUT_MIN_BYTES}, {INPUT_MAX_BYTES}]"
        )
    return data


def encode_state(sp: StatePacket) -> bytes:
    arms = ",".join(
        f'{{"arm_id":{json.dumps(a.arm_id)},"q":{_vec(a.q)},"jaw":{fmt5(a.jaw)},'
        f'"pos":{_vec(a.pos)},"quat":{_vec(a.quat)}}}'
        for a in sp.arms
    )
    ents = ",".join(
        f'{{"id":{json.dumps(e.entity_id)},"pos":{_vec(e.pos)},"quat":{_vec(e.quat)}}}'
        for e in sp.entities
    )
    evs = ",".join(_encode_event(ev) for ev in sp.events)
    text = (
        f'{{"tick":{int(sp.tick)},"status":{json.dumps(sp.status)},'
        f'"arms":[{arms}],"entities":[{ents}],"events":[{evs}]}}'
    )
    return text.encode("ascii")


# ---------------------------------------------------------------- decoding

def _loads(data) -> object:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8", errors="replace")
    try:
        return json.loads(data)
    except json.JSONDecodeError as e:
        if e.pos >= len(data.rstrip()):
            raise ProtocolError(f"unexpected end of input at byte {e.pos}")
        raise ProtocolError(f"malformed JSON at byte {e.pos}: {e.msg}")


def _require(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise ProtocolError(f"{ctx}: missing field {key!r}")
    return obj[key]


def _floats(raw, n: int, ctx: str) -> tuple:
    if not isinstance(raw, list) or len(raw) != n:
        raise ProtocolError(f"{ctx}: expected {n} numbers")
    out = []
    for v in raw:
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise ProtocolError(f"{ctx}: non-numeric value {v!r}")
        out.append(quant5(float(v)))
    return tuple(out)


def _canonical_quat(raw, ctx: str) -> tuple:
    q = _floats(raw, 4, ctx)
    norm = math.sqrt(sum(v * v for v in q))
    dev = abs(norm - 1.0)
    if dev <= QUAT_KEEP_TOL:
        return q
    if dev > QUAT_REJECT_TOL:
        raise ProtocolError(f"{ctx}: quaternion norm {norm:.6f} beyond tolerance")
    return tuple(quant5(v / norm) for v in q)


def _arm_target_from_obj(obj: dict) -> ArmTarget:
    if not isinstance(obj, dict):
        raise ProtocolError("arm record must be an object")
    arm_id = _require(obj, "arm_id", "arm")
    if arm_id not in ARM_IDS:
        raise ProtocolError(f"unknown arm_id {arm_id!r}")
    pos = _floats(_require(obj, "pos", f"arm {arm_id}"), 3, f"arm {arm_id} pos")
    quat = _canonical_quat(_require(obj, "quat", f"arm {arm_id}"), f"arm {arm_id} quat")
    jaw_raw = _require(obj, "jaw", f"arm {arm_id}")
    if not isinstance(jaw_raw, (int, float)) or isinstance(jaw_raw, bool) or not math.isfinite(jaw_raw):
        raise ProtocolError(f"arm {arm_id}: bad jaw value {jaw_raw!r}")
    jaw = min(1.0, max(0.0, quant5(float(jaw_raw))))
    return ArmTarget(arm_id, pos, quat, jaw)


def input_from_obj(obj) -> InputPacket:
    if not isinstance(obj, dict):
        raise ProtocolError("input packet must be a JSON object")
    tick = _require(obj, "tick", "input")
    if not isinstance(tick, int) or isinstance(tick, bool) or tick < 0:
        raise ProtocolError(f"input: bad tick {tick!r}")
    arms_raw = _require(obj, "arms", "input")
    if not isinstance(arms_raw, list) or not 1 <= len(arms_raw) <= 2:
        raise ProtocolError("input: arms must list 1-2 records")
    arms = tuple(_arm_target_from_obj(a) for a in arms_raw)
    if len({a.arm_id for a in arms}) != len(arms):
        raise ProtocolError("input: duplicate arm_id")
    return InputPacket(tick, arms)


def decode_input(data) -> InputPacket:
    return input_from_obj(_loads(data))


def _arm_state_from_obj(obj: dict) -> ArmStateWire:
    arm_id = _require(obj, "arm_id", "arm state")
    q_raw = _require(obj, "q", f"arm {arm_id}")
    if not isinstance(q_raw, list) or not q_raw:
        raise ProtocolError(f"arm {arm_id}: q must be a non-empty list")
    return ArmStateWire(
        arm_id=arm_id,
        q=_floats(q_raw, len(q_raw), f"arm {arm_id} q"),
        jaw=quant5(float(_require(obj, "jaw", f"arm {arm_id}"))),
        pos=_floats(_require(obj, "pos", f"arm {arm_id}"), 3, f"arm {arm_id} pos"),
        quat=_canonical_quat(_require(obj, "quat", f"arm {arm_id}"), f"arm {arm_id} quat"),
    )


def _event_from_obj(obj: dict) -> EventWire:
    kind = _require(obj, "kind", "event")
    tick = _require(obj, "tick", "event")
    data = obj.get("data", {})
    if not isinstance(data, dict):
        raise ProtocolError("event: data must be an object")
    items = []
    for k in sorted(data):
        v = data[k]
        items.append((k, quant5(v) if isinstance(v, float) else v))
    return EventWire(kind, int(tick), tuple(items))


def state_from_obj(obj) -> StatePacket:
    if not isinstance(obj, dict):
        raise ProtocolError("state packet must be a JSON object")
    tick = _require(obj, "tick", "state")
    status = _require(obj, "status", "state")
    if status not in ("running", "success", "failure"):
        raise ProtocolError(f"state: unknown status {status!r}")
    arms = tuple(_arm_state_from_obj(a) for a in _require(obj, "arms", "state"))
    entities = tuple(
        EntityPoseWire(
            entity_id=_require(e, "id", "entity"),
            pos=_floats(_require(e, "pos", "entity"), 3, "entity pos"),
            quat=_canonical_quat(_require(e, "quat", "entity"), "entity quat"),
        )
        for e in _require(obj, "entities", "state")
    )
    events = tuple(_event_from_obj(e) for e in _require(obj, "events", "state"))
    return StatePacket(int(tick), status, arms, entities, events)


def decode_state(data) -> StatePacket:
    return state_from_obj(_loads(data))


def canonicalize_input(p: InputPacket) -> InputPacket:
    """Fixed point of the codec: what a reader of this packet will see."""
    return decode_input(encode_input(p))


# ---------------------------------------------------------------- session log

@dataclass(frozen=True)
class SessionHeader:
    task_id: str
    seed: int
    scale: float
    dt: float
    chain_name: str
    chain_digest: str
    catalog_digest: str
    mapping: dict
    started_at: str = ""           # wall clock, informational only
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.dt <= 0:
            raise ProtocolError("dt must be positive")
        if not self.chain_digest or not self.catalog_digest:
            raise ProtocolError("header digests must be present")

    def encode(self) -> bytes:
        obj = {
            "type": "header",
            "format_version": self.format_version,
            "task_id": self.task_id,
            "seed": self.seed,
            "scale": self.scale,
            "dt": self.dt,
            "chain_name": self.chain_name,
            "chain_digest": self.chain_digest,
            "catalog_digest": self.catalog_digest,
            "mapping": {k: self.mapping[k] for k in sorted(self.mapping)},
            "started_at": self.started_at,
        }
        return json.dumps(obj, separators=(",", ":")).encode("ascii")

    @staticmethod
    def from_obj(obj: dict) -> "SessionHeader":
        for key in ("format_version", "task_id", "seed", "scale", "dt",
                    "chain_name", "chain_digest", "catalog_digest", "mapping"):
            if key not in obj:
                raise ProtocolError(f"header: missing field {key!r}")
        return SessionHeader(
            task_id=obj["task_id"],
            seed=int(obj["seed"]),
            scale=float(obj["scale"]),
            dt=float(obj["dt"]),
            chain_name=obj["chain_name"],
            chain_digest=obj["chain_digest"],
            catalog_digest=obj["catalog_digest"],
            mapping=dict(obj["mapping"]),
            started_at=obj.get("started_at", ""),
            format_version=int(obj["format_version"]),
        )


@dataclass(frozen=True)
class Frame:
    input: InputPacket
    state: StatePacket


@dataclass
class SessionLog:
    header: SessionHeader
    frames: list = field(default_factory=list)
    outcome: Optional[str] = None  # success | failure | aborted | None (unterminated)

    @property
    def duration_s(self) -> float:
        return len(self.frames) * self.header.dt


OUTCOMES = ("success", "failure", "aborted")


def frame_line(frame: Frame) -> bytes:
    return (
        b'{"type":"frame","input":' + encode_input(frame.input)
        + b',"state":' + encode_state(frame.state) + b"}"
    )


def end_line(outcome: str, tick: int) -> bytes:
    if outcome not in OUTCOMES:
        raise ProtocolError(f"unknown outcome {outcome!r}")
    return json.dumps({"type": "end", "outcome": outcome, "tick": tick},
                      separators=(",", ":")).encode("ascii")


class SessionWriter:
    """Append-only streaming writer; at most one frame is in flight."""

    def __init__(self, stream: IO[bytes], header: SessionHeader):
        self._stream = stream
        self._tick = -1
        self._closed = False
        stream.write(header.encode() + b"\n")
        stream.flush()

    def write_frame(self, frame: Frame):
        if self._closed:
            raise ProtocolError("session already terminated")
        if frame.state.tick != self._tick + 1:
            raise ProtocolError(
                f"frame tick {frame.state.tick} does not follow {self._tick}"
            )
        self._stream.write(frame_line(frame) + b"\n")
        self._stream.flush()
        self._tick = frame.state.tick

    def close(self, outcome: str):
        if self._closed:
            return
        self._stream.write(end_line(outcome, self._tick) + b"\n")
        self._stream.flush()
        self._closed = True

    @property
    def last_tick(self) -> int:
        return self._tick


def write_session(log: SessionLog, path) -> None:
    with open(path, "wb") as f:
        w = SessionWriter(f, log.header)
        for frame in log.frames:
            w.write_frame(frame)
        w.close(log.outcome or "aborted")


def iter_session_lines(path) -> Iterator[bytes]:
    with open(path, "rb") as f:
        for line in f:
            line = line.strip()
            if line:
                yield line


def read_session(source) -> SessionLog:
    """Strict reader: header first, strictly consecutive ticks, one end line."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        lines: Iterable[bytes] = iter_session_lines(source)
    else:
        lines = source
    header = None
    frames = []
    outcome = None
    expected_tick = 0
    for line in lines:
        obj = _loads(line)
        if not isinstance(obj, dict) or "type" not in obj:
            raise ProtocolError("session line without a type")
        kind = obj["type"]
        if kind == "header":
            if header is not None:
                raise ProtocolError("duplicate header")
            header = SessionHeader.from_obj(obj)
        elif kind == "frame":
            if header is None:
                raise ProtocolError("missing header")
            if outcome is not None:
                raise ProtocolError("frame after end marker")
            frame = Frame(input_from_obj(_require(obj, "input", "frame")),
                          state_from_obj(_require(obj, "state", "frame")))
            if frame.state.tick != expected_tick:
                if frame.state.tick < expected_tick:
                    raise ProtocolError(f"duplicate tick {frame.state.tick}")
                raise ProtocolError(f"tick gap: missing tick {expected_tick}")
            if frame.input.tick != frame.state.tick:
                raise ProtocolError(
                    f"frame {frame.state.tick}: input tick {frame.input.tick} mismatched"
                )
            frames.append(frame)
            expected_tick += 1
        elif kind == "end":
            if header is None:
                raise ProtocolError("missing header")
            if outcome is not None:
                raise ProtocolError("duplicate end marker")
            outcome = obj.get("outcome")
            if outcome not in OUTCOMES:
                raise ProtocolError(f"unknown outcome {outcome!r}")
        else:
            raise ProtocolError(f"unknown line type {kind!r}")
    if header is None:
        raise ProtocolError("missing header")
    return SessionLog(header, frames, outcome)


# ---------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)   # (tick or None, message)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, tick, message):
        self.violations.append((tick, message))

    def __str__(self):
        if self.ok:
            return "session valid: 0 violations"
        lines = [f"{len(self.violations)} violation(s):"]
        for tick, msg in self.violations:
            where = f"tick {tick}" if tick is not None else "log"
            lines.append(f"  [{where}] {msg}")
        return "\n".join(lines)


def validate_session(source) -> ValidationReport:
    """Check every session-log invariant; findings are reported, not raised."""
    report = ValidationReport()
    if isinstance(source, SessionLog):
        _validate_log(source, report)
        return report
    try:
        lines = list(iter_session_lines(source))
    except OSError as e:
        report.add(None, f"unreadable session: {e}")
        return report
    if not lines:
        report.add(None, "missing header")
        return report
    header = None
    frames = []
    outcome = None
    expected_tick = 0
    for i, line in enumerate(lines):
        try:
            obj = _loads(line)
        except ProtocolError as e:
            report.add(None, f"line {i + 1}: {e}")
            continue
        kind = obj.get("type") if isinstance(obj, dict) else None
        if kind == "header":
            if header is not None:
                report.add(None, "duplicate header")
                continue
            if i != 0:
                report.add(None, "header is not the first line")
            try:
                header = SessionHeader.from_obj(obj)
            except ProtocolError as e:
                report.add(None, f"bad header: {e}")
        elif kind == "frame":
            if header is None:
                report.add(None, "frame before header")
            if outcome is not None:
                report.add(expected_tick, "frame after end marker")
            try:
                frame = Frame(input_from_obj(obj.get("input")),
                              state_from_obj(obj.get("state")))
            except ProtocolError as e:
                report.add(expected_tick, f"bad frame: {e}")
                expected_tick += 1
                continue
            if frame.state.tick != expected_tick:
                if frame.state.tick < expected_tick:
                    report.add(frame.state.tick, f"duplicate tick {frame.state.tick}")
                else:
                    report.add(expected_tick, f"tick gap: missing tick {expected_tick}")
                expected_tick = frame.state.tick
            frames.append(frame)
            expected_tick += 1
        elif kind == "end":
            if outcome is not None:
                report.add(None, "duplicate end marker")
            outcome = obj.get("outcome")
            if outcome not in OUTCOMES:
                report.add(None, f"unknown outcome {obj.get('outcome')!r}")
        else:
            report.add(None, f"line {i + 1}: unknown line type")
    if header is None:
        report.add(None, "missing header")
        return report
    _validate_frames(frames, outcome, report)
    return report


def _validate_log(log: SessionLog, report: ValidationReport):
    _validate_frames(log.frames, log.outcome, report)


def _validate_frames(frames, outcome, report: ValidationReport):
    grasped_ever = set()
    attached = {}
    terminal_seen = None
    for frame in frames:
        tick = frame.state.tick
        try:
            size = len(encode_input(frame.input))
        except PacketSizeError as e:
            report.add(tick, str(e))
            size = None
        except ProtocolError as e:
            report.add(tick, f"unencodable input: {e}")
            size = None
        if size is not None and not INPUT_MIN_BYTES <= size <= INPUT_MAX_BYTES:
            report.add(tick, f"input packet size {size} outside bounds")
        if terminal_seen is not None:
            report.add(tick, f"frame after terminal status at tick {terminal_seen}")
        for ev in frame.state.events:
            data = dict(ev.data)
            if ev.kind == "grasp":
                grasped_ever.add(data.get("entity"))
                attached[data.get("entity")] = data.get("arm")
            elif ev.kind in ("release", "drop"):
                if data.get("entity") not in grasped_ever:
                    report.add(tick, f"{ev.kind} of {data.get('entity')!r} without grasp")
                if ev.kind == "release":
                    attached.pop(data.get("entity"), None)
            elif ev.kind == "handover":
                attached[data.get("entity")] = data.get("to_arm")
        if frame.state.status in ("success", "failure"):
            terminal_seen = tick
    if outcome is None:
        report.add(None, "unterminated session (no end marker)")
    elif frames:
        last = frames[-1].state
        expected = {"success": "success", "failure": "failure"}.get(last.status)
        if expected is not None and outcome != expected:
            report.add(last.tick, f"outcome {outcome!r} contradicts status {last.status!r}")
        if expected is None and outcome != "aborted":
            report.add(last.tick, f"outcome {outcome!r} but session never reached a terminal status")


# ---------------------------------------------------------------- state view

class StateView:
    """Client-side reconstruction of the full scene from state-packet deltas."""

    def __init__(self):
        self.tick = -1
        self.status = "running"
        self.arms = {}          # arm_id -> ArmStateWire
        self.entity_poses = {}  # entity_id -> (pos, quat)
        self.attached = {}      # entity_id -> arm_id
        self.events = []

    def apply(self, sp: StatePacket):
        if sp.tick <= self.tick:
            raise ProtocolError(f"state tick {sp.tick} not after {self.tick}")
        self.tick = sp.tick
        self.status = sp.status
        for arm in sp.arms:
            self.arms[arm.arm_id] = arm
        for ent in sp.entities:
            self.entity_poses[ent.entity_id] = (ent.pos, ent.quat)
        for ev in sp.events:
            data = dict(ev.data)
            if ev.kind == "grasp":
                self.attached[data.get("entity")] = data.get("arm")
            elif ev.kind in ("release", "drop"):
                self.attached.pop(data.get("entity"), None)
            elif ev.kind == "handover":
                self.attached[data.get("entity")] = data.get("to_arm")
        self.events.extend(sp.events)

    def entity_pose(self, entity_id: str) -> Pose:
        pos, quat = self.entity_poses[entity_id]
        return Pose(pos, quat)


def stream_digest(chunks: Iterable[bytes]) -> str:
    """SHA-256 over a sequence of canonical packet encodings."""
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
        h.update(b"\n")
    return h.hexdigest()
