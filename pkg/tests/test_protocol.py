import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from telesim import protocol as proto
from telesim.geometry import Pose
from telesim.mapping import ArmCommand


def make_arm(arm_id="psm1", pos=(0.01, -0.02, 0.05), quat=(1, 0, 0, 0), jaw=0.5):
    return proto.ArmTarget.from_command(arm_id, ArmCommand(Pose(pos, quat), jaw))


def make_input(tick=0, two_arms=False):
    arms = [make_arm("psm1")]
    if two_arms:
        arms.append(make_arm("psm2", pos=(-0.03, 0.01, 0.08)))
    return proto.InputPacket(tick, tuple(arms))


def make_state(tick=0, status="running", events=()):
    arm = proto.ArmStateWire(
        "psm1",
        q=tuple(proto.quant5(v) for v in (0.1, -0.2, 0.12, 0.0, 0.3, -0.1)),
        jaw=0.5,
        pos=(0.01, -0.02, 0.05),
        quat=(1.0, 0.0, 0.0, 0.0),
    )
    ent = proto.EntityPoseWire("target0", (0.02, 0.03, 0.04), (1.0, 0.0, 0.0, 0.0))
    return proto.StatePacket(tick, status, (arm,), (ent,), tuple(events))


def make_header(**kw):
    defaults = dict(
        task_id="reach",
        seed=42,
        scale=6.0,
        dt=1.0 / 72.0,
        chain_name="psm6",
        chain_digest="a" * 64,
        catalog_digest="b" * 64,
        mapping={"scale": 6.0},
        started_at="2026-01-05T10:00:00Z",
    )
    defaults.update(kw)
    return proto.SessionHeader(**defaults)


class TestInputCodec:
    def test_single_arm_size_bounds(self):
        data = proto.encode_input(make_input())
        assert proto.INPUT_MIN_BYTES <= len(data) <= proto.INPUT_MAX_BYTES

    def test_two_arm_longer_than_single(self):
        one = proto.encode_input(make_input())
        two = proto.encode_input(make_input(two_arms=True))
        assert len(two) > len(one)

    def test_roundtrip_identity_on_canonical_domain(self):
        p = proto.canonicalize_input(make_input(tick=7, two_arms=True))
        assert proto.decode_input(proto.encode_input(p)) == p

    def test_equal_packets_encode_identically(self):
        a = proto.encode_input(make_input(tick=3))
        b = proto.encode_input(make_input(tick=3))
        assert a == b

    def test_truncated_bytes_reports_offset(self):
        data = proto.encode_input(make_input())[:40]
        with pytest.raises(proto.ProtocolError, match="unexpected end of input at byte"):
            proto.decode_input(data)

    def test_missing_field_strict(self):
        obj = json.loads(proto.encode_input(make_input()))
        del obj["arms"][0]["jaw"]
        with pytest.raises(proto.ProtocolError, match="missing field 'jaw'"):
            proto.decode_input(json.dumps(obj))

    def test_unknown_keys_tolerated(self):
        obj = json.loads(proto.encode_input(make_input()))
        obj["extra"] = {"future": True}
        obj["arms"][0]["debug_id"] = 9
        packet = proto.decode_input(json.dumps(obj))
        assert packet.arms[0].arm_id == "psm1"

    def test_quat_norm_0p9995_renormalized(self):
        obj = json.loads(proto.encode_input(make_input()))
        obj["arms"][0]["quat"] = [0.9995, 0.0, 0.0, 0.0]
        packet = proto.decode_input(json.dumps(obj))
        norm = np.linalg.norm(packet.arms[0].quat)
        assert abs(norm - 1.0) <= proto.QUAT_KEEP_TOL

    def test_quat_norm_0p5_rejected(self):
        obj = json.loads(proto.encode_input(make_input()))
        obj["arms"][0]["quat"] = [0.5, 0.0, 0.0, 0.0]
        with pytest.raises(proto.ProtocolError, match="quaternion norm"):
            proto.decode_input(json.dumps(obj))

    def test_three_arms_rejected(self):
        obj = json.loads(proto.encode_input(make_input(two_arms=True)))
        obj["arms"].append(obj["arms"][0])
        with pytest.raises(proto.ProtocolError):
            proto.decode_input(json.dumps(obj))

    def test_oversize_packet_reported_never_truncated(self):
        with pytest.raises(proto.PacketSizeError, match="outside"):
            proto.encode_input(make_input(tick=10 ** 200))


@st.composite
def random_command_packets(draw):
    n_arms = draw(st.integers(1, 2))
    arms = []
    for i in range(n_arms):
        pos = [draw(st.floats(-0.9, 0.9)) for _ in range(3)]
        quat = np.array([draw(st.floats(-1, 1)) for _ in range(4)])
        if np.linalg.norm(quat) < 1e-3:
            quat = np.array([1.0, 0, 0, 0])
        jaw = draw(st.floats(0, 1))
        arms.append(proto.ArmTarget.from_command(
            proto.ARM_IDS[i], ArmCommand(Pose(pos, quat), jaw)))
    return proto.InputPacket(draw(st.integers(0, 10 ** 7)), tuple(arms))


class TestInputCodecProperties:
    @settings(max_examples=300, deadline=None)
    @given(random_command_packets())
    def test_size_bounds_and_roundtrip(self, packet):
        data = proto.encode_input(packet)
        assert proto.INPUT_MIN_BYTES <= len(data) <= proto.INPUT_MAX_BYTES
        decoded = proto.decode_input(data)
        assert proto.encode_input(decoded) == data
        assert proto.decode_input(proto.encode_input(decoded)) == decoded


class TestStateCodec:
    def test_roundtrip(self):
        ev = proto.EventWire.make("grasp", 3, entity="needle0", arm="psm1", dist=0.0123456)
        sp = make_state(3, events=[ev])
        decoded = proto.decode_state(proto.encode_state(sp))
        assert decoded == sp

    def test_event_payload_floats_quantized(self):
        ev = proto.EventWire.make("contact_target", 1, dist=0.123456789)
        assert dict(ev.data)["dist"] == pytest.approx(0.12346)


class TestSessionIO:
    def _make_log(self, n=5, outcome="success"):
        frames = []
        for t in range(n):
            status = "running" if t < n - 1 else "success"
            events = []
            if t == n - 1:
                events = [proto.EventWire.make("task_success", t)]
            frames.append(proto.Frame(make_input(t), make_state(t, status, events)))
        return proto.SessionLog(make_header(), frames, outcome)

    def test_write_read_roundtrip(self, tmp_path):
        log = self._make_log()
        path = tmp_path / "s.jsonl"
        proto.write_session(log, path)
        back = proto.read_session(path)
        assert back.header == log.header
        assert back.frames == log.frames
        assert back.outcome == log.outcome

    def test_tick_gap_names_missing_tick(self, tmp_path):
        log = self._make_log(8)
        path = tmp_path / "s.jsonl"
        proto.write_session(log, path)
        lines = path.read_bytes().splitlines()
        del lines[6]  # removes the frame at tick 5 (header is line 0)
        with pytest.raises(proto.ProtocolError, match="missing tick 5"):
            proto.read_session(lines)

    def test_duplicate_tick_rejected(self, tmp_path):
        log = self._make_log(4)
        path = tmp_path / "s.jsonl"
        proto.write_session(log, path)
        lines = path.read_bytes().splitlines()
        lines.insert(3, lines[2])
        with pytest.raises(proto.ProtocolError, match="duplicate tick"):
            proto.read_session(lines)

    def test_empty_file_missing_header(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_bytes(b"")
        with pytest.raises(proto.ProtocolError, match="missing header"):
            proto.read_session(path)
        report = proto.validate_session(path)
        assert any("missing header" in m for _, m in report.violations)

    def test_writer_streams_one_frame_at_a_time(self, tmp_path):
        path = tmp_path / "s.jsonl"
        with open(path, "wb") as f:
            w = proto.SessionWriter(f, make_header())
            w.write_frame(proto.Frame(make_input(0), make_state(0)))
            # already on disk before close
            assert len(path.read_bytes().splitlines()) == 2
            w.write_frame(proto.Frame(make_input(1), make_state(1)))
            w.close("aborted")
        assert proto.read_session(path).outcome == "aborted"


class TestValidateSession:
    def test_clean_log_zero_violations(self, tmp_path):
        log = TestSessionIO()._make_log()
        path = tmp_path / "s.jsonl"
        proto.write_session(log, path)
        report = proto.validate_session(path)
        assert report.ok, str(report)

    def test_oversize_input_flagged_at_tick(self, tmp_path):
        log = TestSessionIO()._make_log(3)
        path = tmp_path / "s.jsonl"
        proto.write_session(log, path)
        lines = path.read_bytes().splitlines()
        obj = json.loads(lines[2])
        obj["input"]["tick"] = 10 ** 200  # canonical form blows the ceiling
        obj["state"]["tick"] = 1
        lines[2] = json.dumps(obj, separators=(",", ":")).encode()
        report = proto.validate_session(lines_to_file(tmp_path, lines))
        assert any(t == 1 and "bytes" in m for t, m in report.violations), str(report)

    def test_unterminated_session_flagged(self, tmp_path):
        log = TestSessionIO()._make_log(3)
        path = tmp_path / "s.jsonl"
        proto.write_session(log, path)
        lines = path.read_bytes().splitlines()[:-1]
        report = proto.validate_session(lines_to_file(tmp_path, lines, "cut.jsonl"))
        assert any("unterminated" in m for _, m in report.violations)

    def test_drop_without_grasp_flagged(self, tmp_path):
        frames = [
            proto.Frame(make_input(0), make_state(0)),
            proto.Frame(
                make_input(1),
                make_state(1, "failure",
                           [proto.EventWire.make("drop", 1, entity="peg0"),
                            proto.EventWire.make("task_failure", 1, reason="drop")]),
            ),
        ]
        log = proto.SessionLog(make_header(), frames, "failure")
        path = tmp_path / "s.jsonl"
        proto.write_session(log, path)
        report = proto.validate_session(path)
        assert any("without grasp" in m for _, m in report.violations)


def lines_to_file(tmp_path, lines, name="edited.jsonl"):
    p = tmp_path / name
    p.write_bytes(b"\n".join(lines) + b"\n")
    return p


class TestStateView:
    def test_deltas_reconstruct_entity_poses(self):
        view = proto.StateView()
        view.apply(make_state(0))
        sp1 = proto.StatePacket(
            1, "running", make_state(1).arms,
            (proto.EntityPoseWire("target0", (0.05, 0.06, 0.07), (1.0, 0.0, 0.0, 0.0)),),
            (),
        )
        view.apply(sp1)
        assert view.entity_poses["target0"][0] == (0.05, 0.06, 0.07)
        with pytest.raises(proto.ProtocolError):
            view.apply(sp1)  # non-increasing tick
