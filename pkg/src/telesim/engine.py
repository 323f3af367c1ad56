"""Session engine: the tick pipeline shared by the live server, the oracle
runner, and the replayer.

Every tick consumes at most one input packet (last-write-wins), steps the
world, and produces the canonical frame (effective input + state packet) that
is recorded and broadcast. Inputs are canonicalized through the wire codec
before they touch the world, so a replay feeds the world bit-identical
commands.
"""

from __future__ import annotations

import hashlib
from typing import Optional

from . import DT, DEFAULT_SCALE
from .kinematics import KinematicChain
from .mapping import MappingSettings
from .protocol import (
    ArmStateWire,
    ArmTarget,
    EntityPoseWire,
    EventWire,
    Frame,
    InputPacket,
    SessionHeader,
    SessionWriter,
    StatePacket,
    encode_state,
    quant5,
)
from .tasks import Catalog
from .world import World, WorldState


class SessionEngine:
    def __init__(
        self,
        task: str,
        seed: int,
        chain: KinematicChain = None,
        catalog: Catalog = None,
        mapping_settings: MappingSettings = None,
        scale: float = DEFAULT_SCALE,
        record_stream=None,
        started_at: str = "",
        keep_frames: bool = True,
    ):
        self.world = World(task, chain, catalog)
        self.state: WorldState = self.world.reset(seed)
        self.seed = seed
        self.mapping_settings = mapping_settings or MappingSettings()
        self.header = SessionHeader(
            task_id=task,
            seed=seed,
            scale=scale,
            dt=self.world.dt,
            chain_name=self.world.chain.name,
            chain_digest=self.world.chain.digest,
            catalog_digest=self.world.catalog.digest,
            mapping=self.mapping_settings.to_dict(),
            started_at=started_at,
        )
        self.frames = [] if keep_frames else None
        self.writer = SessionWriter(record_stream, self.header) if record_stream else None
        self._digest = hashlib.sha256()
        self._prev_poses = {}
        self._last_commands = {
            arm.arm_id: ArmTarget.from_command(arm.arm_id, self._hold_command(arm))
            for arm in self.state.arms
        }
        self.unknown_arm_packets = 0
        self.closed = False

    @staticmethod
    def _hold_command(arm):
        from .mapping import ArmCommand

        return ArmCommand(ee_target=arm.ee_pose, jaw=arm.jaw)

    @property
    def tick(self) -> int:
        return self.state.tick

    @property
    def status(self) -> str:
        return self.state.status

    def outcome(self) -> Optional[str]:
        return {"success": "success", "failure": "failure"}.get(self.state.status)

    def offer_packet(self, packet: InputPacket):
        """Merge a decoded client packet into the per-arm command slots."""
        known = set(self._last_commands)
        for target in packet.arms:
            if target.arm_id in known:
                self._last_commands[target.arm_id] = target
            else:
                self.unknown_arm_packets += 1

    def step(self, packet: InputPacket = None) -> StatePacket:
        """Advance one tick using the latest commands; records the frame."""
        if packet is not None:
            self.offer_packet(packet)
        effective = InputPacket(
            self.state.tick,
            tuple(self._last_commands[arm.arm_id] for arm in self.state.arms),
        )
        commands = {t.arm_id: t.command() for t in effective.arms}
        self.world.step(self.state, commands)
        state_packet = self._build_state_packet()
        frame = Frame(effective, state_packet)
        if self.frames is not None:
            self.frames.append(frame)
        if self.writer is not None:
            self.writer.write_frame(frame)
        data = encode_state(state_packet)
        self._digest.update(data)
        self._digest.update(b"\n")
        return state_packet

    def _build_state_packet(self) -> StatePacket:
        state = self.state
        tick = state.tick - 1  # step already advanced the counter
        arms = tuple(
            ArmStateWire(
                arm_id=a.arm_id,
                q=tuple(quant5(v) for v in a.q),
                jaw=quant5(a.jaw),
                pos=tuple(quant5(v) for v in a.ee_pose.position),
                quat=tuple(quant5(v) for v in a.ee_pose.orientation),
            )
            for a in state.arms
        )
        changed = []
        for e in state.entities:
            key = (tuple(e.pose.position), tuple(e.pose.orientation))
            if self._prev_poses.get(e.entity_id) != key:
                self._prev_poses[e.entity_id] = key
                changed.append(
                    EntityPoseWire(
                        entity_id=e.entity_id,
                        pos=tuple(quant5(v) for v in e.pose.position),
                        quat=tuple(quant5(v) for v in e.pose.orientation),
                    )
                )
        events = tuple(
            EventWire(ev.kind, ev.tick, ev.wire_items()) for ev in state.events
        )
        return StatePacket(tick, state.status, arms, tuple(changed), events)

    def state_stream_digest(self) -> str:
        return self._digest.hexdigest()

    def close(self, outcome: str = None):
        if self.closed:
            return
        self.closed = True
        if self.writer is not None:
            self.writer.close(outcome or self.outcome() or "aborted")

    def session_log(self):
        from .protocol import SessionLog

        if self.frames is None:
            raise RuntimeError("engine was created with keep_frames=False")
        return SessionLog(self.header, list(self.frames), self.outcome() or "aborted")
