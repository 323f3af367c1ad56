"""Scripted oracle policies: closed-loop controllers that complete (or
deliberately fail) every task without a human, producing ground-truth
sessions for tests and acceptance runs.

The policy re-plans from the observed state every tick, so it works both
against a local in-process world and over the wire from state packets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Pose, quat_rotate
from .mapping import ArmCommand
from .protocol import ArmTarget, InputPacket, StateView
from .tasks import Catalog, builtin_catalog
from .world import WorldState, needle_arc_points

MODES = ("succeed", "fail_obstacle", "fail_drop")

JAW_TRAVEL = 1.0        # open fraction commanded while cruising
JAW_GRIP = 0.1          # closed fraction commanded to grasp and hold
IDENTITY_Q = (1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class OracleScript:
    task_id: str
    mode: str = "succeed"
    approach_height: float = 0.04    # hover offset above grasp points, m
    speed: float = 0.004             # commanded ee travel per tick, m
    loiter_ticks: int = 0            # ticks of idle circling before acting

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if not 0.0 < self.speed <= 0.01:
            raise ValueError("speed must be in (0, 0.01] m/tick")


class OracleView:
    """Uniform read access to a session, local WorldState or wire StateView.

    Caches spawn poses and grasp geometry on first sight so the policy can
    be a function of observations alone.
    """

    def __init__(self, task_id: str, catalog: Catalog = None):
        catalog = catalog or builtin_catalog()
        self.spec = catalog.task(task_id)
        self.templates = {t.entity_id: t for t in self.spec.entities}
        self.spawn_pose = {}
        self.home_ee = {}
        self.touched_targets = {}
        self.ever_attached = set()
        self.tick = 0
        self.status = "running"
        self._arm_pos = {}
        self._arm_jaw = {}
        self._entity_pose = {}
        self._attached = {}

    # ---- feeding

    def observe_world(self, state: WorldState):
        self.tick = state.tick
        self.status = state.status
        for arm in state.arms:
            self._arm_pos[arm.arm_id] = np.asarray(arm.ee_pose.position)
            self._arm_jaw[arm.arm_id] = arm.jaw
            self.home_ee.setdefault(arm.arm_id, np.asarray(arm.ee_pose.position))
        for e in state.entities:
            self._entity_pose[e.entity_id] = e.pose
            self._attached[e.entity_id] = e.attached_to
            if e.attached_to is not None:
                self.ever_attached.add(e.entity_id)
            self.spawn_pose.setdefault(e.entity_id, e.spawn_pose)
        self.touched_targets = dict(state.progress.get("touched", {}))

    def observe_view(self, view: StateView):
        self.tick = view.tick
        self.status = view.status
        for arm_id, arm in view.arms.items():
            self._arm_pos[arm_id] = np.asarray(arm.pos)
            self._arm_jaw[arm_id] = arm.jaw
            self.home_ee.setdefault(arm_id, np.asarray(arm.pos))
        for entity_id, (pos, quat) in view.entity_poses.items():
            pose = Pose(pos, quat)
            self._entity_pose[entity_id] = pose
            self.spawn_pose.setdefault(entity_id, pose)
        self._attached = dict.fromkeys(self._entity_pose, None)
        self._attached.update(view.attached)
        self.ever_attached.update(k for k, v in self._attached.items() if v is not None)
        touched = {}
        for ev in view.events:
            if ev.kind == "contact_target":
                arm = dict(ev.data).get("arm")
                touched[arm] = touched.get(arm, 0) + 1
        self.touched_targets = touched

    # ---- reading

    def arm_pos(self, arm_id: str) -> np.ndarray:
        return self._arm_pos[arm_id]

    def entity_pose(self, entity_id: str) -> Pose:
        return self._entity_pose[entity_id]

    def attached_to(self, entity_id: str) -> Optional[str]:
        return self._attached.get(entity_id)

    def handles_world(self, entity_id: str):
        template = self.templates[entity_id]
        pose = self._entity_pose[entity_id]
        if template.kind == "needle":
            pts = needle_arc_points(template.shape_args["arc_r"],
                                    int(template.shape_args.get("segments", 8)))
            mid, tail = pts[len(pts) // 2], pts[-1]
            return [pose.transform_point(mid), pose.transform_point(tail)]
        return [pose.transform_point(h) for h in template.handles]

    def needle_tip(self, entity_id: str) -> np.ndarray:
        template = self.templates[entity_id]
        pts = needle_arc_points(template.shape_args["arc_r"],
                                int(template.shape_args.get("segments", 8)))
        return self._entity_pose[entity_id].transform_point(pts[0])

    def targets_for(self, arm_id: str):
        return [t for t in self.spec.entities
                if t.kind == "target" and t.arm in ("", arm_id)]


def _toward(cur: np.ndarray, goal, speed: float) -> np.ndarray:
    goal = np.asarray(goal, dtype=np.float64)
    delta = goal - cur
    dist = float(np.linalg.norm(delta))
    if dist <= speed:
        return goal
    return cur + delta * (speed / dist)


def _cmd(pos, jaw: float) -> ArmCommand:
    return ArmCommand(ee_target=Pose(pos, IDENTITY_Q), jaw=jaw)


def _loiter_command(view: OracleView, script: OracleScript, arm_id: str) -> ArmCommand:
    home = view.home_ee[arm_id]
    phase = 2.0 * math.pi * (view.tick % 144) / 144.0
    offset = np.array([0.008 * math.cos(phase), 0.008 * math.sin(phase), 0.0])
    return _cmd(home + offset, JAW_TRAVEL)


def _approach_and_grasp(view, script, arm_id, entity_id, handle_index):
    """Shared grasp maneuver; returns (command, grasped_flag)."""
    if view.attached_to(entity_id) == arm_id:
        return None, True
    ee = view.arm_pos(arm_id)
    if view.attached_to(entity_id) is None and entity_id in view.ever_attached:
        # deliberately released: hold open and wait for it to land
        return _cmd(ee, JAW_TRAVEL), False
    handle = np.asarray(view.handles_world(entity_id)[handle_index])
    above = handle + (0.0, 0.0, script.approach_height)
    horiz = math.hypot(ee[0] - handle[0], ee[1] - handle[1])
    dist = float(np.linalg.norm(ee - handle))
    if dist <= 0.010:
        return _cmd(handle, JAW_GRIP), False
    if horiz > 0.003:
        return _cmd(_toward(ee, above, script.speed), JAW_TRAVEL), False
    return _cmd(_toward(ee, handle, script.speed), JAW_TRAVEL), False


CRUISE_Z = 0.105     # above every obstacle ceiling plus the tip radius


def _reach_commands(view, script, fail: bool):
    commands = {}
    for arm_id in view.spec.arms:
        ee = view.arm_pos(arm_id)
        if fail and arm_id == view.spec.arms[0]:
            goal_entity = "obstacle0"
        else:
            targets = view.targets_for(arm_id)
            idx = view.touched_targets.get(arm_id, 0)
            if idx >= len(targets):
                commands[arm_id] = _cmd(ee, JAW_TRAVEL)
                continue
            goal_entity = targets[idx].entity_id
        goal = np.asarray(view.entity_pose(goal_entity).position)
        horiz = math.hypot(ee[0] - goal[0], ee[1] - goal[1])
        if horiz > 0.003:
            if ee[2] < CRUISE_Z - 0.002:
                # climb out of the cluttered band before translating
                waypoint = np.array([ee[0], ee[1], CRUISE_Z])
            else:
                waypoint = np.array([goal[0], goal[1], CRUISE_Z])
            commands[arm_id] = _cmd(_toward(ee, waypoint, script.speed), JAW_TRAVEL)
        else:
            commands[arm_id] = _cmd(_toward(ee, goal, script.speed), JAW_TRAVEL)
    return commands


def _lift_commands(view, script, entity_id, fail_drop: bool):
    arm_id = view.spec.arms[0]
    cmd, grasped = _approach_and_grasp(view, script, arm_id, entity_id, 0)
    if not grasped:
        return {arm_id: cmd}
    ee = view.arm_pos(arm_id)
    spawn_z = view.spawn_pose[entity_id].position[2]
    lift = view.entity_pose(entity_id).position[2] - spawn_z
    if fail_drop:
        if lift >= 0.025:
            return {arm_id: _cmd(ee, JAW_TRAVEL)}   # let go mid-transit
        return {arm_id: _cmd(ee + (0, 0, script.speed), JAW_GRIP)}
    goal = ee + (0.0, 0.0, script.speed)
    return {arm_id: _cmd(goal, JAW_GRIP)}


def _handover_commands(view, script, fail_drop: bool):
    holder, taker = view.spec.arms[0], view.spec.arms[1]
    needle = "needle0"
    commands = {}
    attached = view.attached_to(needle)
    if attached == taker:
        commands[holder] = _cmd(view.arm_pos(holder), JAW_TRAVEL)
        commands[taker] = _cmd(view.arm_pos(taker), JAW_GRIP)
        return commands
    if fail_drop:
        # open early with the taker nowhere near
        commands[holder] = _cmd(view.arm_pos(holder), JAW_TRAVEL if view.tick > 3 else JAW_GRIP)
        commands[taker] = _cmd(view.arm_pos(taker), JAW_TRAVEL)
        return commands
    commands[holder] = _cmd(view.arm_pos(holder), JAW_GRIP)
    ee = view.arm_pos(taker)
    mid = np.asarray(view.handles_world(needle)[0])
    above = mid + (0.0, 0.0, script.approach_height)
    horiz = math.hypot(ee[0] - mid[0], ee[1] - mid[1])
    dist = float(np.linalg.norm(ee - mid))
    if dist <= 0.008:
        commands[taker] = _cmd(mid, JAW_GRIP)
        commands[holder] = _cmd(view.arm_pos(holder), JAW_TRAVEL)  # hand off
    elif horiz > 0.003:
        commands[taker] = _cmd(_toward(ee, above, script.speed), JAW_TRAVEL)
    else:
        commands[taker] = _cmd(_toward(ee, mid, script.speed), JAW_TRAVEL)
    return commands


def _pick_transfer_commands(view, script, fail_drop: bool):
    arm_id = view.spec.arms[0]
    peg = "peg0"
    cmd, grasped = _approach_and_grasp(view, script, arm_id, peg, 0)
    if not grasped:
        return {arm_id: cmd}
    ee = view.arm_pos(arm_id)
    peg_pos = np.asarray(view.entity_pose(peg).position)
    goal_post = np.asarray(view.entity_pose("post_b").position)
    carry_z = 0.075
    if fail_drop:
        between = 0.5 * (np.asarray(view.entity_pose("post_a").position)
                         + goal_post)
        if peg_pos[2] < carry_z - 0.003:
            return {arm_id: _cmd(ee + (0, 0, script.speed), JAW_GRIP)}
        if math.hypot(peg_pos[0] - between[0], peg_pos[1] - between[1]) > 0.004:
            step = _toward(peg_pos[:2], between[:2], script.speed) - peg_pos[:2]
            return {arm_id: _cmd(ee + (step[0], step[1], 0.0), JAW_GRIP)}
        return {arm_id: _cmd(ee, JAW_TRAVEL)}      # drop it between the posts
    if peg_pos[2] < carry_z - 0.003:
        return {arm_id: _cmd(ee + (0, 0, script.speed), JAW_GRIP)}
    horiz = math.hypot(peg_pos[0] - goal_post[0], peg_pos[1] - goal_post[1])
    if horiz > 0.002:
        step = _toward(peg_pos[:2], goal_post[:2], script.speed) - peg_pos[:2]
        return {arm_id: _cmd(ee + (step[0], step[1], 0.0), JAW_GRIP)}
    return {arm_id: _cmd(ee, JAW_TRAVEL)}          # release over the goal post


def _pick_place_commands(view, script, fail_drop: bool):
    arm_id = view.spec.arms[0]
    block = "block0"
    cmd, grasped = _approach_and_grasp(view, script, arm_id, block, 0)
    if not grasped:
        return {arm_id: cmd}
    ee = view.arm_pos(arm_id)
    block_pos = np.asarray(view.entity_pose(block).position)
    goal = np.asarray(view.entity_pose("goal0").position)
    if fail_drop:
        goal = goal + (0.05, 0.0, 0.0)             # over bare table, misses the disk
    carry_z = view.spawn_pose[block].position[2] + 0.035
    drop_z = view.spawn_pose[block].position[2] + 0.02
    horiz = math.hypot(block_pos[0] - goal[0], block_pos[1] - goal[1])
    if horiz > 0.002:
        if block_pos[2] < carry_z - 0.003:
            return {arm_id: _cmd(ee + (0, 0, script.speed), JAW_GRIP)}
        step = _toward(block_pos[:2], goal[:2], script.speed) - block_pos[:2]
        return {arm_id: _cmd(ee + (step[0], step[1], 0.0), JAW_GRIP)}
    if block_pos[2] > drop_z + 0.002:
        return {arm_id: _cmd(ee - (0, 0, script.speed), JAW_GRIP)}
    return {arm_id: _cmd(ee, JAW_TRAVEL)}          # release onto the goal disk


def _needle_ring_commands(view, script, fail_drop: bool):
    arm_id = view.spec.arms[0]
    needle = "needle0"
    cmd, grasped = _approach_and_grasp(view, script, arm_id, needle, 1)  # tail handle
    if not grasped:
        return {arm_id: cmd}
    ee = view.arm_pos(arm_id)
    tip = np.asarray(view.needle_tip(needle))
    ring = view.entity_pose("ring0")
    center = np.asarray(ring.position)
    normal = np.asarray(quat_rotate(ring.orientation, (0.0, 0.0, 1.0)))
    if fail_drop:
        if tip[2] < 0.03:
            return {arm_id: _cmd(ee + (0, 0, script.speed), JAW_GRIP)}
        return {arm_id: _cmd(ee, JAW_TRAVEL)}      # drop before reaching the ring
    side = float(np.dot(normal, tip - center))
    lateral = (tip - center) - side * normal
    pre = center + normal * (0.035 if side >= 0 else -0.035)
    through = center - normal * (0.02 if side >= 0 else -0.02)
    if float(np.linalg.norm(lateral)) > 0.004:
        step = _toward(tip, pre, script.speed) - tip
    else:
        step = _toward(tip, through, script.speed) - tip
    return {arm_id: _cmd(ee + step, JAW_GRIP)}


def generate_commands(view: OracleView, script: OracleScript) -> dict:
    """Next per-arm commands for the observed state; empty when terminal."""
    if view.status != "running":
        return {}
    if view.tick < script.loiter_ticks:
        return {arm_id: _loiter_command(view, script, arm_id)
                for arm_id in view.spec.arms}
    task = script.task_id
    fail_obstacle = script.mode == "fail_obstacle"
    fail_drop = script.mode == "fail_drop"
    if task in ("reach", "reach_obstacle", "dual_reach", "dual_reach_obstacle"):
        return _reach_commands(view, script, fail_obstacle)
    if task in ("needle_lift", "peg_lift"):
        entity = "needle0" if task == "needle_lift" else "block0"
        return _lift_commands(view, script, entity, fail_drop)
    if task == "needle_handover":
        return _handover_commands(view, script, fail_drop)
    if task == "pick_transfer":
        return _pick_transfer_commands(view, script, fail_drop)
    if task == "pick_place":
        return _pick_place_commands(view, script, fail_drop)
    if task == "needle_ring":
        return _needle_ring_commands(view, script, fail_drop)
    raise ValueError(f"no oracle policy for task {task!r}")


def run_oracle_session(
    task: str,
    seed: int,
    mode: str = "succeed",
    record_stream=None,
    max_ticks: int = 9000,
    script: OracleScript = None,
    chain=None,
    catalog=None,
    started_at: str = "",
):
    """Drive a local in-process session to termination; returns the engine."""
    from .engine import SessionEngine

    script = script or OracleScript(task_id=task, mode=mode)
    engine = SessionEngine(task, seed, chain=chain, catalog=catalog,
                           record_stream=record_stream, started_at=started_at)
    view = OracleView(task, catalog)
    while engine.status == "running" and engine.tick < max_ticks:
        view.observe_world(engine.state)
        commands = generate_commands(view, script)
        targets = tuple(
            ArmTarget.from_command(arm_id, cmd) for arm_id, cmd in sorted(commands.items())
        )
        packet = InputPacket(engine.tick, targets) if targets else None
        engine.step(packet)
    engine.close()
    return engine
