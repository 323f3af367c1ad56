"""Deterministic fixed-timestep task world.

Physics is kinematic plus ballistic: arms track pose targets through the IK
solver, grasped entities follow the jaw rigidly, released entities fall
straight down until they rest on the table or a post. That is deliberately
all it takes to express the ten task predicates; there is no contact
dynamics, friction, or torque anywhere.

Determinism is the load-bearing property: identical (task, seed, command
sequence) produces a bit-identical state sequence, which is what makes
recorded sessions replayable.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import DT
from .geometry import Pose, quat_from_axis_angle, quat_mul, quat_rotate
from .kinematics import IkSettings, KinematicChain, builtin_chain, fk, ik_solve
from .mapping import ArmCommand
from .tasks import Catalog, STATIC_KINDS, builtin_catalog

GRAVITY = 9.81                 # m/s^2, straight -z
TABLE_TOP = 0.0                # the table surface plane

GRASP_RADIUS = 0.015           # jaw midpoint to handle, attach threshold
JAW_CLOSE = 0.25               # attach when commanded below
JAW_OPEN = 0.35                # release when commanded above (hysteresis band)

TIP_RADIUS_DEFAULT = 0.005

ARM_BASES = {
    "psm1": Pose((-0.08, 0.0, 0.16)),
    "psm2": Pose((0.08, 0.0, 0.16)),
}

EV_GRASP = "grasp"
EV_RELEASE = "release"
EV_DROP = "drop"
EV_CONTACT_TARGET = "contact_target"
EV_CONTACT_OBSTACLE = "contact_obstacle"
EV_PLACEMENT = "placement"
EV_HANDOVER = "handover"
EV_RING_PASS = "ring_pass"
EV_SUCCESS = "task_success"
EV_FAILURE = "task_failure"


class WorldError(ValueError):
    pass


# ------------------------------------------------------------------ shapes

@dataclass(frozen=True)
class Sphere:
    r: float


@dataclass(frozen=True)
class Capsule:
    r: float
    half_len: float            # axis along local +z


@dataclass(frozen=True)
class Box:
    hx: float
    hy: float
    hz: float


@dataclass(frozen=True)
class Torus:
    major_r: float
    minor_r: float             # axis along local +z


def _shape_from_template(name: str, args: dict):
    if name == "sphere":
        return Sphere(args["r"])
    if name == "capsule":
        return Capsule(args["r"], args.get("half_len", 0.0))
    if name == "box":
        return Box(args["hx"], args["hy"], args["hz"])
    if name == "torus":
        return Torus(args["major"], args["minor"])
    raise WorldError(f"unknown shape {name!r}")


def needle_arc_points(arc_r: float, segments: int):
    """Polyline approximating a semicircular needle in its own xy plane.

    Returns segments+1 points; the tip is the first point.
    """
    pts = []
    for k in range(segments + 1):
        theta = math.pi * k / segments
        pts.append((arc_r * math.cos(theta), arc_r * math.sin(theta), 0.0))
    return tuple(pts)


# ------------------------------------------------------------------ entities

@dataclass
class Entity:
    entity_id: str
    kind: str
    shape: object
    pose: Pose
    graspable: bool = False
    grasp_handles: tuple = ()          # entity-frame points
    attached_to: Optional[str] = None
    static: bool = False
    params: dict = field(default_factory=dict)   # e.g. needle arc geometry
    arm: str = ""                      # for per-arm reach targets
    # runtime bookkeeping
    spawn_pose: Pose = None
    grip_rel: Optional[Pose] = None    # ee-frame -> entity-frame while attached
    fall_speed: float = 0.0
    settled_on: Optional[str] = "table"
    was_grasped: bool = False
    was_lifted: bool = False

    def world_handles(self):
        return [self.pose.transform_point(h) for h in self.grasp_handles]

    def needle_points_world(self):
        pts = needle_arc_points(self.params["arc_r"], int(self.params["segments"]))
        return [self.pose.transform_point(p) for p in pts]


@dataclass
class ArmState:
    arm_id: str
    q: np.ndarray
    jaw: float
    ee_pose: Pose                       # world frame, cached fk result
    base_pose: Pose
    held: Optional[str] = None          # entity id


@dataclass
class WorldState:
    tick: int
    arms: list
    entities: list
    events: list                        # events emitted this tick
    task_id: str
    status: str = "running"             # running | success | failure
    failure_reason: str = ""
    progress: dict = field(default_factory=dict)

    def arm(self, arm_id: str) -> ArmState:
        for a in self.arms:
            if a.arm_id == arm_id:
                return a
        raise WorldError(f"unknown arm {arm_id!r}")

    def entity(self, entity_id: str) -> Entity:
        for e in self.entities:
            if e.entity_id == entity_id:
                return e
        raise WorldError(f"unknown entity {entity_id!r}")

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return state_to_obj(self) == state_to_obj(other)


@dataclass(frozen=True)
class Event:
    kind: str
    tick: int
    payload: dict

    def wire_items(self):
        out = []
        for k in sorted(self.payload):
            v = self.payload[k]
            out.append((k, float(f"{v:.5f}") if isinstance(v, float) else v))
        return tuple(out)


# ------------------------------------------------------------------ seeding

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _fnv64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode():
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def make_rng(seed: int, tag: str = "") -> np.random.Generator:
    """PCG-64 generator whose 128-bit state/increment come from splitmix64."""
    s = (int(seed) ^ _fnv64(tag)) & _MASK64
    words = []
    for _ in range(4):
        s, w = _splitmix64(s)
        words.append(w)
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": (words[0] << 64) | words[1], "inc": (words[2] << 64) | words[3]},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bg)


# ------------------------------------------------------------------ support

def support_offset(entity: Entity) -> float:
    """Height of the entity origin above whatever it rests on."""
    shape = entity.shape
    R = entity.pose.rotation_matrix()
    if isinstance(shape, Sphere):
        return shape.r
    if isinstance(shape, Box):
        return shape.hx * abs(R[2, 0]) + shape.hy * abs(R[2, 1]) + shape.hz * abs(R[2, 2])
    if isinstance(shape, Capsule):
        if entity.kind == "needle":
            pts = needle_arc_points(entity.params["arc_r"], int(entity.params["segments"]))
            min_z = min((R @ np.asarray(p))[2] for p in pts)
            return -min_z + shape.r
        return shape.half_len * abs(R[2, 2]) + shape.r
    if isinstance(shape, Torus):
        tilt = math.sqrt(max(0.0, 1.0 - R[2, 2] * R[2, 2]))
        return shape.major_r * tilt + shape.minor_r
    raise WorldError(f"no support rule for {shape!r}")


# ------------------------------------------------------------------ world

class World:
    """Owns the task context (chain, catalog, params); states flow through it."""

    def __init__(self, task_id: str, chain: KinematicChain = None, catalog: Catalog = None,
                 dt: float = DT):
        self.catalog = catalog or builtin_catalog()
        self.spec = self.catalog.task(task_id)
        self.task_id = task_id
        self.chain = chain or builtin_chain("psm6")
        self.dt = dt
        ori_weight = 0.0 if self.spec.ik_mode == "position_only" else 1.0
        # modest per-tick iteration budget: targets move a few mm per tick
        self.ik_settings = IkSettings(max_iters=50, ori_weight=ori_weight, restarts=2)
        self.tip_radius = self.spec.params.get("tip_radius", TIP_RADIUS_DEFAULT)

    # -------------------------------------------------------------- reset

    def reset(self, seed: int) -> WorldState:
        rng = make_rng(seed, self.task_id)
        arms = []
        for arm_id in self.spec.arms:
            if arm_id not in ARM_BASES:
                raise WorldError(f"no base pose for arm {arm_id!r}")
            q = self.chain.neutral_q()
            ee = ARM_BASES[arm_id].compose(fk(self.chain, q))
            arms.append(ArmState(arm_id, q, 1.0, ee, ARM_BASES[arm_id]))
        state = WorldState(
            tick=0,
            arms=arms,
            entities=[],
            events=[],
            task_id=self.task_id,
            progress={"touched": {a.arm_id: 0 for a in arms}, "pending_events": []},
        )
        for template in self.spec.entities:
            state.entities.append(self._spawn(template, state, rng))
        for arm in state.arms:
            held = [e for e in state.entities if e.attached_to == arm.arm_id]
            if held:
                arm.held = held[0].entity_id
        state.progress["start_support"] = {
            e.entity_id: e.settled_on for e in state.entities if e.graspable
        }
        ntip = self._needle_tip(state)
        if ntip is not None:
            state.progress["prev_tip"] = tuple(float(v) for v in ntip)
        return state

    def _spawn(self, template, state: WorldState, rng) -> Entity:
        shape = _shape_from_template(template.shape_name, template.shape_args)
        params = {}
        handles = template.handles
        if template.kind == "needle":
            params = {
                "arc_r": template.shape_args["arc_r"],
                "segments": template.shape_args.get("segments", 8.0),
            }
            pts = needle_arc_points(params["arc_r"], int(params["segments"]))
            mid = pts[len(pts) // 2]
            tail = pts[-1]
            handles = (mid, tail)
            seg = int(params["segments"])
            chord = 2.0 * params["arc_r"] * math.sin(math.pi / (2 * seg))
            shape = Capsule(shape.r, chord / 2.0)
        entity = Entity(
            entity_id=template.entity_id,
            kind=template.kind,
            shape=shape,
            pose=Pose.identity(),
            graspable=template.graspable,
            grasp_handles=handles,
            static=template.kind in STATIC_KINDS,
            params=params,
            arm=template.arm,
        )
        entity.pose = self._draw_pose(template, entity, state, rng)
        entity.spawn_pose = entity.pose
        if "on" in template.placement:
            entity.settled_on = template.placement["on"]
        if template.attach:
            self._attach_at_reset(template.attach, entity, state)
        return entity

    def _draw_pose(self, template, entity: Entity, state: WorldState, rng) -> Entity:
        pl = template.placement
        for _ in range(200):
            quat = (1.0, 0.0, 0.0, 0.0)
            if "quat" in pl:
                quat = pl["quat"]
            if "yaw" in pl:
                yaw = rng.uniform(*pl["yaw"])
                quat = quat_mul(quat_from_axis_angle((0, 0, 1), yaw), quat)
            if "at" in pl:
                pos = list(pl["at"])
            else:
                pos = [0.0, 0.0, 0.0]
                if "spawn_x" in pl:
                    pos[0] = rng.uniform(*pl["spawn_x"])
                if "spawn_y" in pl:
                    pos[1] = rng.uniform(*pl["spawn_y"])
                if "spawn_z" in pl:
                    pos[2] = rng.uniform(*pl["spawn_z"])
                if "on" in pl:
                    ref = state.entity(pl["on"])
                    jitter = pl.get("jitter", 0.0)
                    pos[0] = ref.pose.position[0] + rng.uniform(-jitter, jitter)
                    pos[1] = ref.pose.position[1] + rng.uniform(-jitter, jitter)
                if "at_z" in pl:
                    pos[2] = pl["at_z"]
            candidate = Pose(pos, quat)
            if pl.get("rest") or "on" in pl:
                probe = copy.copy(entity)
                probe.pose = candidate
                candidate = Pose(
                    (pos[0], pos[1], TABLE_TOP + support_offset(probe)), quat
                )
            if "min_xy" in pl:
                ref_id, dist = pl["min_xy"]
                ref = state.entity(ref_id)
                dx = candidate.position[0] - ref.pose.position[0]
                dy = candidate.position[1] - ref.pose.position[1]
                if math.hypot(dx, dy) < dist:
                    continue
            if "avoid" in pl:
                ax, ay, dist = pl["avoid"]
                if math.hypot(candidate.position[0] - ax, candidate.position[1] - ay) < dist:
                    continue
            return candidate
        raise WorldError(
            f"could not place entity {template.entity_id!r} under min_xy constraints"
        )

    def _attach_at_reset(self, arm_id: str, entity: Entity, state: WorldState):
        arm = state.arm(arm_id)
        # put the last handle exactly at the jaw midpoint, keep drawn orientation
        handle = np.asarray(entity.grasp_handles[-1])
        offset = quat_rotate(entity.pose.orientation, handle)
        entity.pose = Pose(arm.ee_pose.position - offset, entity.pose.orientation)
        entity.attached_to = arm_id
        entity.grip_rel = arm.ee_pose.inverse().compose(entity.pose)
        entity.settled_on = None
        entity.was_grasped = True
        arm.jaw = 0.1
        arm.held = entity.entity_id
        state.progress["pending_events"].append(
            (EV_GRASP, {"entity": entity.entity_id, "arm": arm_id})
        )

    # -------------------------------------------------------------- step

    def step(self, state: WorldState, commands: dict, dt: float = None) -> WorldState:
        """Advance one tick; mutates and returns state."""
        if state.status != "running":
            raise WorldError(f"step after terminal status {state.status!r}")
        if dt is not None and abs(dt - self.dt) > 1e-12:
            raise WorldError(f"dt {dt!r} does not match the world timestep {self.dt!r}")
        events = []
        state.events = events
        for kind, payload in state.progress.get("pending_events", []):
            events.append(Event(kind, state.tick, payload))
        state.progress["pending_events"] = []

        for arm in state.arms:
            cmd = commands.get(arm.arm_id)
            if cmd is not None:
                self._apply_command(arm, cmd)
        for entity in state.entities:
            if entity.attached_to is not None:
                arm = state.arm(entity.attached_to)
                entity.pose = arm.ee_pose.compose(entity.grip_rel)
        for arm in state.arms:
            self._update_grasp(state, arm, events)
        self._apply_gravity(state, events)
        self._check_predicates(state, events)
        state.tick += 1
        return state

    def _apply_command(self, arm: ArmState, cmd: ArmCommand):
        target_local = arm.base_pose.inverse().compose(cmd.ee_target)
        result = ik_solve(self.chain, arm.q, target_local, self.ik_settings)
        arm.q = result.q
        arm.jaw = min(1.0, max(0.0, float(cmd.jaw)))
        arm.ee_pose = arm.base_pose.compose(fk(self.chain, arm.q))

    # -------------------------------------------------------------- grasping

    def _update_grasp(self, state: WorldState, arm: ArmState, events: list):
        if arm.held is not None:
            if arm.jaw > JAW_OPEN:
                entity = state.entity(arm.held)
                events.append(Event(EV_RELEASE, state.tick,
                                    {"entity": entity.entity_id, "arm": arm.arm_id}))
                entity.attached_to = None
                entity.grip_rel = None
                arm.held = None
                taker = self._find_taker(state, entity, exclude=arm.arm_id)
                if taker is not None:
                    self._attach(state, taker, entity, events, via=arm.arm_id)
                else:
                    entity.fall_speed = 0.0
                    entity.settled_on = None
            return
        if arm.jaw < JAW_CLOSE:
            best = self._nearest_handle(state, arm)
            if best is not None:
                entity, dist = best
                self._attach(state, arm, entity, events, dist=dist)

    def _nearest_handle(self, state: WorldState, arm: ArmState):
        best = None
        for entity in state.entities:
            if not entity.graspable or entity.attached_to is not None:
                continue
            for handle in entity.world_handles():
                dist = float(np.linalg.norm(handle - arm.ee_pose.position))
                if dist <= GRASP_RADIUS and (best is None or dist < best[1]):
                    best = (entity, dist)
        return best

    def _find_taker(self, state: WorldState, entity: Entity, exclude: str):
        for other in state.arms:
            if other.arm_id == exclude or other.held is not None:
                continue
            if other.jaw < JAW_CLOSE:
                for handle in entity.world_handles():
                    if float(np.linalg.norm(handle - other.ee_pose.position)) <= GRASP_RADIUS:
                        return other
        return None

    def _attach(self, state: WorldState, arm: ArmState, entity: Entity, events: list,
                dist: float = None, via: str = None):
        entity.attached_to = arm.arm_id
        entity.grip_rel = arm.ee_pose.inverse().compose(entity.pose)
        entity.settled_on = None
        entity.fall_speed = 0.0
        entity.was_grasped = True
        arm.held = entity.entity_id
        if via is not None:
            events.append(Event(EV_HANDOVER, state.tick,
                                {"entity": entity.entity_id, "from_arm": via,
                                 "to_arm": arm.arm_id}))
        else:
            payload = {"entity": entity.entity_id, "arm": arm.arm_id}
            if dist is not None:
                payload["dist"] = float(dist)
            events.append(Event(EV_GRASP, state.tick, payload))

    def attempt_attach(self, state: WorldState, arm_id: str) -> WorldState:
        """Apply the grasp/release rules for one arm outside a full step."""
        self._update_grasp(state, state.arm(arm_id), state.events)
        return state

    # -------------------------------------------------------------- gravity

    def _posts(self, state: WorldState):
        return [e for e in state.entities if e.kind == "post"]

    def _rest_height_and_support(self, state: WorldState, entity: Entity):
        offset = support_offset(entity)
        x, y = entity.pose.position[0], entity.pose.position[1]
        if isinstance(entity.shape, Torus) and entity.kind == "peg":
            capture = self.spec.params.get("post_capture", 0.010)
            for post in self._posts(state):
                if math.hypot(x - post.pose.position[0], y - post.pose.position[1]) <= capture:
                    return TABLE_TOP + offset, post.entity_id
        for post in self._posts(state):
            post_r = post.shape.r
            if math.hypot(x - post.pose.position[0], y - post.pose.position[1]) <= post_r:
                post_top = post.pose.position[2] + post.shape.half_len + post_r
                return post_top + offset, post.entity_id
        return TABLE_TOP + offset, "table"

    def _apply_gravity(self, state: WorldState, events: list):
        for entity in state.entities:
            if entity.static or entity.attached_to is not None or entity.settled_on is not None:
                continue
            rest_z, support = self._rest_height_and_support(state, entity)
            z = entity.pose.position[2]
            if z <= rest_z + 1e-12:
                # released at rest height: re-settle without a landing event
                self._land(state, entity, rest_z, support, events, classify=False)
                continue
            entity.fall_speed += GRAVITY * self.dt
            new_z = z - entity.fall_speed * self.dt
            if new_z <= rest_z:
                self._land(state, entity, rest_z, support, events, classify=True)
            else:
                p = entity.pose.position
                entity.pose = Pose((p[0], p[1], new_z), entity.pose.orientation)

    def _land(self, state: WorldState, entity: Entity, rest_z: float, support: str,
              events: list, classify: bool):
        p = entity.pose.position
        entity.pose = Pose((p[0], p[1], rest_z), entity.pose.orientation)
        entity.fall_speed = 0.0
        entity.settled_on = support
        if classify:
            self._classify_landing(state, entity, support, events)

    def _classify_landing(self, state: WorldState, entity: Entity, support: str,
                          events: list):
        if not entity.was_grasped:
            return
        task = self.task_id
        pos = entity.pose.position
        if task == "pick_transfer" and entity.kind == "peg":
            start_post = state.progress["start_support"].get(entity.entity_id)
            if support != "table" and state.entity(support).kind == "post":
                events.append(Event(EV_PLACEMENT, state.tick,
                                    {"entity": entity.entity_id, "on": support}))
                if support != start_post and entity.was_lifted:
                    self._succeed(state, events)
                return
            self._drop_failure(state, entity, events)
        elif task == "pick_place" and entity.kind == "peg":
            goal = state.entity("goal0")
            dist = math.hypot(pos[0] - goal.pose.position[0], pos[1] - goal.pose.position[1])
            if dist <= self.spec.params.get("goal_radius", 0.02) and support == "table":
                events.append(Event(EV_PLACEMENT, state.tick,
                                    {"entity": entity.entity_id, "on": "goal0",
                                     "dist": float(dist)}))
                self._succeed(state, events)
            else:
                self._drop_failure(state, entity, events)
        else:
            self._drop_failure(state, entity, events)

    def _drop_failure(self, state: WorldState, entity: Entity, events: list):
        events.append(Event(EV_DROP, state.tick, {"entity": entity.entity_id}))
        self._fail(state, events, "drop")

    # -------------------------------------------------------------- predicates

    def _succeed(self, state: WorldState, events: list):
        if state.status == "running":
            state.status = "success"
            events.append(Event(EV_SUCCESS, state.tick, {"task": self.task_id}))

    def _fail(self, state: WorldState, events: list, reason: str):
        if state.status == "running":
            state.status = "failure"
            state.failure_reason = reason
            events.append(Event(EV_FAILURE, state.tick, {"task": self.task_id,
                                                         "reason": reason}))

    def check_predicates(self, state: WorldState) -> WorldState:
        self._check_predicates(state, state.events)
        return state

    def _needle_tip(self, state: WorldState):
        for e in state.entities:
            if e.kind == "needle":
                return e.needle_points_world()[0]
        return None

    def _check_predicates(self, state: WorldState, events: list):
        if state.status != "running":
            return
        task = self.task_id
        params = self.spec.params
        tip_r = self.tip_radius

        if task in ("reach", "reach_obstacle", "dual_reach", "dual_reach_obstacle"):
            obstacles = [e for e in state.entities if e.kind == "obstacle"]
            for arm in state.arms:
                for obs in obstacles:
                    dist = float(np.linalg.norm(obs.pose.position - arm.ee_pose.position))
                    if dist <= obs.shape.r + tip_r:
                        events.append(Event(EV_CONTACT_OBSTACLE, state.tick,
                                            {"entity": obs.entity_id, "arm": arm.arm_id,
                                             "dist": dist}))
                        self._fail(state, events, "contact_obstacle")
                        return
            touched = state.progress["touched"]
            for arm in state.arms:
                targets = [e for e in state.entities
                           if e.kind == "target" and e.arm in ("", arm.arm_id)]
                idx = touched[arm.arm_id]
                if idx < len(targets):
                    target = targets[idx]
                    dist = float(np.linalg.norm(target.pose.position - arm.ee_pose.position))
                    if dist <= target.shape.r + tip_r:
                        events.append(Event(EV_CONTACT_TARGET, state.tick,
                                            {"entity": target.entity_id,
                                             "arm": arm.arm_id, "dist": dist}))
                        touched[arm.arm_id] = idx + 1
            done = all(
                touched[arm.arm_id] >= len([e for e in state.entities
                                            if e.kind == "target"
                                            and e.arm in ("", arm.arm_id)])
                for arm in state.arms
            )
            if done:
                self._succeed(state, events)

        elif task in ("needle_lift", "peg_lift"):
            obj = next(e for e in state.entities if e.graspable)
            if obj.attached_to is not None:
                lift = obj.pose.position[2] - obj.spawn_pose.position[2]
                if lift >= params.get("lift_height", 0.05):
                    self._succeed(state, events)

        elif task == "needle_handover":
            needle = state.entity("needle0")
            if needle.attached_to == "psm2":
                self._succeed(state, events)

        elif task == "pick_transfer":
            peg = state.entity("peg0")
            if peg.attached_to is not None:
                clear = params.get("lift_clear", 0.065)
                if peg.pose.position[2] >= clear:
                    peg.was_lifted = True
            # success is decided at landing in _classify_landing

        elif task == "pick_place":
            pass  # success decided at landing

        elif task == "needle_ring":
            needle = state.entity("needle0")
            tip = needle.needle_points_world()[0]
            prev = state.progress.get("prev_tip")
            if needle.attached_to is not None and prev is not None:
                ring = state.entity("ring0")
                if self._segment_crosses_ring(np.asarray(prev), np.asarray(tip), ring):
                    events.append(Event(EV_RING_PASS, state.tick,
                                        {"entity": needle.entity_id}))
                    self._succeed(state, events)
            state.progress["prev_tip"] = tuple(float(v) for v in tip)

    @staticmethod
    def _segment_crosses_ring(p0: np.ndarray, p1: np.ndarray, ring: Entity) -> bool:
        aperture = ring.shape.major_r - ring.shape.minor_r
        normal = quat_rotate(ring.pose.orientation, (0.0, 0.0, 1.0))
        center = ring.pose.position
        s0 = float(np.dot(normal, p0 - center))
        s1 = float(np.dot(normal, p1 - center))
        if s0 * s1 >= 0.0:
            return False
        t = s0 / (s0 - s1)
        crossing = p0 + t * (p1 - p0)
        return float(np.linalg.norm(crossing - center)) <= aperture


# ------------------------------------------------------------------ snapshots

def snapshot(state: WorldState) -> WorldState:
    """Value copy safe to hand to the recorder or broadcaster."""
    return copy.deepcopy(state)


def _pose_obj(pose: Pose):
    return {"pos": [float(v) for v in pose.position],
            "quat": [float(v) for v in pose.orientation]}


def _shape_obj(shape):
    name = type(shape).__name__.lower()
    return {"name": name, **{k: float(v) for k, v in shape.__dict__.items()}}


def state_to_obj(state: WorldState) -> dict:
    """Full-precision canonical form; the digest and snapshot-equality basis."""
    return {
        "tick": state.tick,
        "task_id": state.task_id,
        "status": state.status,
        "failure_reason": state.failure_reason,
        "arms": [
            {
                "arm_id": a.arm_id,
                "q": [float(v) for v in a.q],
                "jaw": float(a.jaw),
                "ee": _pose_obj(a.ee_pose),
                "base": _pose_obj(a.base_pose),
                "held": a.held,
            }
            for a in state.arms
        ],
        "entities": [
            {
                "id": e.entity_id,
                "kind": e.kind,
                "shape": _shape_obj(e.shape),
                "pose": _pose_obj(e.pose),
                "graspable": e.graspable,
                "handles": [[float(v) for v in h] for h in e.grasp_handles],
                "attached_to": e.attached_to,
                "static": e.static,
                "params": {k: float(v) for k, v in e.params.items()},
                "arm": e.arm,
                "spawn_pose": _pose_obj(e.spawn_pose),
                "grip_rel": _pose_obj(e.grip_rel) if e.grip_rel else None,
                "fall_speed": float(e.fall_speed),
                "settled_on": e.settled_on,
                "was_grasped": e.was_grasped,
                "was_lifted": e.was_lifted,
            }
            for e in state.entities
        ],
        "events": [
            {"kind": ev.kind, "tick": ev.tick,
             "payload": {k: ev.payload[k] for k in sorted(ev.payload)}}
            for ev in state.events
        ],
        "progress": json.loads(json.dumps(state.progress, sort_keys=True)),
    }


_SHAPES_BY_NAME = {"sphere": Sphere, "capsule": Capsule, "box": Box, "torus": Torus}


def state_from_obj(obj: dict) -> WorldState:
    arms = [
        ArmState(
            arm_id=a["arm_id"],
            q=np.array(a["q"], dtype=np.float64),
            jaw=a["jaw"],
            ee_pose=Pose(a["ee"]["pos"], a["ee"]["quat"]),
            base_pose=Pose(a["base"]["pos"], a["base"]["quat"]),
            held=a["held"],
        )
        for a in obj["arms"]
    ]
    entities = []
    for e in obj["entities"]:
        shape_args = dict(e["shape"])
        cls = _SHAPES_BY_NAME[shape_args.pop("name")]
        ent = Entity(
            entity_id=e["id"],
            kind=e["kind"],
            shape=cls(**shape_args),
            pose=Pose(e["pose"]["pos"], e["pose"]["quat"]),
            graspable=e["graspable"],
            grasp_handles=tuple(tuple(h) for h in e["handles"]),
            attached_to=e["attached_to"],
            static=e["static"],
            params=dict(e["params"]),
            arm=e["arm"],
            spawn_pose=Pose(e["spawn_pose"]["pos"], e["spawn_pose"]["quat"]),
            grip_rel=Pose(e["grip_rel"]["pos"], e["grip_rel"]["quat"]) if e["grip_rel"] else None,
            fall_speed=e["fall_speed"],
            settled_on=e["settled_on"],
            was_grasped=e["was_grasped"],
            was_lifted=e["was_lifted"],
        )
        entities.append(ent)
    events = [Event(ev["kind"], ev["tick"], dict(ev["payload"])) for ev in obj["events"]]
    return WorldState(
        tick=obj["tick"],
        arms=arms,
        entities=entities,
        events=events,
        task_id=obj["task_id"],
        status=obj["status"],
        failure_reason=obj["failure_reason"],
        progress=obj["progress"],
    )


def state_digest(state: WorldState) -> str:
    text = json.dumps(state_to_obj(state), separators=(",", ":"), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()
