"""Task catalog: the declarative scene file behind every task world.

The catalog text lists, per task, the arms in play, the entities with their
shapes and spawn randomization ranges, and the predicate parameters. Its
content digest is recorded in session headers so a replay can refuse to run
against a different catalog.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources

TASK_IDS = (
    "reach",
    "reach_obstacle",
    "dual_reach",
    "dual_reach_obstacle",
    "needle_lift",
    "needle_handover",
    "peg_lift",
    "pick_transfer",
    "pick_place",
    "needle_ring",
)

ENTITY_KINDS = ("target", "obstacle", "peg", "needle", "ring", "board", "table", "post")
SHAPE_NAMES = ("sphere", "capsule", "box", "torus")

# kinds that never move; everything else is subject to grasping and gravity
STATIC_KINDS = ("target", "obstacle", "ring", "board", "table", "post")


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class EntityTemplate:
    entity_id: str
    kind: str
    shape_name: str
    shape_args: dict                 # numeric shape parameters
    placement: dict                  # placement directives (see catalog header)
    graspable: bool = False
    handles: tuple = ()              # entity-frame grasp points
    arm: str = ""                    # owning arm for per-arm targets
    attach: str = ""                 # arm holding this entity at reset


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    arms: tuple
    ik_mode: str                     # full | position_only
    entities: tuple                  # EntityTemplate, declaration order
    params: dict


@dataclass(frozen=True)
class Catalog:
    tasks: dict
    digest: str

    def task(self, task_id: str) -> TaskSpec:
        if task_id not in self.tasks:
            raise CatalogError(f"unknown task {task_id!r}")
        return self.tasks[task_id]


def canonical_catalog_text(text: str) -> str:
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(" ".join(line.split()))
    return "\n".join(lines) + "\n"


def _parse_float_pair(value: str, line_no: int, key: str):
    parts = value.split(",")
    if len(parts) != 2:
        raise CatalogError(f"line {line_no}: {key} needs two comma-separated values")
    return float(parts[0]), float(parts[1])


def _parse_vec(value: str, n: int, line_no: int, key: str):
    parts = value.split(",")
    if len(parts) != n:
        raise CatalogError(f"line {line_no}: {key} needs {n} values")
    return tuple(float(p) for p in parts)


_SHAPE_KEYS = {
    "sphere": {"r"},
    "capsule": {"r", "half_len"},
    "box": {"hx", "hy", "hz"},
    "torus": {"major", "minor"},
}
_NEEDLE_KEYS = {"arc_r", "segments"}


def _parse_entity(tokens, line_no):
    if len(tokens) < 3:
        raise CatalogError(f"line {line_no}: entity needs id, kind and shape")
    entity_id, kind, shape_name = tokens[0], tokens[1], tokens[2]
    if kind not in ENTITY_KINDS:
        raise CatalogError(f"line {line_no}: unknown entity kind {kind!r}")
    if shape_name not in SHAPE_NAMES:
        raise CatalogError(f"line {line_no}: unknown shape {shape_name!r}")
    shape_args = {}
    placement = {}
    graspable = False
    handles = ()
    arm = ""
    attach = ""
    allowed_shape = set(_SHAPE_KEYS[shape_name])
    if kind == "needle":
        allowed_shape |= _NEEDLE_KEYS
    for tok in tokens[3:]:
        if tok == "graspable":
            graspable = True
            continue
        if tok == "rest":
            placement["rest"] = True
            continue
        if "=" not in tok:
            raise CatalogError(f"line {line_no}: expected key=value, got {tok!r}")
        key, value = tok.split("=", 1)
        if key in allowed_shape:
            shape_args[key] = float(value)
        elif key in ("spawn_x", "spawn_y", "spawn_z", "yaw"):
            placement[key] = _parse_float_pair(value, line_no, key)
        elif key == "at":
            placement["at"] = _parse_vec(value, 3, line_no, "at")
        elif key == "at_z":
            placement["at_z"] = float(value)
        elif key == "quat":
            placement["quat"] = _parse_vec(value, 4, line_no, "quat")
        elif key == "on":
            placement["on"] = value
        elif key == "jitter":
            placement["jitter"] = float(value)
        elif key == "min_xy":
            ref, _, dist = value.partition(":")
            if not dist:
                raise CatalogError(f"line {line_no}: min_xy needs <entity>:<distance>")
            placement["min_xy"] = (ref, float(dist))
        elif key == "avoid":
            point, _, dist = value.partition(":")
            if not dist:
                raise CatalogError(f"line {line_no}: avoid needs <x,y>:<distance>")
            x, y = _parse_float_pair(point, line_no, "avoid")
            placement["avoid"] = (x, y, float(dist))
        elif key == "handles":
            handles = tuple(_parse_vec(h, 3, line_no, "handles") for h in value.split(";"))
        elif key == "arm":
            arm = value
        elif key == "attach":
            attach = value
        else:
            raise CatalogError(f"line {line_no}: unknown entity key {key!r}")
    missing = _SHAPE_KEYS[shape_name] - set(shape_args)
    if kind == "needle":
        missing -= {"half_len"}    # derived from the arc geometry
    if missing:
        raise CatalogError(
            f"line {line_no}: shape {shape_name} missing {sorted(missing)}"
        )
    if kind == "needle" and "arc_r" not in shape_args:
        raise CatalogError(f"line {line_no}: needle entity needs arc_r")
    for v in shape_args.values():
        if v <= 0:
            raise CatalogError(f"line {line_no}: shape parameters must be positive")
    return EntityTemplate(
        entity_id=entity_id,
        kind=kind,
        shape_name=shape_name,
        shape_args=shape_args,
        placement=placement,
        graspable=graspable,
        handles=handles,
        arm=arm,
        attach=attach,
    )


def parse_catalog(text: str) -> Catalog:
    tasks = {}
    current_id = None
    arms: tuple = ()
    ik_mode = "full"
    entities: list = []
    params: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "task":
            if current_id is not None:
                raise CatalogError(f"line {line_no}: nested task block")
            if len(tokens) != 2:
                raise CatalogError(f"line {line_no}: task needs exactly one id")
            current_id = tokens[1]
            arms, ik_mode, entities, params = (), "full", [], {}
        elif head == "end":
            if current_id is None:
                raise CatalogError(f"line {line_no}: end outside task block")
            if not arms:
                raise CatalogError(f"task {current_id!r}: no arms declared")
            if current_id in tasks:
                raise CatalogError(f"duplicate task {current_id!r}")
            tasks[current_id] = TaskSpec(current_id, arms, ik_mode, tuple(entities), params)
            current_id = None
        elif current_id is None:
            raise CatalogError(f"line {line_no}: {head!r} outside task block")
        elif head == "arms":
            arms = tuple(tokens[1].split(","))
        elif head == "ik":
            if tokens[1] not in ("full", "position_only"):
                raise CatalogError(f"line {line_no}: unknown ik mode {tokens[1]!r}")
            ik_mode = tokens[1]
        elif head == "entity":
            entities.append(_parse_entity(tokens[1:], line_no))
        elif head == "param":
            for tok in tokens[1:]:
                key, _, value = tok.partition("=")
                params[key] = float(value)
        else:
            raise CatalogError(f"line {line_no}: unknown record {head!r}")
    if current_id is not None:
        raise CatalogError(f"task {current_id!r}: missing end")
    digest = hashlib.sha256(canonical_catalog_text(text).encode()).hexdigest()
    return Catalog(tasks, digest)


def builtin_catalog_text() -> str:
    return resources.files("telesim").joinpath("data/task_catalog.txt").read_text()


_builtin_cache = None


def builtin_catalog() -> Catalog:
    global _builtin_cache
    if _builtin_cache is None:
        _builtin_cache = parse_catalog(builtin_catalog_text())
    return _builtin_cache
