"""Serial-chain kinematics: config-file chains, FK, geometric Jacobian, damped-least-squares IK.

Chains are declarative text configs (one ``joint`` record per line plus one
``ee_offset`` record); two configs ship with the package: ``psm6``, an
RCM-style six-joint instrument arm, and ``planar2``, a two-link planar arm
used as an analytic oracle in tests.

The IK solver is damped least squares with Levenberg-Marquardt damping
adaptation (steps that do not reduce the error are rejected and retried with
a larger damping factor) plus a deterministic multistart schedule, which is
what it takes to reach reliable convergence across the full joint-limit box
of the psm6 chain, including near the remote-center singularity.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from importlib import resources
from typing import NamedTuple

import numpy as np

from .geometry import Pose, quat_conj, quat_mul, quat_to_rotvec

REVOLUTE = "revolute"
PRISMATIC = "prismatic"

BUILTIN_CHAINS = ("psm6", "planar2")

_LAMBDA_MIN = 1e-5
_LAMBDA_MAX = 1e2


class ChainError(ValueError):
    pass


class ChainParseError(ChainError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str                 # revolute | prismatic
    axis: np.ndarray          # unit 3-vector in the joint frame
    origin: Pose              # fixed transform from the previous joint frame
    limits: tuple             # (lo, hi), radians or meters

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ChainError(f"unknown joint kind {self.kind!r}")
        lo, hi = self.limits
        if not lo < hi:
            raise ChainError(f"joint {self.name!r}: limits inverted ({lo} >= {hi})")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ChainError(f"joint {self.name!r}: axis is not unit-norm")


@dataclass(frozen=True)
class KinematicChain:
    name: str
    joints: tuple            # tuple[JointSpec]
    ee_offset: Pose
    digest: str              # sha256 of the canonical config text

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ChainError("chain needs at least one joint")

    @property
    def n(self) -> int:
        return len(self.joints)

    def lower_limits(self) -> np.ndarray:
        return self._fast()["lo"].copy()

    def upper_limits(self) -> np.ndarray:
        return self._fast()["hi"].copy()

    def neutral_q(self) -> np.ndarray:
        f = self._fast()
        return 0.5 * (f["lo"] + f["hi"])

    def _fast(self) -> dict:
        """Plain-float chain tables for the hot FK/Jacobian path."""
        cached = self.__dict__.get("_fast_tables")
        if cached is None:
            cached = {
                "origin_pos": tuple(tuple(j.origin.position) for j in self.joints),
                "origin_quat": tuple(tuple(j.origin.orientation) for j in self.joints),
                "axis": tuple(tuple(j.axis) for j in self.joints),
                "is_rev": tuple(j.kind == REVOLUTE for j in self.joints),
                "ee_pos": tuple(self.ee_offset.position),
                "ee_quat": tuple(self.ee_offset.orientation),
                "lo": np.array([j.limits[0] for j in self.joints]),
                "hi": np.array([j.limits[1] for j in self.joints]),
            }
            object.__setattr__(self, "_fast_tables", cached)
        return cached


@dataclass(frozen=True)
class IkSettings:
    """Solver knobs; damping is the initial Levenberg-Marquardt factor."""

    damping: float = 0.05
    max_iters: int = 100      # iteration cap per start
    pos_tol: float = 1e-4
    ori_tol: float = 1e-3
    step_scale: float = 1.0
    ori_weight: float = 1.0   # 0 selects the orientation-free mode
    restarts: int = 19        # deterministic extra starts tried after q0 fails

    def __post_init__(self):
        if self.damping <= 0 or self.pos_tol <= 0 or self.ori_tol <= 0 or self.step_scale <= 0:
            raise ValueError("IK settings must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.ori_weight < 0 or self.restarts < 0:
            raise ValueError("ori_weight and restarts must be >= 0")


class IkResult(NamedTuple):
    q: np.ndarray
    converged: bool
    iters: int               # total iterations across all starts


def canonical_chain_text(text: str) -> str:
    """Strip comments and redundant whitespace; the digest input."""
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(" ".join(line.split()))
    return "\n".join(lines) + "\n"


def _parse_floats(value: str, count: int, line_no: int, key: str):
    parts = value.split(",")
    if len(parts) != count:
        raise ChainParseError(line_no, f"{key} needs {count} comma-separated values")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ChainParseError(line_no, f"{key} has a non-numeric value: {value!r}")


def _parse_kv(tokens, line_no):
    kv = {}
    for tok in tokens:
        if "=" not in tok:
            raise ChainParseError(line_no, f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        kv[k] = v
    return kv


def load_chain(config_text: str, name: str = "chain") -> KinematicChain:
    """Parse a chain config; digest is the SHA-256 of the canonical text."""
    joints = []
    ee_offset = None
    for line_no, raw in enumerate(config_text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        record = tokens[0]
        if record == "joint":
            if len(tokens) < 3:
                raise ChainParseError(line_no, "joint record needs a name and a kind")
            jname, kind = tokens[1], tokens[2]
            kv = _parse_kv(tokens[3:], line_no)
            for key in ("axis", "origin_pos", "origin_quat", "limits"):
                if key not in kv:
                    raise ChainParseError(line_no, f"joint {jname!r} missing {key}")
            axis = np.array(_parse_floats(kv["axis"], 3, line_no, "axis"))
            pos = _parse_floats(kv["origin_pos"], 3, line_no, "origin_pos")
            quat = _parse_floats(kv["origin_quat"], 4, line_no, "origin_quat")
            lo, hi = _parse_floats(kv["limits"], 2, line_no, "limits")
            if not lo < hi:
                raise ChainParseError(line_no, f"joint {jname!r}: limits inverted")
            if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
                raise ChainParseError(line_no, f"joint {jname!r}: axis is not unit-norm")
            axis = axis / np.linalg.norm(axis)
            try:
                joints.append(JointSpec(jname, kind, axis, Pose(pos, quat), (lo, hi)))
            except ChainError as e:
                raise ChainParseError(line_no, str(e))
        elif record == "ee_offset":
            kv = _parse_kv(tokens[1:], line_no)
            pos = _parse_floats(kv.get("origin_pos", "0,0,0"), 3, line_no, "origin_pos")
            quat = _parse_floats(kv.get("origin_quat", "1,0,0,0"), 4, line_no, "origin_quat")
            ee_offset = Pose(pos, quat)
        else:
            raise ChainParseError(line_no, f"unknown record {record!r}")
    if not joints:
        raise ChainError("chain config declares no joints")
    if ee_offset is None:
        raise ChainError("chain config missing ee_offset record")
    digest = hashlib.sha256(canonical_chain_text(config_text).encode()).hexdigest()
    return KinematicChain(name, tuple(joints), ee_offset, digest)


def builtin_chain_text(name: str) -> str:
    if name not in BUILTIN_CHAINS:
        raise ChainError(f"unknown built-in chain {name!r} (have {BUILTIN_CHAINS})")
    return resources.files("telesim").joinpath(f"data/chains/{name}.txt").read_text()


def builtin_chain(name: str) -> KinematicChain:
    return load_chain(builtin_chain_text(name), name=name)


def _check_q(chain: KinematicChain, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape != (chain.n,):
        raise ChainError(f"joint vector length {q.shape[0]} != chain joint count {chain.n}")
    return q


# plain-tuple quaternion helpers for the hot path

def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _qrot(q, v):
    w, x, y, z = q
    vx, vy, vz = v
    tx = y * vz - z * vy + w * vx
    ty = z * vx - x * vz + w * vy
    tz = x * vy - y * vx + w * vz
    return (vx + 2 * (y * tz - z * ty), vy + 2 * (z * tx - x * tz), vz + 2 * (x * ty - y * tx))


def _fk_core(chain: KinematicChain, q, want_jac: bool):
    """End-effector (pos tuple, quat tuple) and optional 6xn geometric Jacobian."""
    f = chain._fast()
    opos, oquat, axis, is_rev = f["origin_pos"], f["origin_quat"], f["axis"], f["is_rev"]
    px, py, pz = 0.0, 0.0, 0.0
    quat = (1.0, 0.0, 0.0, 0.0)
    jdata = []
    for i in range(len(axis)):
        dx, dy, dz = _qrot(quat, opos[i])
        px += dx; py += dy; pz += dz
        quat = _qmul(quat, oquat[i])
        aw = _qrot(quat, axis[i])
        if is_rev[i]:
            if want_jac:
                jdata.append((px, py, pz, aw, True))
            half = 0.5 * q[i]
            s = math.sin(half)
            ax, ay, az = axis[i]
            quat = _qmul(quat, (math.cos(half), ax * s, ay * s, az * s))
        else:
            if want_jac:
                jdata.append((0.0, 0.0, 0.0, aw, False))
            px += aw[0] * q[i]; py += aw[1] * q[i]; pz += aw[2] * q[i]
    dx, dy, dz = _qrot(quat, f["ee_pos"])
    px += dx; py += dy; pz += dz
    quat = _qmul(quat, f["ee_quat"])
    if not want_jac:
        return (px, py, pz), quat, None
    J = np.empty((6, len(axis)))
    for i, (jx, jy, jz, aw, rev) in enumerate(jdata):
        ax, ay, az = aw
        if rev:
            rx, ry, rz = px - jx, py - jy, pz - jz
            J[0, i] = ay * rz - az * ry
            J[1, i] = az * rx - ax * rz
            J[2, i] = ax * ry - ay * rx
            J[3, i] = ax; J[4, i] = ay; J[5, i] = az
        else:
            J[0, i] = ax; J[1, i] = ay; J[2, i] = az
            J[3, i] = 0.0; J[4, i] = 0.0; J[5, i] = 0.0
    return (px, py, pz), quat, J


def fk(chain: KinematicChain, q) -> Pose:
    """Pose of the end-effector center; pure function of (chain, q)."""
    q = _check_q(chain, q)
    pos, quat, _ = _fk_core(chain, q, want_jac=False)
    return Pose(pos, quat)


def fk_frames(chain: KinematicChain, q) -> list:
    """World pose of every joint frame, then the end-effector frame (n+1 poses)."""
    q = _check_q(chain, q)
    frames = []
    cur = Pose.identity()
    for spec, qi in zip(chain.joints, q):
        cur = cur.compose(spec.origin)
        if spec.kind == REVOLUTE:
            half = 0.5 * qi
            s = math.sin(half)
            rot = (math.cos(half), spec.axis[0] * s, spec.axis[1] * s, spec.axis[2] * s)
            cur = Pose(cur.position, _qmul(tuple(cur.orientation), rot))
        else:
            cur = Pose(cur.position + np.array(_qrot(tuple(cur.orientation), tuple(spec.axis))) * qi,
                       cur.orientation)
        frames.append(cur)
    frames.append(cur.compose(chain.ee_offset))
    return frames


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Geometric Jacobian (6 x n) of the end-effector center: linear rows then angular."""
    q = _check_q(chain, q)
    _, _, J = _fk_core(chain, q, want_jac=True)
    return J


def clamp_limits(chain: KinematicChain, q) -> np.ndarray:
    q = _check_q(chain, q)
    if not np.all(np.isfinite(q)):
        raise ChainError("non-finite joint value")
    f = chain._fast()
    return np.clip(q, f["lo"], f["hi"])


def pose_error(current: Pose, target: Pose):
    """(position error, orientation error as a rotation vector), target minus current."""
    e_pos = target.position - current.position
    e_ang = quat_to_rotvec(quat_mul(target.orientation, quat_conj(current.orientation)))
    return e_pos, e_ang


def _rotvec(q):
    w, x, y, z = q
    if w < 0:
        w, x, y, z = -w, -x, -y, -z
    s = math.sqrt(x * x + y * y + z * z)
    if s < 1e-12:
        return (0.0, 0.0, 0.0)
    a = 2.0 * math.atan2(s, min(1.0, w)) / s
    return (a * x, a * y, a * z)


def _ik_errors(chain, q, tp, tq, want_jac=True):
    cp, cq, J = _fk_core(chain, q, want_jac)
    ep = (tp[0] - cp[0], tp[1] - cp[1], tp[2] - cp[2])
    ea = _rotvec(_qmul(tq, (cq[0], -cq[1], -cq[2], -cq[3])))
    pe = math.sqrt(ep[0] ** 2 + ep[1] ** 2 + ep[2] ** 2)
    ae = math.sqrt(ea[0] ** 2 + ea[1] ** 2 + ea[2] ** 2)
    return ep, ea, pe, ae, J


def _ik_attempt(chain, q, tp, tq, s: IkSettings, max_iters: int, ori_weight: float,
                lo, hi, lohi):
    """One LM descent from q; reflects limit-saturated joints when jammed.

    Returns (q, converged, iterations used). The combined error (pos + 0.1*ang)
    is non-increasing over accepted steps because worse steps are rejected.
    """
    eye6 = np.eye(6)
    lam = s.damping
    ow = ori_weight
    ep, ea, pe, ae, J = _ik_errors(chain, q, tp, tq)
    reflections = 0
    it = 0
    while it < max_iters:
        if pe <= s.pos_tol and (ow == 0.0 or ae <= s.ori_tol):
            return q, True, it
        Jw = J if ow == 1.0 else np.vstack([J[:3], ow * J[3:]])
        e = np.array([ep[0], ep[1], ep[2], ow * ea[0], ow * ea[1], ow * ea[2]])
        x = np.linalg.solve(Jw @ Jw.T + (lam * lam) * eye6, e)
        q_new = np.clip(q + s.step_scale * (Jw.T @ x), lo, hi)
        epn, ean, pen, aen, Jn = _ik_errors(chain, q_new, tp, tq)
        it += 1
        err_cur = pe + (0.1 * ae if ow != 0.0 else 0.0)
        err_new = pen + (0.1 * aen if ow != 0.0 else 0.0)
        if err_new < err_cur:
            q, ep, ea, pe, ae, J = q_new, epn, ean, pen, aen, Jn
            lam = max(lam / 3.0, _LAMBDA_MIN)
        else:
            lam *= 4.0
            if lam > _LAMBDA_MAX:
                at_lo = q <= lo + 1e-9
                at_hi = q >= hi - 1e-9
                if reflections < 3 and (at_lo.any() or at_hi.any()):
                    # mirror saturated joints about mid-range to escape the corner
                    q = q.copy()
                    q[at_lo] = lohi[at_lo] - q[at_lo]
                    q[at_hi] = lohi[at_hi] - q[at_hi]
                    np.clip(q, lo, hi, out=q)
                    ep, ea, pe, ae, J = _ik_errors(chain, q, tp, tq)
                    lam = s.damping
                    reflections += 1
                else:
                    return q, False, it
    if pe <= s.pos_tol and (ow == 0.0 or ae <= s.ori_tol):
        return q, True, it
    return q, False, it


def ik_solve(chain: KinematicChain, q0, target: Pose, settings: IkSettings = None) -> IkResult:
    """Damped-least-squares IK toward a pose target.

    Joint limits are enforced by clamping after every step, so every iterate
    is feasible. A failed descent is retried from a deterministic seed
    schedule (orientation-free pre-solve, then a golden-ratio lattice over
    the limit box); identical inputs always produce identical results.
    """
    s = settings or IkSettings()
    q = _check_q(chain, q0).copy()
    f = chain._fast()
    lo, hi = f["lo"], f["hi"]
    if np.any(q < lo - 1e-12) or np.any(q > hi + 1e-12):
        raise ChainError("q0 outside joint limits")
    if not (np.all(np.isfinite(target.position)) and np.all(np.isfinite(target.orientation))):
        raise ChainError("non-finite IK target")

    tp = tuple(target.position)
    tq = tuple(target.orientation)
    lohi = lo + hi
    span = hi - lo
    n = chain.n

    total = 0
    q_out, ok, used = _ik_attempt(chain, q, tp, tq, s, s.max_iters, s.ori_weight, lo, hi, lohi)
    total += used
    if ok or s.restarts == 0:
        return IkResult(q_out, ok, total)

    for k in range(s.restarts):
        if k == 0:
            # position-only pre-solve from mid-range, then track orientation too
            seed, _, used = _ik_attempt(chain, 0.5 * lohi, tp, tq, s, 30, 0.0, lo, hi, lohi)
            total += used
        else:
            frac = np.array([(0.5 + k * 0.381966011 * (i + 1.7)) % 1.0 for i in range(n)])
            seed = lo + frac * span
        q_out, ok, used = _ik_attempt(chain, seed, tp, tq, s, s.max_iters, s.ori_weight,
                                      lo, hi, lohi)
        total += used
        if ok:
            return IkResult(q_out, True, total)
    return IkResult(q_out, False, total)
