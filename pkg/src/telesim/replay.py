"""Deterministic session replay and multi-view export.

Replay re-executes the recorded task from its seed, feeds back the recorded
input packets, and demands that every re-emitted state packet is
byte-identical to the recorded one. On top of that stream, any number of
virtual cameras can be rendered post-hoc at any rate.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .engine import SessionEngine
from .kinematics import KinematicChain, builtin_chain
from .protocol import SessionLog, encode_state, read_session, validate_session
from .render import CameraSpec, render_frame, write_ppm
from .tasks import Catalog, builtin_catalog


class ReplayError(ValueError):
    pass


class ReplayDivergence(ReplayError):
    def __init__(self, tick: int, detail: str):
        super().__init__(f"replay diverged at tick {tick}: {detail}")
        self.tick = tick
        self.detail = detail


def _first_difference(recorded: bytes, replayed: bytes) -> str:
    a = json.loads(recorded)
    b = json.loads(replayed)

    def walk(x, y, path):
        if isinstance(x, dict) and isinstance(y, dict):
            for k in sorted(set(x) | set(y)):
                if k not in x:
                    return f"{path}.{k} only in replay"
                if k not in y:
                    return f"{path}.{k} only in recording"
                found = walk(x[k], y[k], f"{path}.{k}")
                if found:
                    return found
            return None
        if isinstance(x, list) and isinstance(y, list):
            if len(x) != len(y):
                return f"{path} length {len(x)} vs {len(y)}"
            for i, (xi, yi) in enumerate(zip(x, y)):
                found = walk(xi, yi, f"{path}[{i}]")
                if found:
                    return found
            return None
        if x != y:
            return f"{path}: recorded {x!r} vs replayed {y!r}"
        return None

    return walk(a, b, "state") or "byte-level difference only"


def _load(source) -> SessionLog:
    if isinstance(source, SessionLog):
        return source
    return read_session(source)


def replay(source, chain: KinematicChain = None, catalog: Catalog = None,
           strict_validate: bool = True):
    """Yield (tick, StatePacket) while checking byte-exactness against the log.

    Raises ReplayDivergence at the first mismatching tick and ReplayError on
    header digest mismatches (replay against different assets would diverge
    by construction).
    """
    log = _load(source)
    if strict_validate:
        report = validate_session(log)
        if not report.ok:
            raise ReplayError(f"session invalid before replay: {report}")
    chain = chain or builtin_chain(log.header.chain_name)
    catalog = catalog or builtin_catalog()
    if chain.digest != log.header.chain_digest:
        raise ReplayError(
            f"chain digest mismatch: log has {log.header.chain_digest[:12]}..., "
            f"loaded chain is {chain.digest[:12]}..."
        )
    if catalog.digest != log.header.catalog_digest:
        raise ReplayError(
            f"catalog digest mismatch: log has {log.header.catalog_digest[:12]}..., "
            f"loaded catalog is {catalog.digest[:12]}..."
        )
    engine = SessionEngine(
        log.header.task_id,
        log.header.seed,
        chain=chain,
        catalog=catalog,
        scale=log.header.scale,
        keep_frames=False,
    )
    if abs(engine.header.dt - log.header.dt) > 1e-15:
        raise ReplayError(f"dt mismatch: {engine.header.dt} vs {log.header.dt}")
    for frame in log.frames:
        state_packet = engine.step(frame.input)
        recorded = encode_state(frame.state)
        replayed = encode_state(state_packet)
        if recorded != replayed:
            raise ReplayDivergence(frame.state.tick,
                                   _first_difference(recorded, replayed))
        yield frame.state.tick, state_packet


def verify(source, chain=None, catalog=None) -> dict:
    """Divergence check over the whole log; returns a small summary dict."""
    log = _load(source)
    digest = hashlib.sha256()
    ticks = 0
    for _, sp in replay(log, chain=chain, catalog=catalog):
        digest.update(encode_state(sp))
        digest.update(b"\n")
        ticks += 1
    return {
        "task_id": log.header.task_id,
        "seed": log.header.seed,
        "ticks": ticks,
        "outcome": log.outcome,
        "state_stream_sha256": digest.hexdigest(),
    }


def replay_states(source, chain=None, catalog=None):
    """Yield (tick, WorldState) for consumers that need full states (render)."""
    log = _load(source)
    chain = chain or builtin_chain(log.header.chain_name)
    catalog = catalog or builtin_catalog()
    engine = SessionEngine(log.header.task_id, log.header.seed, chain=chain,
                           catalog=catalog, scale=log.header.scale, keep_frames=False)
    for frame in log.frames:
        state_packet = engine.step(frame.input)
        recorded = encode_state(frame.state)
        replayed = encode_state(state_packet)
        if recorded != replayed:
            raise ReplayDivergence(frame.state.tick,
                                   _first_difference(recorded, replayed))
        yield frame.state.tick, engine.state


@dataclass(frozen=True)
class RenderJob:
    session_path: str
    cameras: tuple                    # CameraSpec records
    out_dir: str
    export_rate: float = 30.0         # Hz
    format: str = "ppm"               # ppm | keypoints-csv

    def __post_init__(self):
        if self.format not in ("ppm", "keypoints-csv"):
            raise ValueError(f"unknown export format {self.format!r}")
        if not self.cameras:
            raise ValueError("at least one camera required")


def export_ticks(n_frames: int, rate_in: float, rate_out: float):
    """Ticks selected by the floor(t*rate_out/rate_in) subsampling rule."""
    if rate_out > rate_in:
        raise ValueError("export rate must not exceed the session rate")
    selected = []
    prev_index = -1
    for t in range(n_frames):
        index = math.floor(t * rate_out / rate_in)
        if index > prev_index:
            selected.append(t)
            prev_index = index
    return selected


def export_views(job: RenderJob, chain=None, catalog=None) -> dict:
    """Render the replayed session through every camera; returns the manifest."""
    log = _load(job.session_path)
    rate_in = 1.0 / log.header.dt
    ticks = set(export_ticks(len(log.frames), rate_in, job.export_rate))
    out_root = Path(job.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    files = []
    total = 0
    csv_rows = {i: ["tick,entity,handle,u,v,depth"] for i in range(len(job.cameras))}
    for tick, state in replay_states(job.session_path, chain=chain, catalog=catalog):
        if tick not in ticks:
            continue
        for ci, camera in enumerate(job.cameras):
            if job.format == "ppm":
                data = write_ppm(render_frame(state, camera))
                rel = f"cam{ci}/frame{tick:06d}.ppm"
                path = out_root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
                files.append({
                    "path": rel,
                    "bytes": len(data),
                    "sha256": hashlib.sha256(data).hexdigest(),
                })
                total += len(data)
            else:
                from .render import to_camera

                for entity in state.entities:
                    handles = entity.grasp_handles or ((0.0, 0.0, 0.0),)
                    indices = range(len(entity.grasp_handles)) if entity.grasp_handles else (-1,)
                    for hi, handle in zip(indices, handles):
                        world = entity.pose.transform_point(handle)
                        cam_pt = to_camera(camera, world)[0]
                        if cam_pt[2] <= camera.near:
                            continue
                        w, h = camera.resolution
                        u = camera.focal_px * cam_pt[0] / cam_pt[2] + w / 2.0
                        v = camera.focal_px * cam_pt[1] / cam_pt[2] + h / 2.0
                        csv_rows[ci].append(
                            f"{tick},{entity.entity_id},{hi},{u:.2f},{v:.2f},{cam_pt[2]:.5f}"
                        )
    if job.format == "keypoints-csv":
        for ci in csv_rows:
            rel = f"cam{ci}/keypoints.csv"
            path = out_root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            data = ("\n".join(csv_rows[ci]) + "\n").encode()
            path.write_bytes(data)
            files.append({
                "path": rel,
                "bytes": len(data),
                "sha256": hashlib.sha256(data).hexdigest(),
            })
            total += len(data)
    session_bytes = Path(job.session_path).stat().st_size
    manifest = {
        "session": str(job.session_path),
        "session_bytes": session_bytes,
        "format": job.format,
        "export_rate_hz": job.export_rate,
        "cameras": len(job.cameras),
        "frames_per_camera": len(ticks),
        "files": files,
        "total_bytes": total,
    }
    (out_root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
