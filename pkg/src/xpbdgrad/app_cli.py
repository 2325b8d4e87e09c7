"""Scene files, mesh I/O, frame export and the ``xpbdgrad`` command line.

Geometry text format (OBJ subset, 1-based indices)::

    v x y z          vertex
    f i j k [l ...]  polygon; ``i/t/n`` tokens keep the first field; polygons
                     with more than three corners become the fan
                     (i, j, k), (i, k, l), ...
    # ...            comment; vt, vn, o, g, s, usemtl and mtllib are ignored

Tetrahedra live in a companion element file with ``t i j k l`` lines
(also 1-based).  Scene files are YAML documents in SI units; see README.md
for the schema.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .collision import Capsule, HalfSpace, Sphere, TriangleMeshCollider
from .constraints import (ConstraintSet, MaterialParams, build_cloth_constraints, build_distance_constraints,
                          build_solid_constraints)
from .core_model import MassModel, Mesh, MeshError, SimConfig, build_sim_object
from .derivative_engine import verify_derivative_blocks
from .kernels import KIND_NAMES
from .forward_solver import simulate
from .inverse_opt import (ControlVector, KeyframeL2, PointCloud, compute_gradient, finite_difference_oracle,
                          run_optimization)
from .scene import CONTROL_FAMILIES, Scene

logger = logging.getLogger(__name__)

_IGNORED = ("vt", "vn", "o", "g", "s", "usemtl", "mtllib", "l")


class SceneError(ValueError):
    """Invalid scene document; ``field`` names the offending key path."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = "".join([f"{field}: " if field else "", f"line {line}: " if line else ""])
        super().__init__(where + message)
        self.field = field
        self.line = line


# ----------------------------------------------------------------------------- mesh I/O

def _index(tok: str, n_vertices: int | None, path, lineno: int) -> int:
    try:
        i = int(tok.split("/")[0])
    except ValueError:
        raise MeshError(f"{path}:{lineno}: bad index {tok!r}") from None
    if i < 1 or (n_vertices is not None and i > n_vertices):
        raise MeshError(f"{path}:{lineno}: index {i} out of range 1..{n_vertices}")
    return i - 1


def read_elements(path, n_vertices: int) -> np.ndarray:
    tets = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            tok = raw.split("#", 1)[0].split()
            if not tok:
                continue
            if tok[0] != "t" or len(tok) != 5:
                raise MeshError(f"{path}:{lineno}: expected 't i j k l'")
            tets.append([_index(t, n_vertices, path, lineno) for t in tok[1:]])
    t = np.array(tets, dtype=np.int64).reshape(-1, 4)
    key = np.sort(t, axis=1)
    if len(np.unique(key, axis=0)) != len(key):
        raise MeshError(f"{path}: duplicate tetrahedron")
    return t


def load_mesh(path, elements=None) -> Mesh:
    """Read a geometry file; tetrahedra come from ``elements`` or a sibling ``.tet`` file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    verts, faces, face_lines = [], [], []
    with open(path) as fh:
        lines = fh.readlines()
    for lineno, raw in enumerate(lines, 1):
        tok = raw.split("#", 1)[0].split()
        if not tok or tok[0] in _IGNORED:
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise MeshError(f"{path}:{lineno}: vertex needs three coordinates")
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise MeshError(f"{path}:{lineno}: bad coordinate") from None
        elif tok[0] == "f":
            if len(tok) < 4:
                raise MeshError(f"{path}:{lineno}: face needs at least three corners")
            faces.append(tok[1:])
            face_lines.append(lineno)
        else:
            raise MeshError(f"{path}:{lineno}: unknown record {tok[0]!r}")
    tris, seen = [], {}
    for toks, lineno in zip(faces, face_lines):
        ids = [_index(t, len(verts), path, lineno) for t in toks]
        if len(set(ids)) != len(ids):
            raise MeshError(f"{path}:{lineno}: face repeats a vertex")
        key = tuple(sorted(ids))
        if key in seen:
            raise MeshError(f"{path}:{lineno}: duplicate of the face on line {seen[key]}")
        seen[key] = lineno
        tris.extend([ids[0], ids[k], ids[k + 1]] for k in range(1, len(ids) - 1))
    tets = np.zeros((0, 4), dtype=np.int64)
    companion = Path(elements) if elements is not None else path.with_suffix(".tet")
    if elements is not None and not companion.is_file():
        raise FileNotFoundError(f"element file not found: {companion}")
    if companion.is_file():
        tets = read_elements(companion, len(verts))
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3), tets)


def _fmt(a) -> str:
    return " ".join(repr(float(c)) for c in a)


def save_mesh(mesh: Mesh, path, positions=None) -> list[Path]:
    """Write ``mesh`` (optionally at other positions); returns the files written."""
    path = Path(path)
    x = mesh.rest_positions if positions is None else np.asarray(positions, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.writelines(f"v {_fmt(p)}\n" for p in x)
        fh.writelines(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.triangles)
    out = [path]
    if len(mesh.tetrahedra):
        tp = path.with_suffix(".tet")
        with open(tp, "w") as fh:
            fh.writelines("t " + " ".join(str(i + 1) for i in t) + "\n" for t in mesh.tetrahedra)
        out.append(tp)
    return out


def export_frames(trajectory, out_dir, stride: int = 1) -> list[Path]:
    """Positions of every ``stride``-th state as ``frame_%06d.obj`` (vertex lines only)."""
    states = trajectory.states if hasattr(trajectory, "states") else list(trajectory)
    if not states:
        raise ValueError("trajectory is empty")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"directory not writable: {out}")
    files = []
    last = len(states) - 1 if len(states) > 1 else 1
    for n in range(0, last, stride):
        p = out / f"frame_{n:06d}.obj"
        with open(p, "w") as fh:
            fh.writelines(f"v {_fmt(q)}\n" for q in states[n].x.reshape(-1, 3))
        files.append(p)
    return files


# ----------------------------------------------------------------------------- scene files

@dataclass
class LoadedScene:
    scene: Scene
    controls: ControlVector | None
    goal: object | None
    canonical: dict
    path: Path
    iterations: int = 0
    loss_floor: float = 0.0
    frame_stride: int = 1


_TOP_KEYS = {"mesh", "density", "masses", "pins", "materials", "distance", "bending", "initial_velocity",
             "initial_position", "colliders", "simulation", "controls", "goal", "optimization", "output"}


def _get(d: dict, key: str, where: str, kind, default=None, required=False):
    if key not in d or d[key] is None:
        if required:
            raise SceneError("missing required field", f"{where}.{key}".lstrip("."))
        return default
    v = d[key]
    try:
        if kind is float:
            return float(v)
        if kind is int:
            if isinstance(v, bool) or float(v) != int(v):
                raise ValueError
            return int(v)
        if kind is bool:
            if not isinstance(v, bool):
                raise ValueError
            return v
        if kind is str:
            if not isinstance(v, str):
                raise ValueError
            return v
        return kind(v)
    except (TypeError, ValueError):
        raise SceneError(f"expected {getattr(kind, '__name__', kind)}, got {v!r}",
                         f"{where}.{key}".lstrip(".")) from None


def _vec(v, n, where):
    try:
        a = np.asarray(v, dtype=float).ravel()
    except (TypeError, ValueError):
        raise SceneError("expected numbers", where) from None
    if n is not None and a.size != n:
        raise SceneError(f"expected {n} numbers, got {a.size}", where)
    return a


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise SceneError("expected a mapping", where or None)
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise SceneError(f"unknown field {extra[0]!r}", where or None)


def _per_vertex(v, V, where):
    a = _vec(v, None, where)
    if a.size == 3:
        return np.tile(a, V)
    if a.size != 3 * V:
        raise SceneError(f"expected 3 or {3 * V} numbers", where)
    return a


def _positions(spec, base: Path, V: int, rest: np.ndarray, where: str) -> np.ndarray:
    """Keyframe positions: a geometry file, an inline list or a rigid translation of the rest shape."""
    if isinstance(spec, str):
        p = (base / spec).resolve()
        if not p.is_file():
            raise SceneError(f"file not found: {spec}", where)
        x = load_mesh(p).rest_positions.ravel()
        if x.size != 3 * V:
            raise SceneError(f"{spec} has {x.size // 3} vertices, mesh has {V}", where)
        return x
    if isinstance(spec, dict):
        _check_keys(spec, {"translate"}, where)
        return (rest.reshape(-1, 3) + _vec(spec["translate"], 3, where + ".translate")).ravel()
    a = _vec(spec, None, where)
    if a.size != 3 * V:
        raise SceneError(f"expected {3 * V} numbers", where)
    return a


def _collider(d, i, base):
    where = f"colliders[{i}]"
    if not isinstance(d, dict) or "type" not in d:
        raise SceneError("collider needs a type", where)
    t = d["type"]
    if t == "sphere":
        _check_keys(d, {"type", "center", "radius"}, where)
        return Sphere(_vec(d.get("center"), 3, where + ".center"), _get(d, "radius", where, float, required=True))
    if t == "capsule":
        _check_keys(d, {"type", "p", "q", "radius"}, where)
        return Capsule(_vec(d.get("p"), 3, where + ".p"), _vec(d.get("q"), 3, where + ".q"),
                       _get(d, "radius", where, float, required=True))
    if t == "plane":
        _check_keys(d, {"type", "normal", "offset"}, where)
        return HalfSpace(_vec(d.get("normal"), 3, where + ".normal"), _get(d, "offset", where, float, 0.0))
    if t == "mesh":
        _check_keys(d, {"type", "path"}, where)
        p = (base / _get(d, "path", where, str, required=True)).resolve()
        if not p.is_file():
            raise SceneError(f"file not found: {d['path']}", where + ".path")
        m = load_mesh(p)
        return TriangleMeshCollider(m.rest_positions, m.triangles)
    raise SceneError(f"unknown collider type {t!r}", where + ".type")


def _collider_echo(c) -> dict:
    if isinstance(c, Sphere):
        return {"type": "sphere", "center": c.center.tolist(), "radius": float(c.radius)}
    if isinstance(c, Capsule):
        return {"type": "capsule", "p": c.p.tolist(), "q": c.q.tolist(), "radius": float(c.radius)}
    if isinstance(c, HalfSpace):
        return {"type": "plane", "normal": c.normal.tolist(), "offset": float(c.offset)}
    return {"type": "mesh", "vertices": len(c.vertices), "triangles": len(c.triangles)}


def load_scene(path) -> LoadedScene:
    """Parse and validate a YAML scene; every derived quantity is built from the geometry."""
    path = Path(path).resolve()
    if not path.is_file():
        raise FileNotFoundError(f"scene file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SceneError(f"not valid YAML: {getattr(exc, 'problem', exc)}",
                         line=None if mark is None else mark.line + 1) from None
    if not isinstance(doc, dict):
        raise SceneError("scene must be a mapping")
    _check_keys(doc, _TOP_KEYS, "")
    base = path.parent

    # geometry
    mspec = doc.get("mesh")
    if isinstance(mspec, str):
        mspec = {"path": mspec}
    if not isinstance(mspec, dict) or "path" not in mspec:
        raise SceneError("missing required field", "mesh.path")
    _check_keys(mspec, {"path", "elements"}, "mesh")
    mpath = (base / mspec["path"]).resolve()
    if not mpath.is_file():
        raise SceneError(f"file not found: {mspec['path']}", "mesh.path")
    epath = None if mspec.get("elements") is None else (base / mspec["elements"]).resolve()
    if epath is not None and not epath.is_file():
        raise SceneError(f"file not found: {mspec['elements']}", "mesh.elements")
    mesh = load_mesh(mpath, epath)
    V = mesh.vertex_count

    # simulation settings
    sim = doc.get("simulation") or {}
    _check_keys(sim, {"dt", "iterations", "gravity", "horizon", "collision_thickness", "collision_compliance",
                      "collision_margin", "derivative_mode", "pd_projection", "self_collision"}, "simulation")
    try:
        cfg = SimConfig(dt=_get(sim, "dt", "simulation", float, 0.0016),
                        constraint_iterations=_get(sim, "iterations", "simulation", int, 20),
                        gravity=tuple(_vec(sim.get("gravity", (0.0, -9.81, 0.0)), 3, "simulation.gravity")),
                        collision_thickness=_get(sim, "collision_thickness", "simulation", float, 0.0),
                        collision_compliance=_get(sim, "collision_compliance", "simulation", float, 1e-8),
                        collision_margin=_get(sim, "collision_margin", "simulation", float, None),
                        self_collision=_get(sim, "self_collision", "simulation", bool, False),
                        derivative_mode=_get(sim, "derivative_mode", "simulation", str, "converged"),
                        pd_projection=_get(sim, "pd_projection", "simulation", bool, True))
    except SceneError:
        raise
    except ValueError as exc:
        raise SceneError(str(exc), "simulation") from None
    horizon = _get(sim, "horizon", "simulation", int, required=True)
    if horizon < 1:
        raise SceneError("must be >= 1", "simulation.horizon")

    # masses and pins
    pins = [int(p) for p in (doc.get("pins") or [])]
    for p in pins:
        if not 0 <= p < V:
            raise SceneError(f"pin {p} out of range 0..{V - 1}", "pins")
    if doc.get("masses") is not None:
        m = _vec(doc["masses"], None, "masses")
        if m.size == 1:
            m = np.full(V, m[0])
        if m.size != V or np.any(m <= 0):
            raise SceneError(f"expected {V} positive masses", "masses")
        pinned = np.zeros(V, dtype=bool)
        pinned[pins] = True
        mass = MassModel(m, np.where(pinned, 0.0, 1.0 / m), pinned)
        density = None
    else:
        density = _get(doc, "density", "", float, required=True)
        if density <= 0:
            raise SceneError("must be positive", "density")
        mass, _ = build_sim_object(mesh, density, pins)

    # materials and constraints
    mat = doc.get("materials") or {}
    _check_keys(mat, {"cloth", "solid", "triangle_ids", "tet_ids"}, "materials")
    cloth = np.asarray(mat.get("cloth", []), dtype=float).reshape(-1, 5) if mat.get("cloth") is not None \
        else np.zeros((0, 5))
    solid = np.asarray(mat.get("solid", []), dtype=float).reshape(-1, 2) if mat.get("solid") is not None \
        else np.zeros((0, 2))
    materials = MaterialParams(cloth=cloth, solid=solid)
    try:
        materials.check()
    except ValueError as exc:
        raise SceneError(str(exc), "materials") from None
    sets = []
    bending = _get(doc, "bending", "", bool, True)
    if len(mesh.triangles):
        if not len(cloth):
            raise SceneError("triangles present but no cloth material", "materials.cloth")
        tid = mat.get("triangle_ids")
        tid = None if tid is None else np.asarray(tid, dtype=np.int64)
        if tid is not None and (tid.shape != (len(mesh.triangles),) or tid.min() < 0 or tid.max() >= len(cloth)):
            raise SceneError("one valid cloth material id per triangle required", "materials.triangle_ids")
        sets.append(build_cloth_constraints(mesh, tid, bending=bending))
    if len(mesh.tetrahedra):
        if not len(solid):
            raise SceneError("tetrahedra present but no solid material", "materials.solid")
        eid = mat.get("tet_ids")
        eid = None if eid is None else np.asarray(eid, dtype=np.int64)
        if eid is not None and (eid.shape != (len(mesh.tetrahedra),) or eid.min() < 0 or eid.max() >= len(solid)):
            raise SceneError("one valid solid material id per tetrahedron required", "materials.tet_ids")
        sets.append(build_solid_constraints(mesh, eid))
    dist = doc.get("distance")
    if dist is not None:
        _check_keys(dist, {"edges", "compliance"}, "distance")
        edges = dist.get("edges", "mesh")
        if edges != "mesh":
            edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
            if edges.size and (edges.min() < 0 or edges.max() >= V):
                raise SceneError("edge index out of range", "distance.edges")
        sets.append(build_distance_constraints(mesh, _get(dist, "compliance", "distance", float, 0.0),
                                               None if isinstance(edges, str) else edges))
    constraints = ConstraintSet.concat(sets) if sets else ConstraintSet.empty()

    x0 = None if doc.get("initial_position") is None else _positions(
        doc["initial_position"], base, V, mesh.rest_positions.ravel(), "initial_position")
    v0 = None if doc.get("initial_velocity") is None else _per_vertex(doc["initial_velocity"], V,
                                                                         "initial_velocity")
    if v0 is not None:
        v0 = v0.copy()
        v0[np.repeat(mass.pinned, 3)] = 0.0
    colliders = [_collider(c, i, base) for i, c in enumerate(doc.get("colliders") or [])]
    scene = Scene(mesh, mass, constraints, materials, cfg, x0, v0, colliders, horizon=horizon)

    controls = _controls(doc.get("controls"), scene)
    goal = _goal(doc.get("goal"), scene, base)
    opt = doc.get("optimization") or {}
    _check_keys(opt, {"iterations", "loss_floor"}, "optimization")
    out = doc.get("output") or {}
    _check_keys(out, {"frame_stride"}, "output")
    stride = _get(out, "frame_stride", "output", int, 1)
    if stride < 1:
        raise SceneError("must be >= 1", "output.frame_stride")

    canonical = {
        "units": "SI",
        "mesh": {"path": str(mpath), "elements": None if epath is None else str(epath), "vertices": V,
                 "triangles": int(len(mesh.triangles)), "tetrahedra": int(len(mesh.tetrahedra))},
        "density": density,
        "masses": None if density is not None else mass.mass.tolist(),
        "pins": sorted(set(pins)),
        "materials": {"cloth": cloth.tolist(), "solid": solid.tolist()},
        "constraints": {"total": len(constraints),
                        "by_kind": {KIND_NAMES[k]: int(c)
                                    for k, c in zip(*np.unique(constraints.kinds, return_counts=True))}},
        "bending": bending,
        "initial_velocity": scene.v0.tolist() if np.any(scene.v0) else None,
        "colliders": [_collider_echo(c) for c in colliders],
        "simulation": {"dt": cfg.dt, "iterations": cfg.constraint_iterations, "gravity": list(cfg.gravity),
                       "horizon": horizon, "collision_thickness": cfg.collision_thickness,
                       "collision_compliance": cfg.collision_compliance, "collision_margin": cfg.margin,
                       "self_collision": cfg.self_collision, "derivative_mode": cfg.derivative_mode,
                       "pd_projection": cfg.pd_projection},
        "controls": None if controls is None else {
            "family": controls.family, "size": controls.size,
            "step_size": np.asarray(controls.step_size, dtype=float).tolist()},
        "goal": None if goal is None else _goal_echo(goal),
        "optimization": {"iterations": _get(opt, "iterations", "optimization", int, 100),
                         "loss_floor": _get(opt, "loss_floor", "optimization", float, 0.0)},
        "output": {"frame_stride": stride},
    }
    return LoadedScene(scene, controls, goal, canonical, path, canonical["optimization"]["iterations"],
                       canonical["optimization"]["loss_floor"], stride)


def _controls(d, scene: Scene):
    if d is None:
        return None
    _check_keys(d, {"family", "initial", "lower", "upper", "step_size"}, "controls")
    fam = d.get("family")
    if isinstance(fam, list):
        raise SceneError("exactly one control family per run", "controls.family")
    if fam not in CONTROL_FAMILIES:
        raise SceneError(f"unknown family {fam!r}; expected one of {', '.join(CONTROL_FAMILIES)}",
                         "controls.family")
    n = scene.control_size(fam)
    if n == 0:
        raise SceneError(f"scene has no {fam} parameters", "controls.family")

    def arr(key, default):
        if d.get(key) is None:
            return default
        a = _vec(d[key], None, f"controls.{key}")
        if a.size not in (1, n):
            raise SceneError(f"expected 1 or {n} numbers", f"controls.{key}")
        return np.broadcast_to(a, (n,)).copy()

    cv = ControlVector.from_scene(scene, fam)
    try:
        return ControlVector(fam, arr("initial", cv.values), arr("lower", None), arr("upper", None),
                             arr("step_size", np.ones(n)))
    except ValueError as exc:
        raise SceneError(str(exc), "controls") from None


def _goal(d, scene: Scene, base: Path):
    if d is None:
        return None
    if not isinstance(d, dict):
        raise SceneError("expected a mapping", "goal")
    t = d.get("type", "keyframes")
    V, N = scene.mesh.vertex_count, scene.horizon
    if t == "keyframes":
        _check_keys(d, {"type", "keyframes", "weights", "beta"}, "goal")
        frames = d.get("keyframes")
        if not frames:
            raise SceneError("at least one keyframe required", "goal.keyframes")
        steps, pos, vel = [], [], []
        for i, k in enumerate(frames):
            where = f"goal.keyframes[{i}]"
            _check_keys(k, {"step", "positions", "velocities"}, where)
            s = _get(k, "step", where, int, required=True)
            if not 0 <= s <= N:
                raise SceneError(f"step {s} outside 0..{N}", where + ".step")
            steps.append(s)
            if "positions" not in k:
                raise SceneError("missing required field", where + ".positions")
            pos.append(_positions(k["positions"], base, V, scene.x0, where + ".positions"))
            vel.append(None if k.get("velocities") is None else _per_vertex(k["velocities"], V, where + ".velocities"))
        if len(set(steps)) != len(steps):
            raise SceneError("duplicate keyframe step", "goal.keyframes")
        if any(v is not None for v in vel) and not all(v is not None for v in vel):
            raise SceneError("velocities must be given for all keyframes or none", "goal.keyframes")
        w = d.get("weights")
        w = None if w is None else _vec(w, None, "goal.weights")
        if w is not None and w.size == 1:
            w = np.full(V, w[0])
        if w is not None and w.size != V:
            raise SceneError(f"expected 1 or {V} weights", "goal.weights")
        return KeyframeL2(steps, np.array(pos), None if vel[0] is None else np.array(vel), w,
                          _get(d, "beta", "goal", float, 0.0))
    if t == "point_cloud":
        _check_keys(d, {"type", "path", "steps", "weight", "beta"}, "goal")
        p = (base / _get(d, "path", "goal", str, required=True)).resolve()
        if not p.is_file():
            raise SceneError(f"file not found: {d['path']}", "goal.path")
        steps = [int(s) for s in (d.get("steps") or [N])]
        if any(not 0 <= s <= N for s in steps):
            raise SceneError(f"steps must lie in 0..{N}", "goal.steps")
        return PointCloud(load_mesh(p).rest_positions, steps, _get(d, "weight", "goal", float, 1.0),
                          _get(d, "beta", "goal", float, 0.0))
    raise SceneError(f"unknown goal type {t!r}", "goal.type")


def _goal_echo(goal) -> dict:
    if isinstance(goal, KeyframeL2):
        return {"type": "keyframes", "steps": list(goal.steps), "beta": goal.beta,
                "velocities": goal.velocities is not None, "weighted": goal.weights is not None}
    return {"type": "point_cloud", "steps": list(goal.steps), "points": len(goal.points), "weight": goal.weight,
            "beta": goal.beta}


# ----------------------------------------------------------------------------- commands

@dataclass
class RunReport:
    command: str
    status: str = "ok"
    files: dict = field(default_factory=dict)
    frames: list = field(default_factory=list)
    gradcheck: list = field(default_factory=list)   # (entry, adjoint, fd, rel_err)
    timings: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"command": self.command, "status": self.status, "files": {k: str(v) for k, v in self.files.items()},
                "frames": [str(f) for f in self.frames], "timings": self.timings, "details": self.details}


def _write_timings(path, traj, adj=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "forward", "assembly", "cg"])
        cg = {} if adj is None else {len(adj.cg) - 1 - k: c.seconds for k, c in enumerate(adj.cg)}
        for n in range(traj.horizon):
            t = traj.record(n).timings
            w.writerow([n, repr(t.get("forward", 0.0)), repr(t.get("assembly", 0.0)), repr(cg.get(n, 0.0))])


def relative_error(adjoint: float, fd: float, floor: float = 1e-14) -> float:
    den = max(abs(adjoint), abs(fd))
    return 0.0 if den <= floor else abs(adjoint - fd) / den


def _cmd_simulate(ls: LoadedScene, out: Path, args) -> RunReport:
    rep = RunReport("simulate")
    ctl = ls.controls
    adj = None
    if ls.goal is not None and ctl is not None:
        # also time the backward pass so the CG column is populated
        _, _, traj, adj = compute_gradient(ls.scene, ctl, ls.goal)
    else:
        sc = ls.scene if ctl is None else ctl.apply(ls.scene)
        traj = simulate(sc, control_family=None if ctl is None else ctl.family)
    rep.frames = export_frames(traj, out / "frames", ls.frame_stride)
    rep.files["timing_csv"] = out / "timing.csv"
    _write_timings(rep.files["timing_csv"], traj, adj)
    rep.files["trajectory"] = out / "trajectory.npz"
    np.savez(rep.files["trajectory"], positions=traj.positions(),
             velocities=np.array([s.v for s in traj.states]))
    rep.timings = {k: float(v) for k, v in traj.timings().items()}
    if adj is not None:
        rep.timings["cg"] = float(sum(c.seconds for c in adj.cg))
    return rep


def _cmd_optimize(ls: LoadedScene, out: Path, args) -> RunReport:
    if ls.controls is None or ls.goal is None:
        raise SceneError("optimize needs both controls and goal")
    rep = RunReport("optimize")
    iters = ls.iterations if args.iterations is None else args.iterations
    rep.files["loss_csv"] = out / "loss.csv"
    res = run_optimization(ls.scene, ls.goal, ls.controls, iters, loss_floor=ls.loss_floor,
                           csv_path=rep.files["loss_csv"])
    rep.files["controls"] = out / "controls.csv"
    with open(rep.files["controls"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "value"])
        w.writerows((i, repr(float(v))) for i, v in enumerate(res.controls.values))
    final = res.history[-1]
    rep.details = {"iterations": final["iteration"], "initial_loss": res.history[0]["loss"],
                   "final_loss": final["loss"], "max_cg_residual": max(res.cg_residuals, default=0.0),
                   "pinned_zero": bool(res.pinned_zero)}
    return rep


def _cmd_gradcheck(ls: LoadedScene, out: Path, args) -> RunReport:
    if ls.controls is None or ls.goal is None:
        raise SceneError("gradcheck needs both controls and goal")
    rep = RunReport("gradcheck")
    tol = args.tolerance
    ctl = ls.controls
    # projection changes the linearization, so the exact adjoint is checked without it
    sc = ls.scene.with_(config=_replace_config(ls.scene.config, pd_projection=False))
    ok = True
    if sc.config.derivative_mode != "unrolled":
        vsc = ctl.apply(sc).with_(config=_replace_config(sc.config, keep_raw_blocks=True))
        traj = simulate(vsc, control_family=ctl.family)
        worst_a = worst_r = 0.0
        for n in range(traj.horizon):
            r = traj.record(n)
            v = verify_derivative_blocks(r.raw_blocks, r.kinds, r.active, tol=1e-6)
            worst_a, worst_r = max(worst_a, v.max_asymmetry), max(worst_r, v.max_row_sum)
        rep.details["max_asymmetry"] = worst_a
        rep.details["max_row_sum"] = worst_r
        ok &= worst_a <= 1e-6 and worst_r <= 1e-6
    phi, grad, _, _ = compute_gradient(sc, ctl, ls.goal, solver="auto")
    rng = np.random.default_rng(args.seed)
    n = ctl.size
    k = n if args.fd_entries is None else min(args.fd_entries, n)
    entries = np.sort(rng.choice(n, k, replace=False)) if k < n else np.arange(n)
    rows = []
    for i in entries:
        fd = finite_difference_oracle(sc, ctl, ls.goal, int(i), h=args.fd_step)
        rows.append((int(i), float(grad[i]), float(fd), float(relative_error(grad[i], fd))))
    rep.gradcheck = rows
    rep.files["gradcheck_csv"] = out / "gradcheck.csv"
    with open(rep.files["gradcheck_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry", "adjoint", "fd", "rel_err"])
        w.writerows((i, repr(a), repr(f), repr(e)) for i, a, f, e in rows)
    worst = max((r[3] for r in rows), default=0.0)
    rep.details.update({"loss": phi, "entries": len(rows), "max_rel_err": worst, "tolerance": tol})
    ok &= worst <= tol
    rep.status = "ok" if ok else "fail"
    return rep


def _replace_config(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, **kw)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xpbdgrad", description="Differentiable XPBD simulation and optimization.")
    p.add_argument("command", choices=("simulate", "optimize", "gradcheck"))
    p.add_argument("--scene", required=True, help="YAML scene file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--iterations", type=int, default=None, help="optimization iterations (overrides the scene)")
    p.add_argument("--disable-pd-projection", action="store_true", help="skip PD projection of derivative blocks")
    p.add_argument("--fd-step", type=float, default=None, help="central difference step (default: adaptive)")
    p.add_argument("--fd-entries", type=int, default=10, help="control entries sampled by gradcheck")
    p.add_argument("--tolerance", type=float, default=1e-3, help="gradcheck relative error bound")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    return p


class _ArgError(Exception):
    pass


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be >= 1")
    import numba
    with warnings.catch_warnings():
        # numba probes for an optional threading layer and warns when it is too old
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def run_command(argv=None) -> tuple[int, RunReport]:
    """Run one subcommand; returns (exit status, report).

    0 means success; 1 a gradcheck outside tolerance; 2 any error, with a
    JSON error record on stderr and in ``<out>/error.json`` when possible.
    """
    parser = _parser()
    parser.exit = lambda status=0, message=None: (_ for _ in ()).throw(_ArgError(message or ""))
    cmd = "unknown"
    out = None
    try:
        args = parser.parse_args(argv)
        cmd = args.command
        out = Path(args.out)
        _set_threads(args.threads)
        ls = load_scene(args.scene)
        if args.disable_pd_projection or cmd == "gradcheck":
            ls.scene = ls.scene.with_(config=_replace_config(ls.scene.config, pd_projection=False))
            ls.canonical["simulation"]["pd_projection"] = False
        out.mkdir(parents=True, exist_ok=True)
        echo = out / "scene.normalized.yaml"
        echo.write_text(yaml.safe_dump(ls.canonical, sort_keys=True))
        t0 = time.perf_counter()
        rep = {"simulate": _cmd_simulate, "optimize": _cmd_optimize, "gradcheck": _cmd_gradcheck}[cmd](ls, out, args)
        rep.files["scene_echo"] = echo
        rep.details["seconds"] = time.perf_counter() - t0
        rep.files["report"] = out / "report.json"
        rep.files["report"].write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True, default=float))
        missing = [str(p) for p in list(rep.files.values()) + rep.frames if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"expected output missing: {missing[0]}")
        return (0 if rep.status == "ok" else 1), rep
    except BaseException as exc:  # noqa: BLE001  every failure becomes an error record
        if isinstance(exc, KeyboardInterrupt):
            raise
        if isinstance(exc, _ArgError) and not str(exc).strip():
            return 0, RunReport(cmd)     # --help
        record = {"status": "error", "command": cmd, "error": type(exc).__name__, "message": str(exc).strip()}
        for attr in ("field", "line"):
            if getattr(exc, attr, None) is not None:
                record[attr] = getattr(exc, attr)
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                (out / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True))
            except OSError:
                pass
        rep = RunReport(cmd, status="error", details=record)
        return 2, rep


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    status, rep = run_command(argv)
    if rep.status != "error" and rep.command != "unknown":
        print(json.dumps(rep.to_json(), sort_keys=True, default=float))
    return status


if __name__ == "__main__":
    sys.exit(main())
