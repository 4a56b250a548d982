"""Synthetic objects, camera model, partial-view rendering and dataset I/O.

A dataset directory looks like::

    manifest.json
    objects/<object_id>.ply     canonical model cloud (x y z nx ny nz)
    samples/<index>.ply         observed points (x y z red green blue)

Observed points carry a per-point colour that encodes the point's canonical
coordinates (quantised to 8 bits). Together with a small per-object code it
forms the appearance features fed to the network.
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import (PointCloud, Quaternion, RigidTransform, max_pairwise_distance,
                       random_pose, sample_points)
from .ply import read_ply, write_ply

SHAPES = ("cube", "l_block", "cylinder", "sphere")
SYMMETRIC_SHAPES = frozenset({"cylinder", "sphere"})
ID_EMBED_DIM = 4
APPEARANCE_DIM = 3 + ID_EMBED_DIM
MANIFEST_FORMAT = "posegen-dataset/1"


class EmptyViewError(ValueError):
    """Raised when culling, clipping and occlusion leave no visible point."""


@dataclass(frozen=True, eq=False)
class ObjectModel:
    id: str
    cloud_cano: PointCloud
    symmetric: bool
    diameter: float
    shape: str = ""
    scale: float = 0.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class ViewParams:
    noise_sigma: float = 0.0
    occlusion_fraction: float = 0.0
    cull: bool = True

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.occlusion_fraction < 1:
            raise ValueError("occlusion_fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class Sample:
    object_id: str
    pose_gt: RigidTransform
    observed: PointCloud
    appearance: np.ndarray
    model_sampled: PointCloud
    view: ViewParams = ViewParams()
    seed: int = 0

    def __post_init__(self):
        if len(self.observed) == 0:
            raise EmptyViewError("observed cloud is empty")
        if len(self.appearance) != len(self.observed):
            raise ValueError("appearance rows must match observed points")


# ---------------------------------------------------------------------------
# object models


def _box_faces(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = hi - lo
    faces = []
    for axis in range(3):
        u, v = [k for k in range(3) if k != axis]
        for side, sign in ((lo, -1.0), (hi, 1.0)):
            origin = lo.copy()
            origin[axis] = side[axis]
            eu, ev, n = np.zeros(3), np.zeros(3), np.zeros(3)
            eu[u], ev[v], n[axis] = d[u], d[v], sign
            faces.append((origin, eu, ev, n))
    return faces


def _l_block_faces(a):
    """Faces of an L-shaped prism with arms 3a and 2a, thickness a."""
    depth = a
    poly = np.array([[0, 0], [3 * a, 0], [3 * a, a], [a, a], [a, 2 * a], [0, 2 * a]], float)
    faces = []
    for z, sign in ((0.0, -1.0), (depth, 1.0)):
        for lo, hi in (((0, 0), (3 * a, a)), ((0, a), (a, 2 * a))):
            origin = np.array([lo[0], lo[1], z])
            faces.append((origin, np.array([hi[0] - lo[0], 0, 0.]),
                          np.array([0, hi[1] - lo[1], 0.]), np.array([0, 0, sign])))
    for k in range(len(poly)):
        p, q = poly[k], poly[(k + 1) % len(poly)]
        edge = q - p
        # polygon is counter-clockwise, so the outward normal is (dy, -dx)
        n = np.array([edge[1], -edge[0], 0.0]) / np.linalg.norm(edge)
        faces.append((np.array([p[0], p[1], 0.0]), np.array([edge[0], edge[1], 0.0]),
                      np.array([0, 0, depth]), n))
    corners = np.array([[x, y, z] for z in (0.0, depth) for x, y in poly])
    return faces, corners


def _sample_faces(faces, n, rng):
    areas = np.array([np.linalg.norm(np.cross(eu, ev)) for _, eu, ev, _ in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    st = rng.uniform(size=(n, 2))
    origin = np.stack([faces[k][0] for k in which])
    eu = np.stack([faces[k][1] for k in which])
    ev = np.stack([faces[k][2] for k in which])
    normals = np.stack([faces[k][3] for k in which])
    return origin + st[:, :1] * eu + st[:, 1:] * ev, normals


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_object(shape: str, n_points: int = 2000, scale: float = 0.1, seed: int = 0,
                object_id: Optional[str] = None) -> ObjectModel:
    """Surface-sample a procedural object, centred on the cloud centroid.

    ``scale`` is the cube edge, the longest L-block arm, and the cylinder
    and sphere diameter. Box-like shapes include their corner vertices so the
    diameter is attained exactly.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if n_points < 8:
        raise ValueError("n_points must be at least 8")
    rng = np.random.default_rng(seed)
    if shape == "cube":
        h = scale / 2
        corners = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
        pts, nrm = _sample_faces(_box_faces([-h] * 3, [h] * 3), n_points - 8, rng)
        pts = np.vstack([corners, pts])
        nrm = np.vstack([_unit(corners), nrm])
    elif shape == "l_block":
        faces, corners = _l_block_faces(scale / 3)
        pts, nrm = _sample_faces(faces, n_points - len(corners), rng)
        centre = corners.mean(axis=0)
        pts = np.vstack([corners, pts])
        nrm = np.vstack([_unit(corners - centre), nrm])
    elif shape == "cylinder":
        r, hh = scale / 2, scale / 2
        lateral, cap = 2 * np.pi * r * 2 * hh, np.pi * r * r
        kind = rng.choice(3, size=n_points, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        phi = rng.uniform(0, 2 * np.pi, n_points)
        rad = np.where(kind == 0, r, r * np.sqrt(rng.uniform(size=n_points)))
        z = np.where(kind == 0, rng.uniform(-hh, hh, n_points), np.where(kind == 1, -hh, hh))
        pts = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
        nrm = np.where((kind == 0)[:, None],
                       np.stack([np.cos(phi), np.sin(phi), np.zeros(n_points)], axis=1),
                       np.stack([np.zeros(n_points), np.zeros(n_points),
                                 np.where(kind == 1, -1.0, 1.0)], axis=1))
    else:
        nrm = _unit(rng.standard_normal((n_points, 3)))
        pts = nrm * (scale / 2)
    pts = pts - pts.mean(axis=0)
    cloud = PointCloud(pts, {"normals": nrm})
    return ObjectModel(object_id or shape, cloud, shape in SYMMETRIC_SHAPES,
                       max_pairwise_distance(pts), shape, scale)


# ---------------------------------------------------------------------------
# camera


def project(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection to ``(u, v, depth)`` with continuous pixel coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise ValueError("all points must have positive depth")
    return np.stack([K.fx * pts[:, 0] / z + K.cx, K.fy * pts[:, 1] / z + K.cy, z], axis=1)


def backproject(uvz: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    u, v, z = uvz[:, 0], uvz[:, 1], uvz[:, 2]
    return np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)


def in_image(uvz: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    u, v = uvz[:, 0], uvz[:, 1]
    return (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)


def project_and_backproject(points_camera_frame: PointCloud, K: CameraIntrinsics) -> PointCloud:
    """Project to the image, drop points outside it, lift back to 3D."""
    uvz = project(points_camera_frame.points, K)
    keep = np.nonzero(in_image(uvz, K))[0]
    kept = points_camera_frame.take(keep)
    return kept.with_points(backproject(uvz[keep], K))


# ---------------------------------------------------------------------------
# rendering


def id_embedding(object_id: str) -> np.ndarray:
    """Fixed pseudo-random code in [-1, 1] derived from the object id."""
    rng = np.random.default_rng(zlib.crc32(object_id.encode("utf-8")))
    return rng.uniform(-1.0, 1.0, ID_EMBED_DIM)


def canonical_colors(points_cano: np.ndarray, diameter: float) -> np.ndarray:
    """Quantise canonical coordinates to 8-bit colours."""
    u = points_cano / (2.0 * diameter) + 0.5
    return np.clip(np.rint(u * 255.0), 0, 255).astype(np.uint8)


def appearance_features(colors: np.ndarray, object_id: str) -> np.ndarray:
    """Per-point appearance rows: colours scaled to [-1, 1] plus the id code."""
    c = colors.astype(np.float64) / 127.5 - 1.0
    code = np.broadcast_to(id_embedding(object_id), (len(c), ID_EMBED_DIM))
    return np.hstack([c, code])


def _model_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


def render_sample(obj: ObjectModel, pose: RigidTransform, K: CameraIntrinsics = CameraIntrinsics(),
                  view: ViewParams = ViewParams(), seed: int = 0, n_model: int = 128) -> Sample:
    """Simulate a segmented partial depth view of ``obj`` in ``pose``.

    Steps: pose the canonical cloud; optionally cull back-facing points; drop
    points outside the image; cut a ball-shaped patch holding
    ``occlusion_fraction`` of the remaining points around a random visible
    point; add isotropic Gaussian noise; attach appearance features.
    """
    rng = np.random.default_rng(seed)
    cano = obj.cloud_cano.points
    cam = pose.apply(cano)
    if np.any(cam[:, 2] <= 0):
        raise ValueError("pose must place the object in front of the camera")
    keep = in_image(project(cam, K), K)
    if view.cull:
        normals = obj.cloud_cano.attributes["normals"] @ pose.R.T
        keep &= np.einsum("ij,ij->i", normals, cam) < 0
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        raise EmptyViewError(f"no visible points for object {obj.id!r}")
    if view.occlusion_fraction > 0:
        n_cut = int(round(view.occlusion_fraction * len(idx)))
        if n_cut >= len(idx):
            raise EmptyViewError("occlusion removes every visible point")
        centre = cam[idx[rng.integers(len(idx))]]
        order = np.argsort(np.linalg.norm(cam[idx] - centre, axis=1), kind="stable")
        idx = np.sort(idx[order[n_cut:]])
    pts = cam[idx]
    if view.noise_sigma > 0:
        pts = pts + rng.normal(0.0, view.noise_sigma, pts.shape)
    colors = canonical_colors(cano[idx], obj.diameter)
    observed = PointCloud(pts, {"colors": colors})
    return Sample(obj.id, pose, observed, appearance_features(colors, obj.id),
                  sample_points(obj.cloud_cano, n_model, _model_seed(seed)), view, seed)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class GenerationSettings:
    shapes: Sequence[str] = ("l_block", "cube")
    samples_per_object: int = 100
    n_points: int = 2000
    scale: float = 0.1
    rotation_bound: float = np.pi / 2
    z_range: tuple = (0.5, 1.5)
    noise_sigma: float = 0.001
    occlusion_fraction: float = 0.3
    cull: bool = True
    n_model: int = 128

    def __post_init__(self):
        if self.samples_per_object < 1:
            raise ValueError("samples_per_object must be >= 1")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")


@dataclass(eq=False)
class Dataset:
    seed: int
    settings: GenerationSettings
    camera: CameraIntrinsics
    objects: dict
    samples: list = field(default_factory=list)


def sample_seed(dataset_seed: int, index: int, stream: int = 0) -> int:
    """Independent seed derived from (dataset seed, stream, index).

    Stream 0 feeds samples, stream 1 feeds object models.
    """
    return int(np.random.SeedSequence([dataset_seed, stream, index]).generate_state(1)[0])


def sample_scene_pose(rng: np.random.Generator, settings: GenerationSettings) -> RigidTransform:
    rot = random_pose(settings.rotation_bound, 0.0, rng).rotation
    z = rng.uniform(*settings.z_range)
    x = rng.uniform(-0.3, 0.3) * z
    y = rng.uniform(-0.2, 0.2) * z
    return RigidTransform(rot, [x, y, z])


def generate_dataset(settings: GenerationSettings = GenerationSettings(), seed: int = 0,
                     camera: CameraIntrinsics = CameraIntrinsics()) -> Dataset:
    objects = {}
    for k, shape in enumerate(settings.shapes):
        obj = make_object(shape, settings.n_points, settings.scale, seed=sample_seed(seed, k, stream=1))
        objects[obj.id] = obj
    view = ViewParams(settings.noise_sigma, settings.occlusion_fraction, settings.cull)
    samples = []
    index = 0
    for obj in objects.values():
        for _ in range(settings.samples_per_object):
            s = sample_seed(seed, index)
            pose = sample_scene_pose(np.random.default_rng([s, 7]), settings)
            samples.append(render_sample(obj, pose, camera, view, s, settings.n_model))
            index += 1
    return Dataset(seed, settings, camera, objects, samples)


def _settings_to_json(settings: GenerationSettings) -> dict:
    d = asdict(settings)
    d["shapes"] = list(settings.shapes)
    d["z_range"] = list(settings.z_range)
    return d


def write_manifest(dataset: Dataset, directory: str | os.PathLike) -> Path:
    """Write PLY files and ``manifest.json``; returns the manifest path."""
    root = Path(directory)
    (root / "objects").mkdir(parents=True, exist_ok=True)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    objects = []
    for obj in dataset.objects.values():
        rel = f"objects/{obj.id}.ply"
        write_ply(root / rel, obj.cloud_cano)
        objects.append({"id": obj.id, "ply": rel, "symmetric": obj.symmetric,
                        "diameter": obj.diameter, "shape": obj.shape, "scale": obj.scale})
    samples = []
    for i, s in enumerate(dataset.samples):
        rel = f"samples/{i:06d}.ply"
        write_ply(root / rel, s.observed)
        samples.append({
            "object_id": s.object_id,
            "quaternion": s.pose_gt.rotation.as_array().tolist(),
            "translation": s.pose_gt.translation.tolist(),
            "observed": rel,
            "view": asdict(s.view),
            "seed": s.seed,
            "n_model": len(s.model_sampled),
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": dataset.seed,
        "settings": _settings_to_json(dataset.settings),
        "camera": asdict(dataset.camera),
        "objects": objects,
        "samples": samples,
    }
    path = root / "manifest.json"
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(directory: str | os.PathLike) -> Dataset:
    """Load a dataset written by :func:`write_manifest`.

    Raises:
        FileNotFoundError: manifest or a referenced PLY file is missing.
        ValueError: malformed JSON, unknown format, or a non-unit quaternion.
    """
    root = Path(directory)
    path = root / "manifest.json" if root.is_dir() else root
    root = path.parent
    with open(path) as fh:
        try:
            m = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed manifest JSON: {exc}") from exc
    try:
        if m.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: unsupported manifest format {m.get('format')!r}")
        settings = GenerationSettings(**{**m["settings"], "shapes": tuple(m["settings"]["shapes"]),
                                         "z_range": tuple(m["settings"]["z_range"])})
        camera = CameraIntrinsics(**m["camera"])
        objects = {}
        for o in m["objects"]:
            cloud = read_ply(root / o["ply"])
            objects[o["id"]] = ObjectModel(o["id"], cloud, bool(o["symmetric"]), float(o["diameter"]),
                                           o.get("shape", ""), float(o.get("scale", 0.0)))
        samples = []
        for k, s in enumerate(m["samples"]):
            q = np.asarray(s["quaternion"], dtype=np.float64)
            if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
                raise ValueError(f"{path}: sample {k} quaternion is not unit-norm "
                                 f"(norm {np.linalg.norm(q)!r})")
            obj = objects[s["object_id"]]
            observed = read_ply(root / s["observed"])
            colors = observed.attributes.get("colors")
            if colors is None:
                raise ValueError(f"{path}: sample {k} has no colour columns")
            samples.append(Sample(
                s["object_id"], RigidTransform(Quaternion.from_array(q), s["translation"]),
                observed, appearance_features(colors, obj.id),
                sample_points(obj.cloud_cano, int(s["n_model"]), _model_seed(int(s["seed"]))),
                ViewParams(**s["view"]), int(s["seed"])))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed manifest: {exc!r}") from exc
    return Dataset(int(m["seed"]), settings, camera, objects, samples)
