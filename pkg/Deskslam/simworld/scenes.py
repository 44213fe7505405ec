"""Analytic scenes and their exact ray-traced depth, colour and normals."""
import numpy as np

from Deskslam.exceptions import ConfigurationError

from .models import GroundTruth, PlaneSpec, SceneSpec, SphereSpec
from .noise import generator

EPS_T = 1e-9


def room_scene(seed=0):
    """A closed 6 x 2.5 x 6 m room (y points down) around a cluster of spheres."""
    rng = generator(seed, 0x726f6f6d)
    jitter = lambda base: tuple(np.clip(np.asarray(base) + rng.uniform(-0.05, 0.05, 3), 0.05, 0.95))
    planes = (
        PlaneSpec((1.0, 0.0, 0.0), -3.0, jitter((0.75, 0.55, 0.45)), texture_period=0.6),
        PlaneSpec((1.0, 0.0, 0.0), 3.0, jitter((0.45, 0.60, 0.75)), texture_period=0.5),
        PlaneSpec((0.0, 0.0, 1.0), -3.0, jitter((0.60, 0.75, 0.50)), texture_period=0.7),
        PlaneSpec((0.0, 0.0, 1.0), 3.0, jitter((0.80, 0.70, 0.40)), texture_period=0.45),
        PlaneSpec((0.0, 1.0, 0.0), 1.0, jitter((0.50, 0.45, 0.40)), texture_period=0.4),
        PlaneSpec((0.0, 1.0, 0.0), -1.5, jitter((0.85, 0.85, 0.80)), texture_period=0.9),
    )
    spheres = (
        SphereSpec((0.0, 0.2, 0.0), 0.35, jitter((0.85, 0.30, 0.25))),
        SphereSpec((0.42, 0.5, 0.25), 0.2, jitter((0.25, 0.70, 0.35))),
        SphereSpec((-0.38, 0.55, -0.2), 0.16, jitter((0.30, 0.35, 0.85))),
        SphereSpec((0.1, 0.62, -0.45), 0.12, jitter((0.90, 0.80, 0.20))),
    )
    return SceneSpec(planes, spheres, seed, 'room')


def plane_scene(z=2.0, seed=0):
    return SceneSpec((PlaneSpec((0.0, 0.0, 1.0), z, texture_period=0.3),), (), seed, 'plane')


SCENES = {'room': room_scene, 'plane': lambda seed: plane_scene(seed=seed)}


def build_scene(kind, seed=0):
    if kind not in SCENES:
        raise ConfigurationError(f"unknown scene kind {kind!r} (choose from {sorted(SCENES)})")
    return SCENES[kind](seed)


def _tangents(normal):
    n = np.asarray(normal, dtype=np.float64)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    a = np.cross(n, helper)
    a /= np.linalg.norm(a)
    return a, np.cross(n, a)


def _plane_hits(plane, origin, dirs):
    n = np.asarray(plane.normal, dtype=np.float64)
    denom = dirs @ n
    with np.errstate(divide='ignore', invalid='ignore'):
        t = (plane.offset - origin @ n) / denom
    hit = np.abs(denom) > 1e-12
    t = np.where(hit & (t > EPS_T), t, np.inf)
    points = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    a, b = _tangents(n)
    u, v = points @ a, points @ b
    if plane.extent is not None:
        t = np.where((np.abs(u) <= plane.extent) & (np.abs(v) <= plane.extent), t, np.inf)
    period = plane.texture_period
    shade = 0.7 + 0.3 * np.sin(2 * np.pi * u / period) * np.sin(2 * np.pi * v / period)
    normals = np.broadcast_to(np.where((denom > 0)[..., None], -n, n), dirs.shape)
    return t, shade[..., None] * np.asarray(plane.color), normals


def _sphere_hits(sphere, origin, dirs):
    m = np.asarray(sphere.center, dtype=np.float64)
    oc = origin - m
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * dirs @ oc
    c = oc @ oc - sphere.radius ** 2
    disc = b * b - 4 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    near = (-b - root) / (2 * a)
    far = (-b + root) / (2 * a)
    t = np.where(near > EPS_T, near, far)
    t = np.where((disc >= 0) & (t > EPS_T), t, np.inf)
    points = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    normals = (points - m) / sphere.radius
    normals = np.where((np.sum(normals * dirs, axis=-1) > 0)[..., None], -normals, normals)
    local = points - m
    shade = 0.8 + 0.2 * np.sin(9.0 * local[..., 0]) * np.cos(7.0 * local[..., 1] + 5.0 * local[..., 2])
    return t, shade[..., None] * np.asarray(sphere.color), normals


def render_gt(scene, pose, K):
    """Nearest analytic intersection per pixel; background depth is 0.

    Rays have unit camera z, so the ray parameter is the camera depth.
    """
    R_cw = pose.rotation_matrix.T
    origin = pose.center()
    dirs = K.rays(K.pixel_grid()) @ R_cw.T
    depth = np.full(K.shape, np.inf)
    color = np.zeros(K.shape + (3,))
    normals = np.zeros(K.shape + (3,))
    hits = [_plane_hits(p, origin, dirs) for p in scene.planes]
    hits += [_sphere_hits(s, origin, dirs) for s in scene.spheres]
    for t, c, n in hits:
        closer = t < depth
        depth = np.where(closer, t, depth)
        color = np.where(closer[..., None], c, color)
        normals = np.where(closer[..., None], n, normals)
    valid = np.isfinite(depth)
    depth = np.where(valid, depth, 0.0)
    normals = np.where(valid[..., None], normals @ pose.rotation_matrix.T, 0.0)
    return GroundTruth(depth, np.clip(color, 0.0, 1.0), normals)
