"""Binary graph snapshots (`KFG1`) and float32 depth grids.

KFG1 layout, little-endian throughout:

    magic     4s   b'KFG1'
    version   u32  1
    n_kf, n_edges, height, width, grid_rows, grid_cols   6 x u32
    fx, fy, cx, cy                                       4 x f64
    window_size                                          u32
    per keyframe:
        id u32, fixed u8, pad 3x u8
        qx qy qz qw tx ty tz scale                       8 x f64
        inv_depth, prior_depth                           2 x H*W f64
        grid coefficients                                rows*cols f64
        exposure A (row-major), b                        12 x f64
    per edge:
        src u32, dst u32, flags u8 (1 active, 2 loop), pad 3x u8
        targets, confidences                             2 x H*W*2 f64

Depth grids: a 16-byte header (width u32, height u32, two reserved u32 set
to zero) followed by row-major float32 values.
"""
import struct
from pathlib import Path

import numpy as np

from Deskslam.exceptions import ContainerFormatError, StorageError
from geom.models import Intrinsics, SE3Pose, Sim3Pose
from gsmap.models import ExposureParams

from .models import KeyframeGraph, KeyframeState, ReprojectionEdge, ScaleGrid

MAGIC = b'KFG1'
VERSION = 1
_HEADER = struct.Struct('<4sI6I4dI')
_KF = struct.Struct('<IB3x8d')
_EDGE = struct.Struct('<IIB3x')
_GRID_HEADER = struct.Struct('<4I')


def _write_bytes(path, payload):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def dump_graph(graph):
    K = graph.K
    rows, cols = graph.keyframes[0].scale_grid.shape if graph.keyframes else (0, 0)
    parts = [_HEADER.pack(MAGIC, VERSION, len(graph.keyframes), len(graph.edges), K.height, K.width,
                          rows, cols, K.fx, K.fy, K.cx, K.cy, graph.window_size)]
    for kf in graph.keyframes:
        parts.append(_KF.pack(kf.id, int(kf.is_pose_fixed), *kf.pose.rotation, *kf.pose.translation,
                              kf.pose.scale))
        parts.append(kf.inv_depth.astype('<f8').tobytes())
        parts.append(kf.prior_depth.astype('<f8').tobytes())
        parts.append(kf.scale_grid.coefficients.astype('<f8').tobytes())
        parts.append(kf.exposure.A.astype('<f8').tobytes())
        parts.append(kf.exposure.b.astype('<f8').tobytes())
    for edge in graph.edges:
        parts.append(_EDGE.pack(edge.src, edge.dst, int(edge.active) | (int(edge.loop) << 1)))
        parts.append(edge.targets.astype('<f8').tobytes())
        parts.append(edge.confidences.astype('<f8').tobytes())
    return b''.join(parts)


def load_graph(payload):
    view = memoryview(payload)
    if len(view) < _HEADER.size:
        raise ContainerFormatError("truncated KFG1 header")
    (magic, version, n_kf, n_edges, height, width, rows, cols,
     fx, fy, cx, cy, window) = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported KFG1 version {version}")
    pos = _HEADER.size

    def take(count, shape=None):
        nonlocal pos
        end = pos + 8 * count
        if end > len(view):
            raise ContainerFormatError("truncated KFG1 payload")
        arr = np.frombuffer(view[pos:end], dtype='<f8').astype(np.float64)
        pos = end
        return arr.reshape(shape) if shape else arr

    def unpack(fmt):
        nonlocal pos
        if pos + fmt.size > len(view):
            raise ContainerFormatError("truncated KFG1 record")
        values = fmt.unpack_from(view, pos)
        pos += fmt.size
        return values

    graph = KeyframeGraph(Intrinsics(fx, fy, cx, cy, width, height), window_size=window)
    for _ in range(n_kf):
        kf_id, fixed, *pose = unpack(_KF)
        q, t, s = pose[:4], pose[4:7], pose[7]
        graph.add_keyframe(KeyframeState(
            id=kf_id,
            pose=SE3Pose(q, t) if s == 1.0 else Sim3Pose(q, t, s),
            inv_depth=take(height * width, (height, width)),
            prior_depth=take(height * width, (height, width)),
            scale_grid=ScaleGrid(take(rows * cols, (rows, cols))),
            exposure=ExposureParams(take(9, (3, 3)), take(3)),
            is_pose_fixed=bool(fixed),
        ))
    for _ in range(n_edges):
        src, dst, flags = unpack(_EDGE)
        graph.add_edge(ReprojectionEdge(src, dst, take(height * width * 2, (height, width, 2)),
                                        take(height * width * 2, (height, width, 2)),
                                        active=bool(flags & 1), loop=bool(flags & 2)))
    if pos != len(view):
        raise ContainerFormatError(f"{len(view) - pos} trailing bytes after KFG1 payload")
    return graph


def save_graph(path, graph):
    _write_bytes(path, dump_graph(graph))


def read_graph(path):
    return load_graph(_read_bytes(path))


def write_grid(path, values):
    values = np.asarray(values, dtype='<f4')
    height, width = values.shape
    _write_bytes(path, _GRID_HEADER.pack(width, height, 0, 0) + values.tobytes())


def read_grid(path):
    payload = _read_bytes(path)
    if len(payload) < _GRID_HEADER.size:
        raise ContainerFormatError(f"{path}: truncated grid header")
    width, height, _, _ = _GRID_HEADER.unpack_from(payload, 0)
    body = payload[_GRID_HEADER.size:]
    if len(body) != 4 * width * height:
        raise ContainerFormatError(f"{path}: expected {width}x{height} floats, got {len(body) // 4}")
    return np.frombuffer(body, dtype='<f4').reshape(height, width).astype(np.float64)
