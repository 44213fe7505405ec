"""TUM trajectory files: `timestamp tx ty tz qx qy qz qw`, camera->world."""
from pathlib import Path

import numpy as np

from Deskslam.exceptions import StorageError

from .models import SE3Pose


def write_tum(path, timestamps, poses):
    """Write world->camera poses as camera->world TUM lines."""
    lines = []
    for stamp, pose in zip(timestamps, poses, strict=True):
        c2w = pose.inverse()
        values = ' '.join(f"{x:.9f}" for x in (*c2w.translation, *c2w.rotation))
        lines.append(f"{float(stamp):.6f} {values}\n")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as fh:
            fh.writelines(lines)
    except OSError as exc:
        raise StorageError(f"cannot write trajectory {path}: {exc}") from exc


def read_tum(path):
    """Returns (timestamps, world->camera poses)."""
    stamps, poses = [], []
    try:
        with open(path, encoding='utf-8') as fh:
            rows = fh.readlines()
    except OSError as exc:
        raise StorageError(f"cannot read trajectory {path}: {exc}") from exc
    for n, row in enumerate(rows, 1):
        row = row.strip()
        if not row or row.startswith('#'):
            continue
        fields = row.split()
        if len(fields) != 8:
            raise StorageError(f"{path}:{n}: expected 8 fields, got {len(fields)}")
        values = np.array([float(f) for f in fields])
        stamps.append(values[0])
        poses.append(SE3Pose(values[4:8], values[1:4]).inverse())
    return np.array(stamps), poses
