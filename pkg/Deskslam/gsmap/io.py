"""Map export/import as binary PLY and image export as binary PPM."""
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from Deskslam.exceptions import StorageError

from .models import GaussianMap, GaussianPrimitive

PLY_FIELDS = ['x', 'y', 'z', 'nx', 'ny', 'nz', 'red', 'green', 'blue', 'opacity',
              'scale_x', 'scale_y', 'scale_z', 'rot_w', 'rot_x', 'rot_y', 'rot_z', 'anchor']


def save_ply(path, gmap):
    means = gmap.means.detach().numpy()
    quats = gmap.quats.detach().numpy()
    dtype_full = [(name, '<f4') for name in PLY_FIELDS[:-1]] + [('anchor', '<i4')]
    elements = np.empty(len(gmap), dtype=dtype_full)
    attributes = np.concatenate([
        means, np.zeros_like(means), gmap.colors.detach().numpy(),
        gmap.opacities.detach().numpy()[:, None], gmap.scales.detach().numpy(),
        quats[:, 3:4], quats[:, :3],
    ], axis=1)
    for k, name in enumerate(PLY_FIELDS[:-1]):
        elements[name] = attributes[:, k]
    elements['anchor'] = gmap.anchors.numpy()
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        PlyData([PlyElement.describe(elements, 'vertex')], byte_order='<').write(str(path))
    except OSError as exc:
        raise StorageError(f"cannot write map {path}: {exc}") from exc


def load_ply(path, cfg=None):
    try:
        vertex = PlyData.read(str(path))['vertex']
    except (OSError, KeyError, ValueError) as exc:
        raise StorageError(f"cannot read map {path}: {exc}") from exc
    col = lambda *names: np.stack([np.asarray(vertex[n], dtype=np.float64) for n in names], axis=1)
    anchors = np.asarray(vertex['anchor']) if 'anchor' in vertex.data.dtype.names else np.zeros(vertex.count, int)
    means, colors = col('x', 'y', 'z'), col('red', 'green', 'blue')
    scales, quats = col('scale_x', 'scale_y', 'scale_z'), col('rot_x', 'rot_y', 'rot_z', 'rot_w')
    opacity = np.asarray(vertex['opacity'], dtype=np.float64)
    prims = [GaussianPrimitive(means[k], quats[k], np.maximum(scales[k], 1e-12), float(np.clip(opacity[k], 0, 1)),
                               colors[k], int(anchors[k])) for k in range(vertex.count)]
    return GaussianMap.from_primitives(prims, cfg)


def write_ppm(path, image):
    """Binary P6 from an (H, W, 3) float image in [0, 1]."""
    pixels = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path, format='PPM')
    except OSError as exc:
        raise StorageError(f"cannot write image {path}: {exc}") from exc


def read_ppm(path):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0
    except OSError as exc:
        raise StorageError(f"cannot read image {path}: {exc}") from exc
