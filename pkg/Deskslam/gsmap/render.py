"""Differentiable tile-based splatting with ray-Gaussian intersection depth.

Every Gaussian is evaluated in 3-D along each pixel ray: the blended depth of
a Gaussian is the ray parameter of its maximum response, and its alpha is
the opacity times the response at that point. Screen-space covariances only
drive culling.
"""
import numpy as np
import torch
import torch.nn.functional as F
from django.conf import settings

from Deskslam.exceptions import BehindCameraError
from geom.camera import EPS_Z

from .models import DTYPE, GaussianMap, RenderOutput, build_rotation

ALPHA_MIN = 1.0 / 255.0
SIGMA_CUTOFF = 3.0


def se3_exp(xi):
    """Twist [v, w] -> 4x4 matrix, differentiable."""
    v, w = xi[:3], xi[3:6]
    zero = xi.new_zeros(())
    X = torch.stack([
        torch.stack([zero, -w[2], w[1], v[0]]),
        torch.stack([w[2], zero, -w[0], v[1]]),
        torch.stack([-w[1], w[0], zero, v[2]]),
        torch.stack([zero, zero, zero, zero]),
    ])
    return torch.linalg.matrix_exp(X)


def pose_tensors(pose, delta=None):
    """World->camera rotation and translation, optionally left-perturbed by a twist."""
    R = torch.as_tensor(pose.rotation_matrix, dtype=DTYPE)
    t = torch.as_tensor(pose.translation, dtype=DTYPE)
    if delta is not None:
        T = se3_exp(delta)
        R, t = T[:3, :3] @ R, T[:3, :3] @ t + T[:3, 3]
    return R, t


def _rays(K):
    u, v = torch.meshgrid(torch.arange(K.width, dtype=DTYPE), torch.arange(K.height, dtype=DTYPE), indexing='xy')
    rays = torch.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, torch.ones_like(u)], dim=-1)
    return rays.reshape(-1, 3), torch.stack([u, v], dim=-1).reshape(-1, 2)


def camera_gaussians(means, rotations, scales, R, t):
    """Means, covariances and precisions in the camera frame."""
    means_c = means @ R.T + t
    Rc = R @ rotations
    cov = Rc @ torch.diag_embed(scales ** 2) @ Rc.transpose(-1, -2)
    prec = Rc @ torch.diag_embed(scales ** -2) @ Rc.transpose(-1, -2)
    return means_c, cov, prec


def screen_gaussians(means_c, cov, K):
    """Projected means and first-order screen covariances J cov J^T."""
    x, y, z = means_c.unbind(-1)
    zero = torch.zeros_like(z)
    mu2 = torch.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], dim=-1)
    J = torch.stack([
        torch.stack([K.fx / z, zero, -K.fx * x / z ** 2], dim=-1),
        torch.stack([zero, K.fy / z, -K.fy * y / z ** 2], dim=-1),
    ], dim=-2)
    return mu2, J @ cov @ J.transpose(-1, -2)


def project_gaussian(pose, g, K):
    """Screen mean and covariance of one primitive; raises when it is behind the camera."""
    R, t = pose_tensors(pose)
    means_c, cov, _ = camera_gaussians(
        torch.as_tensor(g.mean, dtype=DTYPE)[None],
        build_rotation(torch.as_tensor(g.orientation, dtype=DTYPE)[None]),
        torch.as_tensor(g.scale, dtype=DTYPE)[None], R, t)
    if means_c[0, 2] <= EPS_Z:
        raise BehindCameraError(float(means_c[0, 2]))
    mu2, cov2 = screen_gaussians(means_c, cov, K)
    return mu2[0].numpy(), cov2[0].numpy()


def unbiased_depth(ray, g, pose):
    """Camera z of the point on `ray` where the Gaussian response peaks.

    Returns None when that point is not in front of the camera.
    """
    R, t = pose_tensors(pose)
    means_c, _, prec = camera_gaussians(
        torch.as_tensor(g.mean, dtype=DTYPE)[None],
        build_rotation(torch.as_tensor(g.orientation, dtype=DTYPE)[None]),
        torch.as_tensor(g.scale, dtype=DTYPE)[None], R, t)
    r = torch.as_tensor(np.asarray(ray, dtype=np.float64), dtype=DTYPE)
    Q, mu = prec[0], means_c[0]
    t_star = (r @ Q @ mu) / (r @ Q @ r)
    if t_star * r[2] <= EPS_Z:
        return None
    return float(t_star * r[2])


def normals_from_depth(depth, K):
    """Unit normals from central-difference tangents of the back-projected depth.

    Returns (normals, valid); border pixels are invalid. Normals face the
    camera, so a fronto-parallel plane gives (0, 0, -1).
    """
    as_numpy = not torch.is_tensor(depth)
    depth = torch.as_tensor(depth, dtype=DTYPE)
    rays, _ = _rays(K)
    P = depth[..., None] * rays.reshape(K.height, K.width, 3)
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    n = torch.linalg.cross(dy, dx, dim=-1)
    norm = torch.linalg.norm(n, dim=-1, keepdim=True)
    n = n / norm.clamp(min=1e-12)
    normals = F.pad(n.permute(2, 0, 1), (1, 1, 1, 1)).permute(1, 2, 0)
    with torch.no_grad():
        inner = ((depth[1:-1, 1:-1] > 0) & (depth[1:-1, 2:] > 0) & (depth[1:-1, :-2] > 0)
                 & (depth[2:, 1:-1] > 0) & (depth[:-2, 1:-1] > 0) & (norm[..., 0] > 1e-12))
        valid = F.pad(inner.to(DTYPE), (1, 1, 1, 1)) > 0.5
    if as_numpy:
        return normals.detach().numpy(), valid.numpy()
    return normals, valid


def render(gmap: GaussianMap, pose, K, pose_delta=None, tile_size=None):
    """Front-to-back compositing of depth-sorted Gaussians into colour, depth and alpha."""
    tile_size = tile_size or settings.TILE_SIZE
    H, W = K.height, K.width
    rays, pixels = _rays(K)
    R, t = pose_tensors(pose, pose_delta)
    means_c, cov, prec = camera_gaussians(gmap.means, gmap.rotations(), gmap.scales, R, t)
    opacity = gmap.opacities
    colors = gmap.colors
    Qmu = (prec @ means_c[..., None])[..., 0]
    muQmu = (means_c * Qmu).sum(-1)

    with torch.no_grad():
        z = means_c[:, 2]
        front = z > EPS_Z
        safe = torch.where(front[:, None], means_c, means_c.new_tensor([0.0, 0.0, 1.0]))
        mu2, cov2 = screen_gaussians(safe, cov, K)
        a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
        mid = 0.5 * (a + c)
        radius = SIGMA_CUTOFF * torch.sqrt(mid + torch.sqrt((mid ** 2 - (a * c - b * b)).clamp(min=0.0)))
        det = (a * c - b * b).clamp(min=1e-300)
        conic = torch.stack([c / det, -b / det, a / det], dim=-1)
        keys = np.lexsort((gmap.ids.numpy(), z.numpy()))
        order = torch.as_tensor(keys[front.numpy()[keys]], dtype=torch.long)
        lo, hi = mu2[order] - radius[order, None], mu2[order] + radius[order, None]

    pix_chunks, color_chunks, depth_chunks, alpha_chunks = [], [], [], []
    for y0 in range(0, H, tile_size):
        for x0 in range(0, W, tile_size):
            ys = torch.arange(y0, min(y0 + tile_size, H))
            xs = torch.arange(x0, min(x0 + tile_size, W))
            pix = (ys[:, None] * W + xs[None, :]).reshape(-1)
            with torch.no_grad():
                hit = ((hi[:, 0] >= x0) & (lo[:, 0] <= xs[-1]) & (hi[:, 1] >= y0) & (lo[:, 1] <= ys[-1]))
            cand = order[hit]
            pix_chunks.append(pix)
            if cand.numel() == 0:
                color_chunks.append(torch.zeros((pix.numel(), 3), dtype=DTYPE))
                depth_chunks.append(torch.zeros(pix.numel(), dtype=DTYPE))
                alpha_chunks.append(torch.zeros(pix.numel(), dtype=DTYPE))
                continue
            r = rays[pix]
            rQr = torch.einsum('pi,gij,pj->pg', r, prec[cand], r)
            rQmu = r @ Qmu[cand].T
            t_star = rQmu / rQr
            f = (muQmu[cand][None, :] - rQmu ** 2 / rQr).clamp(min=0.0)
            alpha = opacity[cand][None, :] * torch.exp(-0.5 * f)
            with torch.no_grad():
                d = pixels[pix][:, None, :] - mu2[cand][None, :, :]
                k = conic[cand]
                m2 = k[:, 0] * d[..., 0] ** 2 + 2 * k[:, 1] * d[..., 0] * d[..., 1] + k[:, 2] * d[..., 1] ** 2
                keep = (t_star > EPS_Z) & (alpha >= ALPHA_MIN) & (m2 <= SIGMA_CUTOFF ** 2)
            alpha = torch.where(keep, alpha, torch.zeros_like(alpha))
            trans = torch.cumprod(1.0 - alpha, dim=1)
            trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
            weight = alpha * trans
            color_chunks.append(weight @ colors[cand])
            depth_chunks.append((weight * torch.where(keep, t_star, torch.zeros_like(t_star))).sum(1))
            alpha_chunks.append(weight.sum(1))

    index = torch.cat(pix_chunks)
    color = torch.zeros((H * W, 3), dtype=DTYPE).index_copy(0, index, torch.cat(color_chunks))
    depth = torch.zeros(H * W, dtype=DTYPE).index_copy(0, index, torch.cat(depth_chunks))
    alpha = torch.zeros(H * W, dtype=DTYPE).index_copy(0, index, torch.cat(alpha_chunks))
    depth = depth.reshape(H, W)
    normal, valid = normals_from_depth(depth, K)
    return RenderOutput(color.reshape(H, W, 3), depth, alpha.reshape(H, W), normal, valid)
