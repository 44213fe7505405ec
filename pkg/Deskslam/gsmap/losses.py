import numpy as np
import torch

from Deskslam.exceptions import ShapeMismatchError

from .models import DTYPE, ExposureParams, LossWeights


def apply_exposure(image, params):
    """I' = A I + b per pixel; accepts numpy arrays or tensors."""
    if torch.is_tensor(image):
        A = params.A if torch.is_tensor(params.A) else torch.as_tensor(params.A, dtype=image.dtype)
        b = params.b if torch.is_tensor(params.b) else torch.as_tensor(params.b, dtype=image.dtype)
        return image @ A.T + b
    return np.asarray(image) @ params.A.T + params.b


def fit_exposure(rendered, target, mask=None):
    """Least-squares affine colour map taking `rendered` onto `target`."""
    rendered = np.asarray(rendered, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        rendered, target = rendered[keep], target[keep]
    if rendered.shape[0] < 4:
        return ExposureParams()
    X = np.hstack([rendered, np.ones((rendered.shape[0], 1))])
    sol, *_ = np.linalg.lstsq(X, target, rcond=None)
    return ExposureParams(sol[:3].T, sol[3])


def scale_regularizer(scales):
    """Mean over Gaussians of sum_k |s_k - mean(s)|."""
    if scales.shape[0] == 0:
        return scales.new_zeros(())
    return (scales - scales.mean(dim=1, keepdim=True)).abs().sum(dim=1).mean()


def compute_loss(render, targets, weights=None, scales=None, exposure=None):
    """Weighted colour, depth, normal and scale losses; returns (total, terms)."""
    weights = weights or LossWeights()
    if render.color.shape != targets.color.shape or render.depth.shape != targets.depth.shape:
        raise ShapeMismatchError(f"render {tuple(render.color.shape)} vs targets {tuple(targets.color.shape)}")
    color = render.color if exposure is None else apply_exposure(render.color, exposure)
    terms = {'color': (color - targets.color).abs().mean()}

    depth_mask = targets.depth > 0
    if bool(depth_mask.any()):
        terms['depth'] = (render.depth - targets.depth)[depth_mask].abs().mean()
    else:
        terms['depth'] = render.depth.new_zeros(())

    if targets.normal is not None:
        normal_mask = render.normal_valid & (torch.linalg.norm(targets.normal, dim=-1) > 0.5)
        if bool(normal_mask.any()):
            cosine = (render.normal * targets.normal).sum(-1)
            terms['normal'] = (1.0 - cosine)[normal_mask].abs().mean()
        else:
            terms['normal'] = render.depth.new_zeros(())
    else:
        terms['normal'] = render.depth.new_zeros(())

    terms['scale'] = scale_regularizer(scales) if scales is not None else torch.zeros((), dtype=DTYPE)
    total = (weights.lambda_c * terms['color'] + weights.lambda_d * terms['depth']
             + weights.lambda_n * terms['normal'] + weights.lambda_s * terms['scale'])
    return total, terms
