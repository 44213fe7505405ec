import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigvalsh

from Deskslam.exceptions import DegenerateProblemError, RankDeficiencyError

from .models import BlockSystem


def assemble(blocks, n_primary, n_depth):
    """Accumulate J^T W J and -J^T W r for a list of FactorBlocks."""
    blocks = [b for b in blocks if b.n_rows > 0]
    if not blocks:
        raise DegenerateProblemError("no factors to assemble")
    B = np.zeros((n_primary, n_primary))
    v = np.zeros(n_primary)
    C = np.zeros(n_depth)
    w = np.zeros(n_depth)
    e_rows, e_cols, e_vals = [], [], []
    for block in blocks:
        keep = block.cols >= 0
        cols = block.cols[keep]
        Jp = block.J_primary[:, :, keep]
        WJp = Jp * block.weights[:, :, None]
        if cols.size:
            B[np.ix_(cols, cols)] += np.einsum('nmk,nml->kl', WJp, Jp)
            v[cols] -= np.einsum('nmk,nm->k', WJp, block.residuals)
        if block.J_depth is None:
            continue
        has_depth = block.depth_cols >= 0
        dcols = block.depth_cols[has_depth]
        Jd = block.J_depth[has_depth]
        Wd = block.weights[has_depth]
        C += np.bincount(dcols, weights=np.sum(Wd * Jd ** 2, axis=1), minlength=n_depth)
        w -= np.bincount(dcols, weights=np.sum(Wd * Jd * block.residuals[has_depth], axis=1), minlength=n_depth)
        if cols.size:
            coupling = np.einsum('nmk,nm->nk', WJp[has_depth], Jd)
            e_rows.append(np.broadcast_to(cols, coupling.shape).ravel())
            e_cols.append(np.repeat(dcols, cols.size))
            e_vals.append(coupling.ravel())
    if e_rows:
        E = sp.coo_matrix((np.concatenate(e_vals), (np.concatenate(e_rows), np.concatenate(e_cols))),
                          shape=(n_primary, n_depth)).tocsr()
    else:
        E = sp.csr_matrix((n_primary, n_depth))
    return BlockSystem(B, E, C, v, w)


def damp(system, cfg):
    """H <- (1 + lam) H + eps I, block by block."""
    f = 1.0 + cfg.lam
    return BlockSystem(
        f * system.B + cfg.epsilon * np.eye(system.n_primary),
        (f * system.E).tocsr(),
        f * system.C + cfg.epsilon,
        system.v.copy(),
        system.w.copy(),
    )


def schur_solve(system):
    """Eliminate the diagonal depth block and solve the reduced system by Cholesky."""
    C_inv = np.divide(1.0, system.C, out=np.zeros_like(system.C), where=system.C > 0)
    if system.n_primary == 0:
        return np.zeros(0), C_inv * system.w
    if system.n_depth == 0:
        S = system.B
        rhs = system.v
    else:
        EC = system.E @ sp.diags(C_inv)
        S = system.B - (EC @ system.E.T).toarray()
        rhs = system.v - EC @ system.w
    S = 0.5 * (S + S.T)
    try:
        factor = cho_factor(S)
    except LinAlgError:
        raise RankDeficiencyError(float(eigvalsh(S)[0])) from None
    dp = cho_solve(factor, rhs)
    dd = C_inv * (system.w - system.E.T @ dp)
    return dp, dd


def reduced_hessian(system):
    """B - E C^-1 E^T (undamped gauge checks)."""
    if system.n_depth == 0:
        return system.B.copy()
    C_inv = np.divide(1.0, system.C, out=np.zeros_like(system.C), where=system.C > 0)
    return system.B - (system.E @ sp.diags(C_inv) @ system.E.T).toarray()
