import logging

import numpy as np
from django.conf import settings

from .linalg import assemble, damp, schur_solve
from .models import ConvergenceReport, DampingConfig

logger = logging.getLogger(__name__)


def gauss_newton(problem, max_iters=None, cfg=None, *, max_retries=None,
                 step_tol=None, rel_obj_tol=None):
    """Damped Gauss-Newton with rollback.

    A step that raises the objective is undone and retried with epsilon x10;
    `max_retries` consecutive rises end the solve with `diverged` set.
    """
    max_iters = settings.GN_MAX_ITERS if max_iters is None else max_iters
    cfg = cfg or DampingConfig()
    max_retries = settings.GN_MAX_RETRIES if max_retries is None else max_retries
    step_tol = settings.GN_STEP_TOL if step_tol is None else step_tol
    rel_obj_tol = settings.GN_REL_OBJ_TOL if rel_obj_tol is None else rel_obj_tol

    objective = problem.objective()
    report = ConvergenceReport(objectives=[objective], final_damping=cfg.epsilon)
    epsilon = cfg.epsilon
    rises = 0
    for it in range(1, max_iters + 1):
        report.iterations = it
        system = damp(assemble(problem.linearize(), problem.n_primary, problem.n_depth),
                      DampingConfig(epsilon, cfg.lam))
        dp, dd = schur_solve(system)
        step_inf = max(np.max(np.abs(dp), initial=0.0), np.max(np.abs(dd), initial=0.0))
        if step_inf < step_tol:
            logger.debug("iter=%d obj=%.6e step_inf=%.3e damping=%.1e", it, objective, step_inf, epsilon)
            report.converged = True
            break
        state = problem.snapshot()
        problem.retract(dp, dd)
        candidate = problem.objective()
        logger.debug("iter=%d obj=%.6e step_inf=%.3e damping=%.1e", it, candidate, step_inf, epsilon)
        if not np.isfinite(candidate) or candidate > objective:
            problem.restore(state)
            if np.isfinite(candidate) and candidate - objective <= rel_obj_tol * max(objective, 1e-300):
                report.converged = True
                break
            rises += 1
            epsilon *= 10.0
            if rises >= max_retries:
                logger.warning("objective rose %d times in a row (obj=%.6e); giving up", rises, objective)
                report.diverged = True
                break
            continue
        rises = 0
        epsilon = cfg.epsilon
        change = (objective - candidate) / max(objective, 1e-300)
        objective = candidate
        report.objectives.append(objective)
        report.accepted += 1
        if change < rel_obj_tol:
            report.converged = True
            break
    report.final_damping = epsilon
    return report
