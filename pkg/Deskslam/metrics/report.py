"""Machine-readable run report (`report.json`).

Every key of the schema is present in every report; skipped stages and
metrics that were not computed are null.
"""
import json
import math
from pathlib import Path

from Deskslam.exceptions import StorageError

STAGES = ('tracking', 'pgba', 'full_ba', 'refine')
DEPTH_SOURCES = ('prior_single', 'prior_grid', 'ba', 'jdsa', 'rendered')


def empty_report(seed):
    return {
        'seed': seed,
        'stages': {stage: None for stage in STAGES},
        'depth': {source: None for source in DEPTH_SOURCES},
        'psnr': None,
        'loops': None,
        'map': None,
        'failures': [],
    }


def stage_entry(ate_sim3=None, ate_se3=None, solver=None, n_keyframes=None):
    return {
        'ate_sim3': ate_sim3,
        'ate_se3': ate_se3,
        'solver': solver,
        'n_keyframes': n_keyframes,
    }


def _clean(value):
    """JSON-safe copy: inf becomes the string sentinel, nan becomes null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, 'item') and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
    return value


def dumps(report):
    return json.dumps(_clean(report), sort_keys=True, indent=2) + '\n'


def write_report(path, report):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(report), encoding='utf-8', newline='\n')
    except OSError as exc:
        raise StorageError(f"cannot write report {path}: {exc}") from exc
    return path


def read_report(path):
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as exc:
        raise StorageError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StorageError(f"{path} is not a valid report: {exc}") from exc
