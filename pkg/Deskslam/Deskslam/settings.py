from pathlib import Path

from decouple import Csv, config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Nothing is served or signed.
SECRET_KEY = config('SECRET_KEY', default='deskslam-insecure-5c1e0b7a9f2d4e63a8b1c0f7e6d5a4b3')
DEBUG = config('DEBUG', default=False, cast=bool)


# Application definition

LOCAL_APPS = [
    'geom',
    'factor_graph',
    'solver',
    'tracker',
    'loops',
    'gsmap',
    'simworld',
    'metrics',
    'console',
]

INSTALLED_APPS = LOCAL_APPS

# No models, no database.
DATABASES = {}

USE_I18N = False
USE_TZ = True


# Run

SEED = config('SEED', default=0, cast=int)
OUTPUT_DIR = config('OUTPUT_DIR', default='out')
LOG_LEVEL = config('LOG_LEVEL', default='INFO')


# Pipeline

STAGES = config('STAGES', default='tracking,pgba,full_ba,refine', cast=Csv())
# run PGBA after every keyframe that finds a loop instead of once after tracking
ONLINE_LOOPS = config('ONLINE_LOOPS', default=False, cast=bool)
FULL_BA_ITERS = config('FULL_BA_ITERS', default=20, cast=int)
DUMP_TRAJ = config('DUMP_TRAJ', default=False, cast=bool)


# Camera / synthetic world

IMAGE_WIDTH = config('IMAGE_WIDTH', default=320, cast=int)
IMAGE_HEIGHT = config('IMAGE_HEIGHT', default=240, cast=int)
FOCAL = config('FOCAL', default=277.0, cast=float)
SCENE_KIND = config('SCENE_KIND', default='room')
TRAJECTORY_KIND = config('TRAJECTORY_KIND', default='loop')
N_KEYFRAMES = config('N_KEYFRAMES', default=50, cast=int)

FLOW_SIGMA = config('FLOW_SIGMA', default=0.5, cast=float)
PRIOR_NOISE_SIGMA = config('PRIOR_NOISE_SIGMA', default=0.0, cast=float)
SCALE_DRIFT_RATE = config('SCALE_DRIFT_RATE', default=1.0, cast=float)
YAW_DRIFT = config('YAW_DRIFT', default=0.0, cast=float)
SMOOTH_FIELD = config('SMOOTH_FIELD', default=True, cast=bool)


# Factor graph / tracking

GRAPH_STRIDE = config('GRAPH_STRIDE', default=4, cast=int)
SCALE_GRID_ROWS = config('SCALE_GRID_ROWS', default=2, cast=int)
SCALE_GRID_COLS = config('SCALE_GRID_COLS', default=2, cast=int)
PRIOR_WEIGHT = config('PRIOR_WEIGHT', default=1.0, cast=float)

N_INIT = config('N_INIT', default=12, cast=int)
INIT_EDGE_SPAN = config('INIT_EDGE_SPAN', default=3, cast=int)
D_FLOW = config('D_FLOW', default=8.0, cast=float)
WINDOW = config('WINDOW', default=8, cast=int)
BA_JDSA_INTERLEAVE = config('BA_JDSA_INTERLEAVE', default=1, cast=int)
JDSA = config('JDSA', default=True, cast=bool)
# neighbour edges are added when the mean flow is below this multiple of D_FLOW
OVERLAP_FLOW_FACTOR = config('OVERLAP_FLOW_FACTOR', default=2.0, cast=float)


# Solver

DAMPING_EPSILON = config('DAMPING_EPSILON', default=1e-4, cast=float)
DAMPING_LAMBDA = config('DAMPING_LAMBDA', default=1e-1, cast=float)
GN_MAX_ITERS = config('GN_MAX_ITERS', default=10, cast=int)
GN_MAX_RETRIES = config('GN_MAX_RETRIES', default=3, cast=int)
GN_STEP_TOL = config('GN_STEP_TOL', default=1e-8, cast=float)
GN_REL_OBJ_TOL = config('GN_REL_OBJ_TOL', default=1e-10, cast=float)


# Loop closing

TAU_FLOW = config('TAU_FLOW', default=2.0 * D_FLOW, cast=float)
TAU_ORI = config('TAU_ORI', default=0.5, cast=float)
TAU_TEMP = config('TAU_TEMP', default=WINDOW + 4, cast=int)
PGBA_MAX_ITERS = config('PGBA_MAX_ITERS', default=10, cast=int)
MIN_DISTILL_CORRESPONDENCES = config('MIN_DISTILL_CORRESPONDENCES', default=20, cast=int)


# Gaussian map

DOWNSAMPLE_PSI = config('DOWNSAMPLE_PSI', default=32, cast=int)
MAP_STRIDE = config('MAP_STRIDE', default=2, cast=int)
MAP_ITERS_PER_KEYFRAME = config('MAP_ITERS_PER_KEYFRAME', default=10, cast=int)
PRUNE_INTERVAL = config('PRUNE_INTERVAL', default=150, cast=int)
OPACITY_RESET_INTERVAL = config('OPACITY_RESET_INTERVAL', default=500, cast=int)
PRUNE_OPACITY = config('PRUNE_OPACITY', default=0.005, cast=float)
RESET_OPACITY = config('RESET_OPACITY', default=0.01, cast=float)
SPAWN_ALPHA = config('SPAWN_ALPHA', default=0.5, cast=float)
DEFAULT_GAUSSIAN_SCALE = config('DEFAULT_GAUSSIAN_SCALE', default=0.01, cast=float)
LITERAL_SCALE_UPDATE = config('LITERAL_SCALE_UPDATE', default=False, cast=bool)
TILE_SIZE = config('TILE_SIZE', default=16, cast=int)

LAMBDA_C = config('LAMBDA_C', default=0.95, cast=float)
LAMBDA_D = config('LAMBDA_D', default=0.25, cast=float)
LAMBDA_N = config('LAMBDA_N', default=0.1, cast=float)
LAMBDA_S = config('LAMBDA_S', default=10.0, cast=float)

MEANS_LR = config('MEANS_LR', default=1.6e-4, cast=float)  # times scene extent
COLORS_LR = config('COLORS_LR', default=2.5e-3, cast=float)
OPACITY_LR = config('OPACITY_LR', default=5e-2, cast=float)
SCALES_LR = config('SCALES_LR', default=5e-3, cast=float)
QUATS_LR = config('QUATS_LR', default=1e-3, cast=float)
POSE_LR = config('POSE_LR', default=1e-3, cast=float)
POSE_LR_FINAL = config('POSE_LR_FINAL', default=1e-5, cast=float)
EXPOSURE_LR = config('EXPOSURE_LR', default=1e-3, cast=float)
REFINE_ITERS = config('REFINE_ITERS', default=200, cast=int)

COVERAGE_THRESHOLD = config('COVERAGE_THRESHOLD', default=0.3, cast=float)


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {'format': '%(levelname)s %(name)s %(message)s'},
    },
    'handlers': {
        'console': {'class': 'logging.StreamHandler', 'formatter': 'plain'},
    },
    'root': {'handlers': ['console'], 'level': LOG_LEVEL},
}


PUBLISHED_DEFAULTS = {
    'N_INIT': 12,
    'SCALE_GRID_ROWS': 2,
    'SCALE_GRID_COLS': 2,
    'LAMBDA_C': 0.95,
    'LAMBDA_D': 0.25,
    'LAMBDA_N': 0.1,
    'LAMBDA_S': 10.0,
    'DOWNSAMPLE_PSI': 32,
    'DAMPING_EPSILON': 1e-4,
    'DAMPING_LAMBDA': 0.1,
    'MAP_ITERS_PER_KEYFRAME': 10,
    'PRUNE_INTERVAL': 150,
    'OPACITY_RESET_INTERVAL': 500,
}

