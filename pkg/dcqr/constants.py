"""Numeric defaults shared by the planning and estimation pipeline."""

MODEL_VERSION = "1.0.0"

# Quantile levels are kept inside (DELTA_TAU, 1 - DELTA_TAU)
DELTA_TAU = 0.01

# Quantile grid defaults (J levels per batch, spread d_tau)
DEFAULT_J = 5
DEFAULT_D_TAU = 0.5

DEFAULT_KERNEL = "epanechnikov"
DEFAULT_N_GRID = 200

# Pilot stage
PILOT_GRID_SIZE = 401
RULE_OF_THUMB_FACTOR = 1.06
DENSITY_GRID_SIZE = 2048
DENSITY_GRID_PAD = 3.0  # multiples of h_density beyond the extreme residuals
DENSITY_FLOOR = 1e-3
SIGMA_FLOOR_FRACTION = 1e-4  # of sd(y)
MIN_DENSITY_BANDWIDTH = 1e-3

# Bandwidth widening when a local window is too sparse
MIN_EFFECTIVE_N = 10
WIDENING_FACTOR = 1.5
MAX_WIDENINGS = 4

# Check-loss solver schedule
SMOOTHING_STAGES = 6
SMOOTHING_DECAY = 0.25
SMOOTHING_IQR_DIVISOR = 10.0
NEWTON_MAX_ITER = 50
COORDINATE_MAX_SWEEPS = 100
POLISH_EXTRA_POINTS = 3
CERTIFICATE_TOLERANCE = 1e-6  # times the total weight
RESIDUAL_ZERO_TOLERANCE = 1e-10  # times (1 + max|y|)

# Composite planning
ROOT_TOLERANCE = 1e-8
ROOT_MAX_ITER = 200
RIDGE_CONDITION_LIMIT = 1e12
RIDGE_SCALE = 1e-10
SINGULAR_PLAN_TOLERANCE = 1e-12
WEIGHT_SUPPORT_FRACTION = 0.9  # central share of the evaluation interval
FLAT_CURVATURE_TOLERANCE = 1e-12
BETA_SUBGRID_SIZE = 20
CURVATURE_BANDWIDTH_FACTOR = 2.0  # h_p = factor * h_pilot

# Oracle local linear bandwidth selection
CV_FOLDS = 5
CV_CANDIDATES = 20
CV_SPAN = 3.0  # candidates cover [h / span, h * span]
PLUGIN_CLIP = (0.1, 10.0)  # relative to the normal-reference bandwidth

# Simulation harness
DEFAULT_REPLICATIONS = 100
MIXTURE_SCALE = 10.0 ** 0.5

# Evaluation intervals of the two simulation designs
HOMOSCEDASTIC_INTERVAL = (-1.5, 1.5)
HETEROSCEDASTIC_INTERVAL = (0.0, 1.0)

# Outlier protocol defaults
DEFAULT_GAMMAS = (2.5, 3.0, 3.5)
DEFAULT_SCALES = (None, 1.0, 2.0, 5.0, 10.0, 50.0)

# Number formatting for replayable artifacts
REPLAY_FLOAT_FORMAT = "%.17g"
REPORT_FLOAT_FORMAT = "%.6f"
