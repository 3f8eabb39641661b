import os

# seed used when neither --seed nor a config file provides one
DEFAULT_SEED = int(os.environ.get("MCPTEST_SEED", "0"))

# alpha (FWER) and delta (FDR) share the same default level
DEFAULT_ALPHA = float(os.environ.get("MCPTEST_ALPHA", "0.05"))

DEFAULT_PERMUTATIONS = int(os.environ.get("MCPTEST_PERMUTATIONS", "100000"))
DEFAULT_REPS = int(os.environ.get("MCPTEST_REPS", "1000"))
DEFAULT_RANK_SIZE = int(os.environ.get("MCPTEST_RANK_SIZE", "1000"))
DEFAULT_DEPTH = 1000

# absolute MAP difference above which a system pair is called different
DEFAULT_GAMMA = float(os.environ.get("MCPTEST_GAMMA", "0.0005"))

DEFAULT_THREADS = int(os.environ.get("MCPTEST_THREADS", str(os.cpu_count() or 1)))

# exact Wilcoxon distribution up to this many nonzero differences
WILCOXON_EXACT_CUTOFF = 25

# regressor fitting
FIT_L2_PENALTY = 1e-6
FIT_GRAD_TOL = 1e-8
FIT_MAX_ITER = 100

# synthetic bank: theta0 ~ U[0.5, 1.5], theta1 ~ U[-0.05, -0.005]
SYNTHETIC_THETA0_RANGE = (0.5, 1.5)
SYNTHETIC_THETA1_RANGE = (-0.05, -0.005)

DEBUGGING = os.environ.get("DEBUGGING", "0").lower() in ["1", "true", "True", "t", "T"]
