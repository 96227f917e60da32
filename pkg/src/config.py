import os
from dotenv import load_dotenv
load_dotenv()


#### Run environment (override in .env)
OUTPUT_DIR = os.getenv("LAB_OUTPUT_DIR", "./runs")
WORKERS = int(os.getenv("LAB_WORKERS", "1"))
LOG_LEVEL = os.getenv("LAB_LOG_LEVEL", "INFO")
DEFAULT_SEED = int(os.getenv("LAB_SEED", "20140101"))


#### Numerical tolerances shared by the dynamics modules
# pair distance may undershoot the diameter by this relative amount
CONTACT_TOL = 1e-9
# normalized discriminant 1 - (rho/eps)^2 below this is a grazing contact
GRAZING_TOL = 1e-14
# two contacts closer than this in time count as simultaneous
SIMULTANEITY_TOL = 1e-12
# |nu| = 1 check for collision normals
UNIT_TOL = 1e-12
MAX_EVENTS = 10**8
ENERGY_DRIFT_TOL = 1e-6


#### Kinetic defaults
GRID_CUTOFF = 4.0
GRID_RESOLUTION = 32
N_ANGLES = 16
GRAZING_CUTOFF = 1e-2
