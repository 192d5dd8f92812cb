"""
AOSPR Routing Lab - adaptive shortest-path routing experiments
Settings shared by the CLI, the experiment service and the harness
"""
import os
from dotenv import load_dotenv

load_dotenv()

# Run registry
DATABASE_URL = os.getenv(
    "AOSPR_DATABASE_URL",
    "sqlite:///./aospr_runs.db"  # Local SQLite registry
)

# Server
HOST = os.getenv("AOSPR_HOST", "0.0.0.0")
PORT = int(os.getenv("AOSPR_PORT", "9000"))
DEBUG = os.getenv("AOSPR_DEBUG", "False") == "True"

# Experiments
RESULTS_DIR = os.getenv("RESULTS_DIR", "./results")
PATH_CAP = int(os.getenv("PATH_CAP", "10000"))
MAX_WORKERS = int(os.getenv("MAX_WORKERS", "1"))
DEFAULT_REPETITIONS = int(os.getenv("DEFAULT_REPETITIONS", "10"))

# Logging
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = '%(asctime)s  %(levelname)-7s  %(message)s'
LOG_DATEFMT = '%H:%M:%S'
