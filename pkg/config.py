import os
from pathlib import Path

BASE_DIR = Path(os.path.dirname(os.path.abspath(__file__)))

# Shipped data files (isotopes, attenuation table, device presets, fixtures)
DATA_DIR = Path(os.environ.get("FALLOUT_DATA_DIR", str(BASE_DIR / "data")))

# Run outputs (event logs, manifests, reports)
OUTPUT_DIR = Path(os.environ.get("FALLOUT_OUTPUT_DIR", str(BASE_DIR / "runs")))
OUTPUT_DIR.mkdir(exist_ok=True)

# DuckDB run registry
DB_PATH = Path(os.environ.get("FALLOUT_DB_PATH", str(OUTPUT_DIR / "fallout.duckdb")))
REGISTER_RUNS = os.environ.get("FALLOUT_REGISTER_RUNS", "true").lower() == "true"

TOOL_VERSION = "0.3.0"

GIB = 1 << 30

# Simulation defaults
DEFAULT_SEED = int(os.environ.get("FALLOUT_SEED", "20231101"))
SCAN_READ_RATE_BYTES_PER_S = float(os.environ.get("FALLOUT_READ_RATE", str(GIB / 10)))
AMBIENT_RATE_PER_DAY_PER_GIB = float(os.environ.get("FALLOUT_AMBIENT_PER_DAY_GIB", "0.6"))
REFERENCE_DISTANCE_CM = 5.0

# Campaign parallelism. The chunk count is fixed so histograms do not
# depend on how many workers happen to run them.
CAMPAIGN_WORKERS = int(os.environ.get("FALLOUT_WORKERS", "4"))
CAMPAIGN_CHUNKS = int(os.environ.get("FALLOUT_CHUNKS", "16"))
