import os

LISTEN_ADDRESS: str = os.environ.get("RANKPIPE_LISTEN", "127.0.0.1:8480")
MODEL_ROOT: str = os.environ.get("RANKPIPE_MODEL_ROOT", "models")
LOG_LEVEL: str = os.environ.get("RANKPIPE_LOG_LEVEL", "INFO")

PIPELINE_SCHEMA_VERSION: int = 1

# pipeline
JOIN_TIMEOUT: float = 1.0
CHANNEL_CAPACITY: int = 1024
REQUEST_DEADLINE: float = 5.0

# cube
BLOCK_SIZE_BYTES: int = 4 * 1024 * 1024
POLL_INTERVAL: float = 5.0

# caches
CUBE_CACHE_DISK_RATIO: float = 0.01
CUBE_CACHE_MEM_RATIO: float = 0.001
QUERY_CACHE_WINDOW: float = 120.0
# share of lookups on the hottest 1% of keys in the benchmark stream
ZIPF_TOP_MASS: float = 0.85
QUERY_CACHE_CAPACITY: int = 100_000
QUERY_CACHE_ADMISSION: float = 0.5

# offline tuning
LATENCY_SLACK: float = 0.05
CMA_ES_BUDGET: int = 3000
CMA_ES_MIN_BUDGET: int = 50
FINALISTS: int = 5

# online shedding
SHED_EPSILON: float = 0.05
CAPACITY_FRACTION: float = 0.8
MIN_KEEP_FRACTION: float = 0.05
QID_BUCKETS: int = 16
