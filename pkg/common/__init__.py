from common.config import CONFIG
from common.colors import bcolors, setup_logging, get_logger
from common.cache import VALUE_CACHE, ValueCache
from common.pool import WorkerPool
from common import errors

setup_logging(CONFIG.verbose)
