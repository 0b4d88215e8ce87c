import logging


class bcolors:
    HEADER = '\033[95m'
    OKBLUE = '\033[94m'
    OKCYAN = '\033[96m'
    OKGREEN = '\033[92m'
    WARNING = '\033[93m'
    FAIL = '\033[91m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'
    UNDERLINE = '\033[4m'


LEVEL_COLORS = {
    logging.DEBUG: bcolors.OKCYAN,
    logging.INFO: bcolors.OKBLUE,
    logging.WARNING: bcolors.WARNING,
    logging.ERROR: bcolors.FAIL,
    logging.CRITICAL: bcolors.FAIL + bcolors.BOLD,
}


class ColorFormatter(logging.Formatter):
    """Paints each record with the color of its level."""
    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        color = LEVEL_COLORS.get(record.levelno, "")
        return f"{color}{message}{bcolors.ENDC}"


def setup_logging(verbose: bool) -> logging.Logger:
    """Install the colored handler on the package loggers (idempotent)."""
    root = logging.getLogger("pathflow")
    if not any(isinstance(h.formatter, ColorFormatter) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(ColorFormatter("[%(levelname)s] %(name)s: %(message)s"))
        root.addHandler(handler)
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    return root


def get_logger(name: str) -> logging.Logger:
    """Child of the package logger so a single handler covers every module."""
    return logging.getLogger(f"pathflow.{name}")
