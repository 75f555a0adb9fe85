import logging
from pathlib import Path
from typing import Optional

# Get the absolute path of the package directory
PACKAGE_DIR = Path(__file__).resolve().parent

# Create logger for this package
logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    """
    Configure console and (optionally) file logging for the whole package.
    Called once by the command-line entry point; library code only creates loggers.
    """
    handlers = [logging.StreamHandler()]  # Console handler
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))  # File handler
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, handlers=handlers, force=True)
    logger.debug("Logging configured")


__all__ = ["configure_logging", "PACKAGE_DIR"]
