import logging
from logging.handlers import RotatingFileHandler
import os
from src.app.core.config import settings

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def create_logger(name, log_file):
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO))

    # Services are imported from several entry points; attach handlers once
    if any(isinstance(h, RotatingFileHandler) for h in logger.handlers):
        return logger

    log_dir = settings.LOG_DIR_PATH
    os.makedirs(log_dir, exist_ok=True)

    formatter = logging.Formatter(LOG_FORMAT)
    handler = RotatingFileHandler(
        os.path.join(log_dir, log_file), maxBytes=10485760, backupCount=5
    )
    handler.setFormatter(formatter)
    logger.addHandler(handler)

    # stderr mirror for long runs; stdout stays reserved for command results
    if settings.LOG_TO_CONSOLE:
        console = logging.StreamHandler()
        console.setFormatter(formatter)
        logger.addHandler(console)

    return logger
