import logging
from pathlib import Path
from rich.logging import RichHandler
from logging import Logger, INFO, WARNING

LOG_FILE_NAME = "pvseg.log"
FILE_FORMAT = "%(asctime)s [%(levelname)s] %(filename)s:%(lineno)d  %(message)s"


def setup_logging(
    name: str = "pvseg",
    level: int = WARNING,
    log_file: str | Path | None = None,
    console: bool = True,
) -> Logger:
    """
    Configures the ``pvseg`` namespace logger once per command. Module loggers
    from :func:`pvseg.utils.log.get_logger` propagate into it, so a file
    handler here collects every record of the run.
    """
    logger = logging.getLogger(name)

    # repeated commands in one process must not stack handlers or leak files
    for handler in logger.handlers:
        handler.close()
    logger.handlers.clear()

    logger.setLevel(level)
    logger.propagate = False

    if console:
        rich_handler = RichHandler(rich_tracebacks=True)
        rich_handler.setLevel(level)
        logger.addHandler(rich_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
        logger.addHandler(file_handler)

    return logger


def log_to_run_dir(out_dir: str | Path, level: int = INFO) -> Path:
    """File-only logging into ``out_dir/pvseg.log``; returns the log path."""
    log_file = Path(out_dir) / LOG_FILE_NAME
    setup_logging("pvseg", level, log_file=log_file, console=False)
    return log_file
