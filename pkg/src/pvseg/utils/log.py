import logging

from pvseg.logging import setup_logging


def get_logger(name: str = "pvseg", level: int = logging.INFO) -> logging.Logger:
    """
    Returns a module logger.

    Dotted names (``pvseg.data.manifest``) get no handler of their own and
    propagate into their namespace logger, so whatever
    :func:`pvseg.logging.setup_logging` installed there (console, run file
    or both) receives their records. A namespace logger without handlers
    gets a RichHandler on first use.

    :param name: Name of the logger (usually ``__name__``).
    :param level: Logging level.
    :return: Configured logger.
    """
    logger = logging.getLogger(name)

    # Remove any existing handlers from this logger
    while logger.handlers:
        logger.removeHandler(logger.handlers[0])

    logger.setLevel(level)

    # If logging is globally disabled, do not add any handlers
    if not logging.getLogger().isEnabledFor(logging.CRITICAL):
        return logger

    namespace = name.partition(".")[0]
    if namespace != name:
        logger.propagate = True
        if not logging.getLogger(namespace).handlers:
            setup_logging(namespace, level)
        return logger

    return setup_logging(name, level)
