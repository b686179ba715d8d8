import logging
import os

LOG_LEVEL_ENV = "FLOWREC_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def resolve_level(level: str | int | None = None) -> int:
    """Pick the log level: explicit argument, then environment, then INFO."""
    if level is None:
        level = os.environ.get(LOG_LEVEL_ENV, "INFO")
    if isinstance(level, int):
        return level
    resolved = logging.getLevelName(level.strip().upper())
    if not isinstance(resolved, int):
        raise ValueError(f"Unknown log level {level!r}.")
    return resolved


def configure_logging(level: str | int | None = None) -> logging.Logger:
    """Attach a single stream handler to the package logger."""
    logger = logging.getLogger("flowrec")
    logger.setLevel(resolve_level(level))
    if not any(getattr(h, "_flowrec", False) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._flowrec = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
    return logger


def progress_disabled(logger: logging.Logger) -> bool:
    """Progress bars follow the logger: hidden when INFO is not emitted."""
    return not logger.isEnabledFor(logging.INFO)
