import logging

from rich.console import Console
from rich.logging import RichHandler

# Progress bars and log records share one stderr console so they do not tear.
console = Console(stderr=True)


def setup_logging(level: str = "INFO") -> None:
    """
    Installs a rich handler on the root logger.

    Args:
        level (str): Logging level name, e.g. "DEBUG" or "warning".
    """
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )
