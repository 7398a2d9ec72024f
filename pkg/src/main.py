"""Main entry point for occ4d."""

import logging
import sys
from pathlib import Path

from rich.logging import RichHandler

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from occ4d.cli import main as cli_main
from occ4d.config import log_level


# Configure logging
logging.basicConfig(
    level=log_level(),
    format="%(name)s - %(message)s",
    handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
)
logger = logging.getLogger(__name__)


def main():
    """Main application entry point."""
    try:
        sys.exit(cli_main())
    except Exception as e:
        logger.error(f"Application error: {e}", exc_info=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
