from nashrate.cli import main
from nashrate.logging_setup import setup_logging


if __name__ == "__main__":
    setup_logging()
    raise SystemExit(main())
