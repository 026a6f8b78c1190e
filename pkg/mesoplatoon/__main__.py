"""Entry point for `python -m mesoplatoon`."""

from .cli import main

if __name__ == "__main__":
    main()
