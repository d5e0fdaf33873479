"""Run the command-line interface with ``python -m nuggetgp``."""
import sys

from .cli import main

sys.exit(main())
