import sys

from .lab_cli import main

sys.exit(main())
