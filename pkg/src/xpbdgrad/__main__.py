import sys

from .app_cli import main

sys.exit(main())
