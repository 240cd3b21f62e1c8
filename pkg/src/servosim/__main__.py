import sys

from servosim.cli import main

sys.exit(main())
