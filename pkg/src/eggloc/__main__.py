import sys

from eggloc.cli import main

sys.exit(main())
