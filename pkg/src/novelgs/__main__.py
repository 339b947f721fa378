import sys

from novelgs.cli import main

sys.exit(main())
