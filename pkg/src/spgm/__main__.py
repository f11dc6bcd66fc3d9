import sys

from spgm.cli import main

sys.exit(main())
