import sys

from mrot.cli import main

sys.exit(main())
