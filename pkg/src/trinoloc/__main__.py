import sys

from trinoloc.cli import main

sys.exit(main())
