import sys

from ergomfg.cli import main

sys.exit(main())
