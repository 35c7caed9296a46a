import sys

from dbgc.cli import main

sys.exit(main())
