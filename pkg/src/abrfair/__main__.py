import sys

from abrfair.cli import main

sys.exit(main())
