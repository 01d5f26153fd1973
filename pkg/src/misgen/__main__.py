import sys

from misgen.cli import main

sys.exit(main())
