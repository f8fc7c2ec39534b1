import sys

from kronadapt.cli import main

sys.exit(main())
