import sys

from promptcd.cli import main

sys.exit(main())
