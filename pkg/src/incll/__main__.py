import sys

from incll.cli import main

sys.exit(main())
