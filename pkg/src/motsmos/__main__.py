import sys

from motsmos.cli import main

sys.exit(main())
