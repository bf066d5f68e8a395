import sys

from roomlayout.cli import main

sys.exit(main())
