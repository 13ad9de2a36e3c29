import sys

from lifelong_depth.cli import main

sys.exit(main())
