import sys

from etb.cli import main

sys.exit(main())
