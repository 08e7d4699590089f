import sys

from udaclr.cli import main

sys.exit(main())
