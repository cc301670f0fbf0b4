import sys

from latentpolicy._cli import main

sys.exit(main())
