import sys

from shufflehist.harness.cli import main

sys.exit(main())
