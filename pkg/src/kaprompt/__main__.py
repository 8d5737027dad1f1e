import sys

from kaprompt.harness.cli import main

sys.exit(main())
