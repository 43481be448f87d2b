import sys

from fedspa.cli import main

sys.exit(main())
