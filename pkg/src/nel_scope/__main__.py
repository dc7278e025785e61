import sys

from nel_scope.cli import main

sys.exit(main())
