import sys

from swinmae.cli import main

sys.exit(main())
