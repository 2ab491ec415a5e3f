import sys

from agem.cli import main

sys.exit(main())
