"""Hot-refresh deployment timeline on the default upgrade occasion."""

import sys

from bict.cli import main

if __name__ == "__main__":
    sys.exit(main(["hot-refresh", "--out", "runs/hot_refresh", "--force"]))
