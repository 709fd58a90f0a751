"""Ablate the upgrade module hidden dimension at the default lambda."""

import sys

from bict.cli import main

if __name__ == "__main__":
    jobs = sys.argv[1] if len(sys.argv) > 1 else "3"
    sys.exit(main(["sweep-dim", "--out", "runs/dim_sweep",
                   "--jobs", jobs, "--force"]))
