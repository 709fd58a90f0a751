"""Sequential two-upgrade run: BCT-only, BiCT, and BiCT with momentum."""

import sys

from bict.cli import main

if __name__ == "__main__":
    jobs = sys.argv[1] if len(sys.argv) > 1 else "3"
    sys.exit(main(["sequential", "--out", "runs/sequential",
                   "--jobs", jobs, "--force"]))
