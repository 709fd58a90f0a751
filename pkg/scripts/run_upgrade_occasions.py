"""Run all four upgrade occasions with the default toy configuration.

Writes one output directory per scenario under runs/occasions/.
"""

import sys
from pathlib import Path

from bict.cli import main

BASE = Path("runs") / "occasions"

SCENARIOS = ("extended-data", "extended-class", "improved-arch", "improved-loss")


if __name__ == "__main__":
    for scenario in SCENARIOS:
        out = BASE / scenario
        cfg = out.with_suffix(".cfg")
        cfg.parent.mkdir(parents=True, exist_ok=True)
        cfg.write_text(f"run.scenario = {scenario}\n")
        print(f"[occasions] {scenario} -> {out}")
        rc = main(["run", "--config", str(cfg), "--out", str(out), "--force"])
        if rc != 0:
            sys.exit(rc)
