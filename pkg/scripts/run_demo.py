#!/usr/bin/env python3
"""Run the bundled three-follower demo end to end.

Learns the distributed controllers from I/O data, rolls out the learned
closed loop, and runs the oracle validation suite.  Outputs land in the
directory given as the first argument (default: out/demo).
"""
import sys

from swarmql.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "out/demo"
    sys.exit(main(["demo-paper", "--out", out]))
