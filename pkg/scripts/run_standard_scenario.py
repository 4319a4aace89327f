#!/usr/bin/env python3
"""Run the standard mixed scenario twice and show the determinism witness.

Optionally writes the scenario as a JSON-lines workload script usable with
`sagectl run`.
"""

import argparse
import json
import sys

sys.path.insert(0, "src")

from sagesim import SageEnv
from sagesim.scripting import run_script_text
from sagesim.workloads import scenario_to_jsonl, standard_scenario, standard_topology


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--emit", help="write the scenario JSON-lines here and exit")
    args = parser.parse_args()

    text = scenario_to_jsonl(standard_scenario(args.seed))
    if args.emit:
        with open(args.emit, "w") as fh:
            fh.write(text)
        print(f"wrote {args.emit} ({len(text.splitlines())} commands)")
        return 0

    hashes = []
    for run in (1, 2):
        env = SageEnv.boot(standard_topology(args.seed))
        code, snap, failures = run_script_text(env, text)
        for f in failures:
            print(f"ASSERT FAIL {f}", file=sys.stderr)
        h = env.cluster.trace_hash()
        hashes.append((h, json.dumps(snap.to_json(), sort_keys=True)))
        print(f"run {run}: exit={code} trace_sha256={h}")
    same = hashes[0] == hashes[1]
    print("deterministic:", same)
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
