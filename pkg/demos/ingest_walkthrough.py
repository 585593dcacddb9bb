"""Round trip through the field-data path using simulated payloads.

Writes payload files and a node list to a scratch directory, then runs the
same steps as ``locverify ingest --analyze``.  A handful of nodes report
city names instead of coordinates, some misspelled, and some report a
location far from where they really are.

Usage: python demos/ingest_walkthrough.py [workdir]
"""

import statistics
import sys
import tempfile
from pathlib import Path

import numpy as np

from locverify.geo import load_default_zones
from locverify.ingest import (
    analyze_input,
    build_analysis_input,
    load_default_cities,
    load_descriptors,
    load_payload_dir,
    payloads_from_simulation,
    safe_filename,
    save_descriptors,
)
from locverify.netgen import generate_network, simulate_measurements
from locverify.propagation import load_default_model
from locverify.schedule import build_schedule


def main(workdir: str | None = None) -> None:
    root = Path(workdir or tempfile.mkdtemp(prefix="ingest-"))
    zones, model = load_default_zones(), load_default_model()
    net = generate_network(300, zones, 6)
    sched = build_schedule(b"walkthrough", net.keys(), 40)
    ms = simulate_measurements(net, sched, model, 6)

    rng = np.random.default_rng(6)
    names = {0: "Berlin", 1: "  PARIS, fr ", 2: "Parris", 3: "Brest"}
    movers = rng.choice(np.arange(10, net.n), 25, replace=False)
    for i in movers:
        names[int(i)] = "Madrid" if net.true_coords()[i, 1] > 5 else "Warsaw"
    files, entries = payloads_from_simulation(net, ms, names, drop_fraction=0.1, seed=6)

    (root / "payloads").mkdir(parents=True, exist_ok=True)
    for f in files:
        (root / "payloads" / safe_filename(f.node)).write_bytes(f.to_bytes())
    save_descriptors(entries, root / "nodes.json")
    print(f"wrote {len(files)} payloads under {root}")

    pd = load_payload_dir(root / "payloads")
    inp = build_analysis_input(pd.files, load_descriptors(root / "nodes.json"), 30, 0, load_default_cities())
    print(f"included {len(inp.subsets)}, excluded {len(inp.excluded)}, mirrored pairs {int(inp.mirrored.sum())}")
    for i, why in sorted(inp.excluded.items()):
        print(f"  node {i}: {why}")

    rows = analyze_input(inp, model, tau=0.2)
    acc = [r["error_km"] for r in rows if r["decision"] == "accept"]
    rej = [r["error_km"] for r in rows if r["decision"] == "reject"]
    print(f"accepted {len(acc)}: median distance to reported location {statistics.median(acc):.0f} km")
    if rej:
        print(f"rejected {len(rej)}: median distance to reported location {statistics.median(rej):.0f} km")
    caught = sum(1 for r in rows if r["node"] in set(movers.tolist()) and r["decision"] == "reject")
    print(f"nodes reporting a distant city that were rejected: {caught} of {len(movers)}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
