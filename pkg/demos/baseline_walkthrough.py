"""Honest network end to end: place nodes, draw references, measure, localize, verify.

Usage: python demos/baseline_walkthrough.py [n] [seed]
"""

import sys

import numpy as np

from locverify.confidence import confidence_scores
from locverify.geo import haversine, load_default_zones
from locverify.harness import World, analyze
from locverify.netgen import generate_network, simulate_measurements
from locverify.propagation import load_default_model
from locverify.schedule import build_schedule


def main(n: int = 400, seed: int = 1) -> None:
    zones = load_default_zones()
    model = load_default_model()
    net = generate_network(n, zones, seed)
    beacon = np.random.default_rng(seed).bytes(32)
    sched = build_schedule(beacon, net.keys(), t=50 if n > 100 else n // 4)
    sizes = sched.sizes()
    print(f"{n} nodes; references per node: min {sizes.min()}, median {int(np.median(sizes))}, max {sizes.max()}")

    ms = simulate_measurements(net, sched, model, seed)
    print(f"{len(ms.pairs)} measured pairs, median symmetric RTT {np.median(ms.symmetric):.2f} ms")

    an = analyze(World(net, sched, ms), model, zones)
    true = net.true_coords()
    err = haversine(true[:, 0], true[:, 1], an.est[:, 0], an.est[:, 1])
    print(f"localization error: median {np.median(err):.1f} km, 90th percentile {np.percentile(err, 90):.1f} km")
    print(f"zone verification rate: {np.mean(an.verified):.3f}")

    scores = confidence_scores(ms, net.claimed_coords(), model)
    print(f"confidence scores: min {scores.min():.3f}, median {np.median(scores):.3f}")

    worst = int(np.argmax(err))
    d = net.descriptors[worst]
    print(f"worst node {worst}: true {d.true_location.lat:.2f},{d.true_location.lon:.2f} "
          f"estimate {an.est[worst, 0]:.2f},{an.est[worst, 1]:.2f} winner {an.winner[worst]}")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
