"""Write tests/fixtures/schedule_vectors.json using only hashlib.

This deliberately does not import locverify: the vectors serve as an
independent reference for the reference-selection walk.
"""

import hashlib
import json
from pathlib import Path


def sha3(b: bytes) -> bytes:
    return hashlib.sha3_256(b).digest()


def walk(h: bytes, me: int, n: int, t: int) -> list[int]:
    picked, y = [], h
    while len(picked) < t:
        r = int.from_bytes(y, "big") % n
        if r != me and r not in picked:
            picked.append(r)
        y = sha3(y)
    return picked


def main() -> None:
    beacon = b"epoch-0001-beacon"
    n, t = 10, 3
    keys = sorted(sha3(f"toy-key-{k}".encode()) for k in range(n))
    hashes = [sha3(beacon + k) for k in keys]
    initial = [walk(h, i, n, t) for i, h in enumerate(hashes)]
    full = [set(s) for s in initial]
    for i, s in enumerate(initial):
        for j in s:
            full[j].add(i)
    doc = {
        "hash": "sha3_256",
        "chain_input": "raw 32-byte digest",
        "index_rule": "int.from_bytes(y, 'big') % n",
        "beacon_hex": beacon.hex(),
        "n": n,
        "t": t,
        "keys_hex": [k.hex() for k in keys],
        "node_hashes_hex": [h.hex() for h in hashes],
        "initial": initial,
        "references": [sorted(s) for s in full],
    }
    out = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "schedule_vectors.json"
    out.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
