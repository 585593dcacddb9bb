"""Rebuild the packaged propagation model from its synthetic calibration set.

Usage: python demos/regenerate_default_model.py [out.json]

Without an argument the result is compared against the packaged file and
the script exits non-zero on any difference.
"""

import json
import sys
from importlib import resources

from locverify.propagation import build_default_model


def main(argv: list[str]) -> int:
    model = build_default_model()
    doc = model.to_dict()
    if argv:
        model.save(argv[0])
        print(f"wrote {argv[0]}: v_max={model.v_max:.4f} km/ms, d_half={model.d_half:.4f} km")
        return 0
    shipped = json.loads(resources.files("locverify.data").joinpath("default_model.json").read_text())
    same = json.loads(json.dumps(doc)) == shipped
    print("packaged model is reproducible" if same else "packaged model differs from a fresh build")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
