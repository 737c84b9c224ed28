"""Regenerate the committed golden weight file used by the format tests.

    python scripts/make_golden_fixture.py

Writes tests/fixtures/gradcheck_seed0.mscf (the ``gradcheck`` preset built
with seed 0) and prints its SHA-256, which the tests pin.
"""

import hashlib
from pathlib import Path

from mscfnet.network import build, get_preset
from mscfnet.weights import save_weights

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "gradcheck_seed0.mscf"


def main():
    OUT.parent.mkdir(parents=True, exist_ok=True)
    save_weights(build(get_preset("gradcheck"), seed=0), OUT)
    print(OUT, OUT.stat().st_size, "bytes")
    print("sha256", hashlib.sha256(OUT.read_bytes()).hexdigest())


if __name__ == "__main__":
    main()
