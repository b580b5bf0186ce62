"""Write a synthetic traffic-sign dataset plus a matching mock script.

    python3 scripts/make_synthetic.py out/syn --classes 10 --images 40 --seed 1
"""

from __future__ import annotations

import argparse

from tsrlmm.synthetic import make_synthetic_dataset


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--images", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--precropped", action="store_true", help="write crops only, no road images")
    args = ap.parse_args(argv)
    ds = make_synthetic_dataset(args.out_dir, args.classes, args.images, args.seed, args.precropped)
    for label, path in [
        ("catalog", ds.catalog_path),
        ("groups", ds.groups_path),
        ("manifest", ds.manifest_path),
        ("mock script", ds.mock_script_path),
    ]:
        print(f"{label:12s} {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
