"""Write configs/<method>.yaml with every default spelled out.

    python3 scripts/make_config_templates.py [--out configs]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import yaml

from sslwb.cli import template
from sslwb.engine.config import METHODS


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "configs"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for method in METHODS:
        path = out / f"{method}.yaml"
        path.write_text(yaml.safe_dump(template(method), sort_keys=False), encoding="utf-8")
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
