import argparse
import json
import sys
from pathlib import Path


def run(fn, description, **defaults):
    """Parse ``--out`` plus keyword overrides, call ``fn`` and write its JSON result."""
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", type=Path)
    for key, val in defaults.items():
        kind = type(val) if not isinstance(val, (tuple, list)) else (lambda s: [int(v) for v in s.split(",")])
        p.add_argument("--" + key.replace("_", "-"), type=kind, default=val)
    args = vars(p.parse_args())
    out = args.pop("out")
    res = fn(**args)
    text = json.dumps(res, indent=2, default=float)
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    else:
        print(text)
    print("PASS" if res["pass"] else "FAIL", res["scenario"], file=sys.stderr)
    return 0 if res["pass"] else 1
