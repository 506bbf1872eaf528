import argparse
import json
import sys


def parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the result as JSON here")
    return p


def emit(result, path=None):
    text = json.dumps(result, indent=2, sort_keys=True, default=float)
    print(text)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    sys.stdout.flush()
