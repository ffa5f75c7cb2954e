"""Train the micro model on synthetic digit strings and report held-out accuracy.

    python3 scripts/run_toy.py [--epochs N] [--budget SECONDS] [--json out.json]
"""

import argparse
import dataclasses
import json
import logging
import sys

from master_str.toy import ToyRunConfig, run_toy


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--budget", type=float, default=None, help="wall-clock seconds")
    ap.add_argument("--json", default=None, help="write the per-epoch history here")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    cfg = ToyRunConfig()
    if args.epochs is not None:
        cfg.max_epochs = args.epochs
    if args.budget is not None:
        cfg.time_budget = args.budget
    print("epoch\tloss\ttoken_acc\theld_out_seq_acc\tseconds", flush=True)
    res = run_toy(cfg, report=lambda m, acc: print(
        f"{m.epoch}\t{m.loss:.4f}\t{m.token_acc:.4f}\t{acc:.4f}\t{m.seconds:.1f}", flush=True))
    print(f"held-out accuracy {res.test_accuracy:.3f} in {res.seconds:.0f}s")
    if args.json:
        rows = [dict(dataclasses.asdict(m), held_out_seq_acc=acc) for m, acc in res.history]
        with open(args.json, "w") as f:
            json.dump({"test_accuracy": res.test_accuracy, "seconds": res.seconds, "history": rows}, f, indent=2)
    return 0 if res.test_accuracy >= cfg.target_accuracy else 1


if __name__ == "__main__":
    sys.exit(main())
