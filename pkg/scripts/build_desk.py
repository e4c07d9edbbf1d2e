"""Build the desk digits dataset and train the victim, surrogate, plain and robust models."""

import argparse
import json
import logging

from leba import harness


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", default="data/desk")
    ap.add_argument("--models", default="models")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(json.dumps(harness.train_models(args.dataset, args.models, seed=args.seed), indent=2))


if __name__ == "__main__":
    main()
