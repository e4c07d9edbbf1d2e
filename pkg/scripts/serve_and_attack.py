"""Serve the victim over the wire protocol and attack it through a socket client."""

import argparse

from leba import harness as H
from leba import nets
from leba import oracle as O


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", default="data/desk")
    ap.add_argument("--models", default="models")
    ap.add_argument("--variant", default="leba_train")
    ap.add_argument("--limit", type=int, default=20)
    args = ap.parse_args()

    victim = nets.load_any(f"{args.models}/victim.w")
    oracle = O.local_oracle(victim)
    server = O.serve(oracle)
    try:
        cfg = H.ExperimentConfig(
            dataset=args.dataset,
            victim=f"{args.models}/victim.w",
            surrogate=f"{args.models}/surrogate.w",
            variant=args.variant,
            limit=args.limit,
            endpoint=server.endpoint,
        )
        result = H.run_experiment(cfg)
    finally:
        server.shutdown()
        server.server_close()
    print(H.rows_to_csv(result.rows), end="")
    print(f"server counter: {oracle.used}, attack total: {sum(log.queries for log in result.logs)}")


if __name__ == "__main__":
    main()
