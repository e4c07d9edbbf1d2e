"""Run the desk benchmark: every variant, the HOGA ablations, transfer and defenses.

Each campaign writes a report directory under --out; a summary table is printed at the end.
"""

import argparse
import logging
from pathlib import Path

from leba import harness as H
from leba import nets

CAMPAIGNS = {
    "simba": dict(variant="simba"),
    "simba_plus": dict(variant="simba_plus"),
    "simba_pp": dict(variant="simba_pp"),
    "leba_train": dict(variant="leba_train"),
    "ablation_bl_only": dict(variant="leba_train", forward_loss=False),
    "ablation_fl_only": dict(variant="leba_train", backward_loss=False),
    "ablation_fixed_gamma": dict(variant="leba_train", adaptive_gamma=False),
    "quantize16_simba_plus": dict(variant="simba_plus", defense="quantize:16"),
    "quantize16_leba_train": dict(variant="leba_train", defense="quantize:16"),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", default="data/desk")
    ap.add_argument("--models", default="models")
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--limit", type=int, default=200)
    ap.add_argument("--only", nargs="*", help="subset of campaign names")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    models, out = Path(args.models), Path(args.out)
    base = H.ExperimentConfig(
        dataset=args.dataset,
        victim=str(models / "victim.w"),
        surrogate=str(models / "surrogate.w"),
        limit=args.limit,
        repeats=args.repeats,
    )
    campaigns = dict(CAMPAIGNS)
    campaigns["robust_simba_plus"] = dict(variant="simba_plus", victim=str(models / "robust.w"))
    campaigns["robust_leba_train"] = dict(variant="leba_train", victim=str(models / "robust.w"))

    summary = []
    for name, kw in campaigns.items():
        if args.only and name not in args.only:
            continue
        result = H.run_and_report(base.replace(output=str(out / name), **kw))
        summary.append((name, H.mean_over_seeds(result.rows)))
        if name == "leba_train":
            # transfer: learned weights on the next, disjoint slice of the test split
            for r, model in result.surrogates.items():
                path = out / name / f"surrogate_r{r}.w"
                nets.save_weights(model, path)
                cfg = base.replace(
                    variant="leba_test", surrogate=str(path), skip=args.limit, seed=r, repeats=1, output=str(out / f"transfer_seed{r}")
                )
                summary.append((f"transfer_seed{r}", H.mean_over_seeds(H.run_and_report(cfg).rows)))
            cfg = base.replace(variant="simba_pp", skip=args.limit, output=str(out / "transfer_simba_pp"))
            summary.append(("transfer_simba_pp", H.mean_over_seeds(H.run_and_report(cfg).rows)))

    print(f"{'campaign':<24} {'ASR':>7} {'AVG.Q':>9} {'AVG.Q_':>9}")
    for name, row in summary:
        print(f"{name:<24} {row.asr:>7.4f} {row.avg_q:>9.2f} {row.avg_q_prime:>9.2f}")


if __name__ == "__main__":
    main()
