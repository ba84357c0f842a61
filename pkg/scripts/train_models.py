"""Train (or load from cache) every network used by the benchmarks and print the loss histories."""
import argparse
import logging

from regpose.experiments import ExperimentConfig, histories, train_models


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", default=None, help="cache root (default $REGPOSE_CACHE or ./.regpose_cache)")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    models = train_models(ExperimentConfig(seed=args.seed), args.cache)
    print(f"models in {models.directory}")
    for name, hist in histories(models).items():
        last = hist[-1]
        print(f"{name:16s} epochs {len(hist):3d}  final loss {last.mean_loss:.4f}  "
              f"train geodesic {last.mean_geodesic_deg:.2f} deg")


if __name__ == "__main__":
    main()
