"""Run the capture-range, correction, slice and generalisation benchmarks with cached networks.

Writes one report.json / report.csv / plot_data.csv per benchmark under --out.
"""
import argparse
import logging
from pathlib import Path

from regpose.eval import (
    contrast_premap, make_bench, map_images, plot_data_csv, prescale, reports_csv, reports_json, run_slice_bench,
    run_volume_bench,
)
from regpose.experiments import ExperimentConfig, train_models
from regpose.phantom import YOUNG_AGE_RANGE


def write(out: Path, name: str, reports) -> None:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(reports_json(reports) + "\n")
    (d / "report.csv").write_text(reports_csv(reports))
    (d / "plot_data.csv").write_text(plot_data_csv(reports))
    for r in reports:
        cells = "  ".join(f"{b.lo:g}-{b.hi:g}: {b.mean:6.1f} ({b.failure_rate:.0%})" for b in r.bins)
        print(f"{name:12s} {r.method:14s} {cells}")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    models = train_models(ExperimentConfig(seed=args.seed))
    nets, seed, jobs = models.nets(), args.seed, args.jobs

    volume = make_bench("volume", seed=seed)
    reports = run_volume_bench(["identity", "Deep", "VVR-GC", "VVR-PAA", "VVR-Deep"], volume, nets=nets, jobs=jobs)
    (l2,) = run_volume_bench(["Deep"], volume, nets=models.nets("l2"))
    l2.method = "Deep-L2"
    write(out, "volume", reports + [l2])
    write(out, "correction", run_volume_bench(["identity", "Correction-Net"], make_bench("correction", seed=seed),
                                              nets=nets))
    write(out, "slice", run_slice_bench(["identity", "Deep", "SVR-GC", "SVR-Deep"], make_bench("slice", seed=seed),
                                        nets=nets, jobs=jobs))
    young = make_bench("volume", seed=seed, age_range=YOUNG_AGE_RANGE)
    inverted = make_bench("volume", seed=seed, contrast="inverted")
    for name, bench, premap, fn in (("young", young, "prescale", prescale),
                                    ("inverted", inverted, "invert", contrast_premap)):
        (raw,) = run_volume_bench(["Deep"], bench, nets=nets)
        (mapped,) = run_volume_bench(["Deep"], map_images(bench, fn, premap), nets=nets)
        raw.method, mapped.method = "Deep-raw", f"Deep-{premap}"
        write(out, name, [raw, mapped])

if __name__ == "__main__":
    main()
