"""Type I error of the asymptotic test under B = 0.

Sweeps sample size (p = 20) and dimension (N = 500) and writes one row per
(setting, component) with the rejection proportion and its exact 95%
binomial interval.

    python3 scripts/run_type1.py --replicates 2000 --out type1.csv
"""

import argparse
import warnings

from po2pls.errors import SigmaHFloorHit
from po2pls.model import RankSpec
from po2pls.simulation import ScenarioConfig, run_type1_study, write_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--replicates", type=int, default=2000)
    ap.add_argument("--sizes", type=int, nargs="+", default=[50, 500, 5000])
    ap.add_argument("--dims", type=int, nargs="+", default=[20, 200, 2000])
    ap.add_argument("--heterogeneity", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--n-jobs", type=int, default=None)
    ap.add_argument("--out", default="type1.csv")
    a = ap.parse_args()

    settings = [(n, 20) for n in a.sizes] + [(500, p) for p in a.dims if p != 20]
    rows = []
    for i, (n, p) in enumerate(settings):
        cfg = ScenarioConfig(
            n_train=n, n_test=1, ranks=RankSpec(p, 5, 2, 1, 0), noise_x=0.5, noise_y=0.5,
            heterogeneity=a.heterogeneity, b_values=(0.0, 0.0), replicates=a.replicates, seed=a.seed + i,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SigmaHFloorHit)
            res = run_type1_study(cfg, n_jobs=a.n_jobs)
        for k, prop in enumerate(res.proportion):
            rows.append(dict(cfg.fields(), component=k + 1, proportion=prop, ci_low=res.ci[k, 0], ci_high=res.ci[k, 1], n=res.n, n_failed=res.n_failed))
        rows.append(dict(cfg.fields(), component="combined", proportion=res.combined, ci_low=res.combined_ci[0], ci_high=res.combined_ci[1], n=res.n, n_failed=res.n_failed))
        print(f"N={n:5d} p={p:5d}: per component {res.proportion.round(4).tolist()}, combined {res.combined:.4f}")
    write_rows(rows, a.out)


if __name__ == "__main__":
    main()
