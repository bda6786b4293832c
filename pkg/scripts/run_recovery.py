"""Loading recovery, TPR and prediction error over the noise/heterogeneity grid.

    python3 scripts/run_recovery.py --n 1000 --p 2000 --q 25 --replicates 50 --out recovery.csv
"""

import argparse

import numpy as np

from po2pls.model import RankSpec
from po2pls.simulation import ScenarioConfig, run_accuracy_study, write_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--p", type=int, default=200)
    ap.add_argument("--q", type=int, default=25)
    ap.add_argument("--rank", type=int, default=2, help="r = r_x = r_y")
    ap.add_argument("--noise", type=float, nargs=2, default=[0.4, 0.4], metavar=("X", "Y"))
    ap.add_argument("--heterogeneity", type=float, nargs="+", default=[0.0, 0.4, 0.8])
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--n-jobs", type=int, default=None)
    ap.add_argument("--out", default="recovery.csv")
    a = ap.parse_args()

    rows = []
    k = a.rank
    for i, eta in enumerate(a.heterogeneity):
        cfg = ScenarioConfig(
            n_train=a.n, n_test=1000, ranks=RankSpec(a.p, a.q, k, k, k), noise_x=a.noise[0], noise_y=a.noise[1],
            heterogeneity=eta, replicates=a.replicates, seed=a.seed + i,
        )
        part = run_accuracy_study(cfg, n_jobs=a.n_jobs)
        rows.extend(part)
        med = {m: np.median([r["value"] for r in part if r["metric"] == m]) for m in ("tpr_W", "rmsep_test", "rmsep_test_oracle")}
        print(f"heterogeneity {eta:.1f}: median TPR(W) {med['tpr_W']:.3f}, test RMSEP {med['rmsep_test']:.4f} (true parameters {med['rmsep_test_oracle']:.4f})")
    write_rows(rows, a.out)


if __name__ == "__main__":
    main()
