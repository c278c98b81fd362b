"""Regenerate the bundled 60-subject toy dataset in ``src/gpaft/toy``."""

import json
from pathlib import Path

import numpy as np
import pandas as pd

from gpaft.simulate import SimConfig, replication_rng, simulate_dataset

OUT = Path(__file__).resolve().parents[1] / "src" / "gpaft" / "toy"


def main(seed=12):
    # milder censoring than the study default keeps the demo fit quick
    cfg = SimConfig(n=60, p=200, train_size=48, test_size=12, seed=seed,
                    censor_quantiles=(0.6, 0.8, 0.9, 0.95))
    sim = simulate_dataset(cfg, replication_rng(seed, 0))
    ids = [f"P{i + 1:03d}" for i in range(cfg.n)]
    genes = [f"G{j + 1:04d}" for j in range(cfg.p)]
    OUT.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"id": ids, "time": np.round(sim.Y, 4), "status": sim.delta}).to_csv(
        OUT / "survival.csv", index=False)
    stage = np.array(["I", "II", "III", "IV"])[sim.stage]
    pd.DataFrame({"id": ids, "stage": stage, "age_days": np.round(sim.Z[:, 4], 1)}).to_csv(
        OUT / "covariates.csv", index=False)
    X = pd.DataFrame(np.round(sim.X, 5), columns=genes)
    X.insert(0, "id", ids)
    X.to_csv(OUT / "expression.csv", index=False)
    # the generator's gene sets are larger than p=200 allows to be disjoint;
    # ship small disjoint sets instead
    sets = [genes[a:a + 25] for a in range(0, 150, 25)]
    (OUT / "pathways.json").write_text(json.dumps(
        [{"name": f"set{k + 1}", "genes": g} for k, g in enumerate(sets)], indent=1) + "\n")
    pd.DataFrame({"id": ids, "time": np.round(sim.times, 4), "status": 1}).to_csv(
        OUT / "truth.csv", index=False)
    print(f"wrote toy data to {OUT} (censored fraction {1 - sim.delta.mean():.2f})")


if __name__ == "__main__":
    main()
