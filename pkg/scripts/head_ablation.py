"""Fast-forward versus plain stacked LSTM proposal heads on the hard setting.

Both heads see the same frame scorer, proposals and training samples per
seed; only the inter-layer wiring differs.

    python scripts/head_ablation.py --seeds 5 --layers 3 --out results/ablation.csv
"""
import argparse
from pathlib import Path

import numpy as np

from storycut.experiments import hard_chain, head_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--layers", type=int, default=3)
    ap.add_argument("--out", default="results/ablation.csv")
    args = ap.parse_args()

    rows = ["seed,head,layers,average_map"]
    res = {"ff_lstm": [], "stacked_lstm": []}
    for seed in range(args.seeds):
        r = head_ablation(hard_chain(seed), layers=args.layers)
        for name, v in r.items():
            res[name].append(v)
            rows.append(f"{seed},{name},{args.layers},{v:.6f}")
        print(f"seed {seed}: ff {r['ff_lstm']:.4f}  stacked {r['stacked_lstm']:.4f}", flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")
    for name, vals in res.items():
        print(f"{name:13s} mean average mAP {np.mean(vals):.4f}")


if __name__ == "__main__":
    main()
