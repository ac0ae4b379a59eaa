"""AR-AN of frame-scorer proposals against multi-scale sliding windows.

Writes one CSV row per (setting, seed, method, AN).

    python scripts/compare_proposals.py --seeds 3 --out results/ar_an.csv
"""
import argparse
from pathlib import Path

import numpy as np

from storycut.data_io import SynthConfig
from storycut.evaluation import EvalConfig, ar_an_curve
from storycut.experiments import fit_ban, hard_chain, make_split
from storycut.pipeline import propose, sliding_window_proposals


def curves(chain, an_grid):
    tr_x, tr_a = make_split(chain.train)
    te_x, te_a = make_split(chain.test)
    ban = fit_ban(tr_x, tr_a, chain)
    gt = {a.video_id: a.stories for a in te_a}
    cfg = EvalConfig(an_grid=an_grid)
    ban_props = {a.video_id: propose(ban, x, chain.pipeline) for x, a in zip(te_x, te_a)}
    sw_props = {a.video_id: sliding_window_proposals(a.num_frames) for a in te_a}
    return {"frame_scorer": ar_an_curve(ban_props, gt, cfg), "sliding_window": ar_an_curve(sw_props, gt, cfg)}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--an", default="1,2,5,10,20,50,100")
    ap.add_argument("--out", default="results/ar_an.csv")
    args = ap.parse_args()
    an_grid = tuple(int(a) for a in args.an.split(","))

    rows = ["setting,seed,method,an,average_recall"]
    at10 = {"frame_scorer": [], "sliding_window": []}
    for seed in range(args.seeds):
        chain = hard_chain(seed)
        for method, curve in curves(chain, an_grid).items():
            for an, ar in curve:
                rows.append(f"hard,{seed},{method},{an},{ar:.6f}")
                if an == 10:
                    at10[method].append(ar)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")
    for method, vals in at10.items():
        if vals:
            print(f"{method:15s} AR@10 {np.mean(vals):.4f}  per seed {np.round(vals, 4).tolist()}")


if __name__ == "__main__":
    main()
