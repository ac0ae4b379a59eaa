"""Train and evaluate the whole pipeline on the easy synthetic setting.

    python scripts/run_easy_chain.py --out results/easy
"""
import argparse
import json
import logging
from pathlib import Path

from storycut.evaluation import report_csv
from storycut.experiments import ChainConfig, run_chain


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results/easy")
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    res = run_chain(ChainConfig())
    report_csv(res.report, out / "report.csv")
    (out / "timings.json").write_text(json.dumps(res.timings, indent=1) + "\n")
    for a, v in sorted(res.report.ap_at.items()):
        print(f"AP@{a:.2f}  {v:.4f}")
    print(f"average mAP  {res.report.average_map:.4f}")
    print("seconds     ", {k: round(v, 1) for k, v in res.timings.items()})


if __name__ == "__main__":
    main()
