"""Run the cipher-task comparison for several seeds and write one JSON record per seed.

    python3 scripts/run_cipher_experiment.py --seeds 0 1 2 --out results/cipher.jsonl
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from rsl_lab.experiment import CipherExperimentConfig, run_cipher_seed
from rsl_lab.models import L2R


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("results/cipher.jsonl"))
    ap.add_argument("--bt", action="store_true", help="also run the back-translation baseline on L2R models")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = CipherExperimentConfig(bt_directions=(L2R,) if args.bt else ())
    args.out.parent.mkdir(parents=True, exist_ok=True)
    results = []
    with open(args.out, "w", encoding="utf-8") as fh:
        for seed in args.seeds:
            r = run_cipher_seed(seed, cfg)
            results.append(r)
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            line = (f"seed {seed}: basic {r.mean('basic'):.2f}  rsl {r.mean('rsl'):.2f}  "
                    f"st1 {r.mean('st_top1'):.2f}  st3 {r.mean('st_top3'):.2f}  ens {r.ensemble_l2r:.2f}  "
                    f"div cross {r.cross_arch_diversity:.2f} same {r.same_arch_diversity:.2f}")
            if r.bt:
                line += f"  bt {r.mean('bt'):.2f}"
            print(line + f"  ({r.seconds['total'] / 60:.1f} min)", flush=True)

    rsl_wins = sum(r.mean("rsl") >= r.mean("basic") + 1.0 and r.mean("rsl") >= r.mean("st_top1") for r in results)
    div_wins = sum(r.cross_arch_diversity < r.same_arch_diversity for r in results)
    top3_wins = sum(r.mean("st_top3") <= r.mean("st_top1") for r in results)
    ens_gap = min(r.ensemble_l2r - max(v for k, v in r.basic.items() if "-L2R-" in k) for r in results)
    print(f"RSL >= basic+1 and >= ST: {rsl_wins}/{len(results)} seeds")
    print(f"cross-arch < same-arch diversity: {div_wins}/{len(results)} seeds")
    print(f"ST top-3 <= top-1: {top3_wins}/{len(results)} seeds")
    print(f"worst ensemble minus best L2R: {ens_gap:.2f}")
    print(f"mean RSL gain over basic: {np.mean([r.mean('rsl') - r.mean('basic') for r in results]):.2f} BLEU")


if __name__ == "__main__":
    main()
