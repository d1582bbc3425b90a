"""RSL test BLEU as a function of the number of monolingual sources.

    python3 scripts/mono_sweep.py --seed 0 --sizes 0 1000 2000 4000
"""
import argparse
import json
from pathlib import Path

from rsl_lab.evaluation import sweep_report
from rsl_lab.experiment import CipherExperimentConfig, mono_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sizes", type=int, nargs="+", default=[0, 1000, 2000, 4000])
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args()

    runs = mono_sweep(args.seed, args.sizes, CipherExperimentConfig())
    text, records = sweep_report(runs)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"sweep_seed{args.seed}.txt").write_text(text, encoding="utf-8")
    with open(args.out / f"sweep_seed{args.seed}.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({**rec, "seed": args.seed}) + "\n")
    print(text, end="")


if __name__ == "__main__":
    main()
