"""Command-line driver: ``rsl-lab <subcommand> --config FILE --out DIR``.

Exit codes: 0 success, 2 usage, 3 config, 4 data format, 5 training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .corpus import (ConfigError, CorpusError, MonolingualCorpus, ParallelCorpus, Vocabulary, generate_task,
                     read_corpus, read_mono, target_mono, write_corpus, write_mono)
from .decoding import DecodeConfig, Ensemble, UnsupportedCombination, beam_search_batch, decode_best
from .evaluation import corpus_bleu, diversity_matrix
from .models import CheckpointError, InputError, init_model, load_checkpoint, save_checkpoint
from .rsl import back_translation, co_em, self_training
from .training import CheckpointMismatch, DivergedTraining, OptimizerState, average_checkpoints, train_model

log = logging.getLogger("rsl_lab")

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4, 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run directory helpers


class Run:
    """Output directory with metrics.jsonl, manifest.json and checkpoints."""

    def __init__(self, out: Path, cfg: ExperimentConfig | None):
        self.out = Path(out)
        self.cfg = cfg
        self.run_id = cfg.digest()[:12] if cfg is not None else "adhoc"
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def data(self) -> Path:
        return self.out / "data"

    def ckpt(self, model_id: int, name: str) -> Path:
        path = self.out / "ckpt" / str(model_id)
        path.mkdir(parents=True, exist_ok=True)
        return path / f"{name}.ckpt"

    def record(self, model_id: int, phase: str, epoch: int, step: int, metric: str, value) -> None:
        rec = {"run_id": self.run_id, "model_id": model_id, "phase": phase, "epoch": epoch,
               "step": step, "metric": metric, "value": value}
        with open(self.out / "metrics.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def manifest(self, phase: str, checkpoints: list, started: float) -> None:
        path = self.out / "manifest.json"
        man = json.loads(path.read_text()) if path.exists() else {}
        man.update({
            "run_id": self.run_id,
            "config_hash": self.cfg.digest() if self.cfg else None,
            "versions": {"rsl_lab": __version__, "numpy": np.__version__, "python": platform.python_version()},
        })
        man.setdefault("phases", {})[phase] = {
            "checkpoints": [str(p) for p in checkpoints],
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        }
        path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def threads() -> int:
    raw = os.environ.get("RSL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RSL_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("RSL_THREADS must be at least 1")
    return n


def split_names():
    return ("train", "valid", "test")


def load_data(run: Run) -> dict:
    d = run.data
    if not (d / "src.vocab").exists():
        raise UsageError(f"no corpus under {d}; run gen-data first")
    sv, tv = Vocabulary.load(d / "src.vocab"), Vocabulary.load(d / "tgt.vocab")
    out = {name: read_corpus((d / f"{name}.src", d / f"{name}.tgt"), sv, tv) for name in split_names()}
    out["mono"] = read_mono(d / "mono.src", sv) if (d / "mono.src").stat().st_size else MonolingualCorpus((), sv)
    out["mono_tgt"] = read_mono(d / "mono.tgt", tv) if (d / "mono.tgt").stat().st_size else MonolingualCorpus((), tv)
    return out


def load_models(run: Run, name: str):
    cfg = run.cfg
    models, opts = [], []
    for mid in range(len(cfg.roster)):
        path = run.ckpt(mid, name)
        if not path.exists():
            raise UsageError(f"missing checkpoint {path}")
        ck = load_checkpoint(path)
        opt = OptimizerState.for_model(ck.model, cfg.train)
        if ck.optimizer:
            opt.step, opt.m, opt.v = ck.optimizer["step"], ck.optimizer["m"], ck.optimizer["v"]
        models.append(ck.model)
        opts.append(opt)
    return models, opts


def summary(rows: list[tuple[str, float]]) -> None:
    width = max(len(r[0]) for r in rows) if rows else 0
    for name, value in rows:
        print(f"{name.ljust(width)}  {value:7.2f}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, run: Run) -> None:
    d = run.data
    if d.exists() and any(d.iterdir()) and not args.force:
        raise UsageError(f"{d} is not empty; pass --force to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    cfg = run.cfg
    task = generate_task(cfg.task)
    n_valid = int(round(len(task.heldout) * cfg.eval.valid_fraction))
    held = task.heldout.pairs
    splits = {"train": task.parallel.pairs, "valid": held[:n_valid], "test": held[n_valid:]}
    for name, pairs in splits.items():
        corpus = ParallelCorpus(tuple(pairs), task.parallel.source_vocab, task.parallel.target_vocab)
        write_corpus(corpus, (d / f"{name}.src", d / f"{name}.tgt"))
    write_mono(task.mono, d / "mono.src")
    write_mono(target_mono(task, cfg.task), d / "mono.tgt")
    task.parallel.source_vocab.save(d / "src.vocab")
    task.parallel.target_vocab.save(d / "tgt.vocab")
    print(f"wrote {len(task.parallel)} train / {n_valid} valid / {len(held) - n_valid} test pairs, "
          f"{len(task.mono)} monolingual sources to {d}")


def cmd_train_basic(args, run: Run) -> None:
    started = time.time()
    cfg, data = run.cfg, load_data(run)
    P = data["train"]
    ids = range(len(cfg.roster)) if args.model is None else [args.model]
    paths, rows = [], []
    for mid in ids:
        entry = cfg.roster[mid]
        model = init_model(cfg.architecture(entry), entry.direction, P.source_vocab, P.target_vocab,
                           seed=entry.seed, model_id=mid)
        tcfg = dataclasses.replace(cfg.train, seed=entry.seed)
        opt = OptimizerState.for_model(model, tcfg)
        ckdir = run.out / "ckpt" / str(mid)
        ckdir.mkdir(parents=True, exist_ok=True)
        try:
            res = train_model(model, P, data["valid"], tcfg, opt, ckdir,
                              lambda r, mid=mid: run.record(mid, "basic", r["epoch"], r["step"], r["metric"], r["value"]),
                              cfg.decode.max_len)
        except DivergedTraining as exc:
            raise DivergedTraining(f"model {mid}: {exc}") from None
        path = run.ckpt(mid, "basic")
        save_checkpoint(path, model, opt.as_dict(), res.epochs, res.best_bleu)
        bleu = corpus_bleu(decode_best(model, data["test"].sources, cfg.decode), data["test"].targets).bleu
        run.record(mid, "basic", res.epochs, opt.step, "test_bleu", bleu)
        paths.append(path)
        rows.append((model.label, bleu))
    run.manifest("basic", paths, started)
    summary(rows)


def _save_models(run: Run, models, opts, name: str, phase: str) -> list:
    paths = []
    for mid, (m, o) in enumerate(zip(models, opts)):
        path = run.ckpt(mid, name)
        save_checkpoint(path, m, o.as_dict())
        paths.append(path)
    return paths


def _test_rows(run: Run, models, data, phase: str) -> list:
    rows = []
    for mid, m in enumerate(models):
        bleu = corpus_bleu(decode_best(m, data["test"].sources, run.cfg.decode), data["test"].targets).bleu
        run.record(mid, phase, 0, 0, "test_bleu", bleu)
        rows.append((m.label, bleu))
    return rows


def cmd_rsl(args, run: Run) -> None:
    started = time.time()
    cfg, data = run.cfg, load_data(run)
    models, opts = load_models(run, args.init)
    mono = data["mono"] if not args.no_mono else MonolingualCorpus((), data["train"].source_vocab)
    rsl_cfg = dataclasses.replace(cfg.rsl, k=len(models))

    def rec(r):
        run.record(r["model_id"], "rsl", r["round"], 0, r["metric"], r["value"])

    dump = run.out / "pseudo" if args.dump_pseudo else None
    if rsl_cfg.rounds:
        co_em(models, data["train"], mono, rsl_cfg, cfg.train, opts, data["valid"], rec, dump, threads())
    paths = _save_models(run, models, opts, "rsl", "rsl")
    run.manifest("rsl", paths, started)
    summary(_test_rows(run, models, data, "rsl"))


def cmd_st(args, run: Run) -> None:
    started = time.time()
    cfg, data = run.cfg, load_data(run)
    models, opts = load_models(run, args.init)
    ids = range(len(models)) if args.model is None else [args.model]
    paths, rows = [], []
    for mid in ids:
        self_training(models[mid], data["train"], data["mono"], cfg.rsl, cfg.train, opts[mid], args.topk,
                      lambda r, mid=mid: run.record(mid, f"st{args.topk}", r["round"], 0, r["metric"], r["value"]))
        path = run.ckpt(mid, f"st{args.topk}")
        save_checkpoint(path, models[mid], opts[mid].as_dict())
        paths.append(path)
        bleu = corpus_bleu(decode_best(models[mid], data["test"].sources, cfg.decode), data["test"].targets).bleu
        run.record(mid, f"st{args.topk}", 0, 0, "test_bleu", bleu)
        rows.append((models[mid].label, bleu))
    run.manifest(f"st{args.topk}", paths, started)
    summary(rows)


def cmd_bt(args, run: Run) -> None:
    started = time.time()
    cfg, data = run.cfg, load_data(run)
    models, opts = load_models(run, args.init)
    ids = range(len(models)) if args.model is None else [args.model]
    swapped = data["train"].swapped()
    swapped_valid = data["valid"].swapped()
    paths, rows = [], []
    for mid in ids:
        fwd = models[mid]
        entry = cfg.roster[mid]
        bwd = init_model(fwd.arch, entry.direction, swapped.source_vocab, swapped.target_vocab,
                         seed=entry.seed + 7919, model_id=mid)
        train_model(bwd, swapped, swapped_valid, dataclasses.replace(cfg.train, seed=entry.seed + 7919),
                    max_len=cfg.decode.max_len)
        _, n = back_translation(fwd, bwd, data["train"], data["mono_tgt"], cfg.rsl, cfg.train, opts[mid])
        run.record(mid, "bt", 0, opts[mid].step, "synthetic_pairs", n)
        path = run.ckpt(mid, "bt")
        save_checkpoint(path, fwd, opts[mid].as_dict())
        paths.append(path)
        bleu = corpus_bleu(decode_best(fwd, data["test"].sources, cfg.decode), data["test"].targets).bleu
        run.record(mid, "bt", 0, 0, "test_bleu", bleu)
        rows.append((fwd.label, bleu))
    run.manifest("bt", paths, started)
    summary(rows)


def _read_text(path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None


def _decode_cfg(args, run: Run | None) -> DecodeConfig:
    base = run.cfg.decode if run and run.cfg else DecodeConfig()
    over = {k: getattr(args, k) for k in ("beam", "alpha", "max_len") if getattr(args, k, None) is not None}
    return dataclasses.replace(base, **over)


def cmd_decode(args, run: Run | None) -> None:
    models = [load_checkpoint(p).model for p in args.ckpt]
    decoder = models[0] if len(models) == 1 else Ensemble(models)
    sv = models[0].source_vocab
    lines = _read_text(args.input)
    xs = []
    for i, line in enumerate(lines):
        if not line.split():
            raise CorpusError(f"{args.input}: empty sentence at line {i + 1}")
        xs.append(sv.encode(line))
    best = [hyps[0] for hyps in beam_search_batch(decoder, xs, _decode_cfg(args, run), n_best=1)]
    text = "".join(models[0].target_vocab.decode(h.tokens) + "\n" for h in best)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.scores:
        Path(args.scores).write_text("".join(f"{h.score:.6f}\n" for h in best), encoding="utf-8")


def cmd_eval(args, run: Run | None) -> None:
    hyp, ref = _read_text(args.hyp), _read_text(args.ref)
    if len(hyp) != len(ref):
        raise CorpusError(f"{len(hyp)} hypothesis lines vs {len(ref)} reference lines")
    ids: dict[str, int] = {}
    enc = lambda line: tuple(ids.setdefault(t, len(ids) + 4) for t in line.split())
    report = corpus_bleu([enc(h) for h in hyp], [enc(r) for r in ref])
    print(f"BLEU {report.bleu:.2f}")
    if run is not None:
        run.record(-1, "eval", 0, 0, "bleu", report.bleu)
        with open(run.out / "bleu.jsonl", "a", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")


def cmd_diversity(args, run: Run | None) -> None:
    models = [load_checkpoint(p).model for p in args.ckpt]
    sv = models[0].source_vocab
    xs = [sv.encode(l) for l in _read_text(args.input)]
    mat = diversity_matrix(models, xs, _decode_cfg(args, run))
    text = mat.to_csv()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_avg_ckpt(args, run: Run | None) -> None:
    ck = average_checkpoints(args.ckpt, args.output)
    print(f"averaged {len(args.ckpt)} checkpoints into {args.output} ({ck.model.label})")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsl-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_cmd(name, func, help_, needs_config=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=needs_config, help="INI experiment config")
        sp.add_argument("--out", required=needs_config, help="run directory")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value")
        sp.set_defaults(func=func, needs_config=needs_config)
        return sp

    sp = run_cmd("gen-data", cmd_gen_data, "generate the synthetic corpus")
    sp.add_argument("--force", action="store_true")
    sp = run_cmd("train-basic", cmd_train_basic, "MLE-train the model roster")
    sp.add_argument("--model", type=int)
    sp = run_cmd("rsl", cmd_rsl, "co-EM reciprocal supervision over the roster")
    sp.add_argument("--init", default="basic", help="checkpoint name to start from")
    sp.add_argument("--no-mono", action="store_true")
    sp.add_argument("--dump-pseudo", action="store_true")
    sp = run_cmd("st", cmd_st, "self-training baseline")
    sp.add_argument("--init", default="basic")
    sp.add_argument("--model", type=int)
    sp.add_argument("--topk", type=int, default=1)
    sp = run_cmd("bt", cmd_bt, "back-translation baseline")
    sp.add_argument("--init", default="basic")
    sp.add_argument("--model", type=int)
    for name, func, help_ in (("decode", cmd_decode, "translate a source file"),
                              ("diversity", cmd_diversity, "pairwise BLEU between models' decodes")):
        sp = run_cmd(name, func, help_, needs_config=False)
        sp.add_argument("--ckpt", nargs="+", required=True)
        sp.add_argument("--input", required=True)
        sp.add_argument("--output")
        sp.add_argument("--beam", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--max-len", dest="max_len", type=int)
        if name == "decode":
            sp.add_argument("--scores", help="side file of normalized scores, one per line")
    sp = run_cmd("eval", cmd_eval, "corpus BLEU of a hypothesis file", needs_config=False)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp = run_cmd("avg-ckpt", cmd_avg_ckpt, "average checkpoints", needs_config=False)
    sp.add_argument("--ckpt", nargs="+", required=True)
    sp.add_argument("--output", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = None
        if args.config is not None:
            if not Path(args.config).is_file():
                raise UsageError(f"config file not found: {args.config}")
            cfg = load_config(args.config, args.set)
            if args.out is None:
                raise UsageError("--out is required with --config")
            run = Run(Path(args.out), cfg)
        elif args.out is not None:
            run = Run(Path(args.out), None)
        args.func(args, run)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, UnsupportedCombination, CheckpointMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, CheckpointError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergedTraining as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
