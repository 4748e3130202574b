"""Command line entry point: ``kgquant {synth,quantize,train,eval,analyze,sweep}``.

Exit codes: 0 success, 1 partial sweep failure, 2 usage or config error,
3 numerical abort during training.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .evaluate import append_results, count_params, evaluate, results_row
from .experiment import ConfigError, ExperimentConfig, load_config, load_graph, run_one
from .kg import TripleParseError, save_tsv, synth_kg
from .model import Scorer, load_checkpoint
from .quantize import (CodeParseError, QuantConfig, Quantization, codes_to_matrix, quantize_all, read_codes,
                       write_codes)
from .trainer import NumericalAbort

log = logging.getLogger("kgquant")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None))
    if getattr(args, "data", None):
        cfg.set("data", "path", args.data)
    if getattr(args, "seeds", None):
        cfg.set("run", "seeds", args.seeds)
    if getattr(args, "variant", None):
        cfg.set("run", "variant", args.variant)
    if getattr(args, "variants", None):
        cfg.set("run", "variants", args.variants)
    if getattr(args, "out", None):
        cfg.set("run", "out", args.out)
    return cfg.validate()


def _write_effective(cfg: ExperimentConfig, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    kg = synth_kg(args.seed, args.entities, args.relations, args.triples, args.skew)
    out = Path(args.out)
    save_tsv(kg, out)
    (out / "manifest.txt").write_text(kg.manifest(), encoding="utf-8")
    print(kg.manifest(), end="")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _config(args)
    kg = load_graph(cfg)
    seed = cfg.seeds[0]
    quant = quantize_all(kg, cfg.quant_config(seed))
    out = Path(args.codes_out or cfg.out / "codes.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_codes(out, quant, cfg.hash(sections=("data", "quant"), exclude=()))
    _write_effective(cfg, out.parent)
    (out.parent / "manifest.txt").write_text(kg.manifest(), encoding="utf-8")
    print(f"wrote {len(quant.codes)} codes (l={quant.l}, m={quant.m}, n={quant.n}) to {out}")
    return EXIT_OK


def _fixed_quant(path, kg):
    codes, meta = read_codes(path)
    if len(codes) != kg.entity_count:
        raise UsageError(f"{path}: {len(codes)} codes for {kg.entity_count} entities")
    return Quantization(codes, meta["m"], meta["n"], QuantConfig())


def cmd_train(args) -> int:
    cfg = _config(args)
    kg = load_graph(cfg)
    out = cfg.out
    _write_effective(cfg, out)
    if args.resume:
        run_dir = Path(args.resume)
        quant = _fixed_quant(run_dir / "codes.txt", kg)
        res = run_one(kg, cfg, cfg.seeds[0], run_dir=run_dir, quant=quant, resume=True)
        append_results(out / "results.csv", [res.row])
        print(res.report.as_text())
        return EXIT_OK
    quant = _fixed_quant(args.codes, kg) if args.codes else None
    rows = []
    for seed in cfg.seeds:
        res = run_one(kg, cfg, seed, run_dir=out / f"seed_{seed}", quant=quant)
        rows.append(res.row)
        append_results(out / "results.csv", [res.row])
        print(f"seed {seed}: {res.report.as_text()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    kg = load_graph(cfg)
    state, header = load_checkpoint(args.checkpoint)
    codes, meta = read_codes(args.codes)
    pool = codes_to_matrix(codes, meta["l"])
    report = evaluate(Scorer(state, pool), kg, args.split or cfg.get("eval", "split"), cfg.cutoffs,
                      count_params(state))
    print(report.as_text())
    if args.results:
        append_results(args.results, [results_row(report, cfg.dataset_name, header.get("variant", ""),
                                                  int(header.get("seed", 0)))])
    return EXIT_OK


def _csv_out(path, header, rows):
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_analyze(args) -> int:
    codes, meta = read_codes(args.codes)
    mode = args.mode
    seed = args.seed
    if mode == "entropy":
        h = analysis.code_entropy(codes, with_weights=args.with_weights)
        dist = analysis.code_distribution(codes)
        _csv_out(args.out, ["entities", "distinct", "entropy_bits", "max_bits"],
                 [[len(codes), dist.distinct, repr(h), repr(float(np.log2(len(codes))))]])
    elif mode == "uniqueness":
        p = analysis.uniqueness_probability(meta["l"], len(codes))
        _csv_out(args.out, ["l", "entities", "probability"], [[meta["l"], len(codes), repr(p)]])
    elif mode == "degrade-sweep":
        fractions = [float(x) for x in args.fractions.split(",")] if args.fractions else \
            [round(0.1 * i, 10) for i in range(11)]
        rows = [[f, repr(h), seed] for f, h in analysis.entropy_sweep(codes, fractions, seed)]
        _csv_out(args.out, ["fraction", "entropy", "seed"], rows)
    elif mode == "jaccard-knn":
        ks = [int(x) for x in args.k.split(",")]
        curve = analysis.knn_jaccard(codes, ks, sample_size=args.sample, seed=seed)
        _csv_out(args.out, ["k", "value", "seed"], [[k, repr(v), seed] for k, v in curve.points])
    return EXIT_OK


def _sweep_cell(cfg_values, variant, seed, run_dir):
    cfg = ExperimentConfig({s: dict(kv) for s, kv in cfg_values.items()})
    kg = load_graph(cfg)
    res = run_one(kg, cfg, seed, variant=variant, run_dir=run_dir)
    return res.row


def _safe_dirname(variant: str) -> str:
    return variant.replace("/", "_").replace("+", "plus_").replace(" ", "_")


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = cfg.out
    _write_effective(cfg, out)
    cells = [(v, s) for v in cfg.variants for s in cfg.seeds]
    results: dict[tuple[str, int], dict | None] = {}

    def run_dir(v, s):
        return out / _safe_dirname(v) / f"seed_{s}"

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {c: pool.submit(_sweep_cell, cfg.values, c[0], c[1], run_dir(*c)) for c in cells}
            for c, fut in futures.items():
                try:
                    results[c] = fut.result()
                except Exception as exc:  # noqa: BLE001 - sweep keeps going
                    log.error("run %s seed %s failed: %s", c[0], c[1], exc)
                    results[c] = None
    else:
        for c in cells:
            try:
                results[c] = _sweep_cell(cfg.values, c[0], c[1], run_dir(*c))
            except Exception as exc:  # noqa: BLE001 - sweep keeps going
                log.error("run %s seed %s failed: %s", c[0], c[1], exc)
                results[c] = None

    rows = [results[c] for c in cells if results[c] is not None]
    if rows:
        append_results(out / "results.csv", rows)
    table = aggregate(cfg.variants, cfg.seeds, results)
    write_table(out, table)
    print((out / "summary.md").read_text(), end="")
    failed = sum(r is None for r in results.values())
    return EXIT_PARTIAL if failed else EXIT_OK


def aggregate(variants, seeds, results) -> list[dict]:
    table = []
    for v in variants:
        rows = [results[(v, s)] for s in seeds if results.get((v, s)) is not None]
        entry = {"variant": v, "runs": len(rows), "complete": len(rows) == len(seeds)}
        if rows:
            entry["MRR"] = float(np.mean([float(r["MRR"]) for r in rows]))
            entry["Hits@10"] = float(np.mean([float(r["Hits@10"]) for r in rows]))
            entry["#P"] = float(np.mean([int(r["#P"]) for r in rows]))
            entry["Effi"] = float(np.mean([float(r["Effi"]) for r in rows]))
        table.append(entry)
    return table


def write_table(out: Path, table):
    cols = ["variant", "runs", "complete", "#P(M)", "MRR", "Hits@10", "Effi"]
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in table:
            w.writerow([e["variant"], e["runs"], e["complete"],
                        *(repr(x) if x is not None else "" for x in (
                            e["#P"] / 1e6 if "#P" in e else None, e.get("MRR"), e.get("Hits@10"), e.get("Effi")))])
    lines = ["| variant | runs | #P(M) | MRR | Hits@10 | Effi |", "|---|---|---|---|---|---|"]
    for e in table:
        mark = "" if e["complete"] else " (incomplete)"
        if "MRR" in e:
            lines.append(f"| {e['variant']}{mark} | {e['runs']} | {e['#P'] / 1e6:.4f} | {e['MRR']:.3f} "
                         f"| {e['Hits@10']:.3f} | {e['Effi']:.3f} |")
        else:
            lines.append(f"| {e['variant']}{mark} | 0 | - | - | - | - |")
    (out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgquant", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--data", help="directory with train.txt/valid.txt/test.txt")
        sp.add_argument("--out", help="output directory")
        if seeds:
            sp.add_argument("--seeds", help="comma separated seed list")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--entities", type=int, default=200)
    s.add_argument("--relations", type=int, default=8)
    s.add_argument("--triples", type=int, default=1500)
    s.add_argument("--skew", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("quantize", help="compute entity codes")
    common(s)
    s.add_argument("--variant")
    s.add_argument("--codes-out", dest="codes_out")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("train", help="train and evaluate one model per seed")
    common(s)
    s.add_argument("--variant")
    s.add_argument("--codes", help="use this code dump instead of quantizing")
    s.add_argument("--resume", help="run directory (seed_N) to continue")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    common(s, seeds=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--codes", required=True)
    s.add_argument("--split", choices=("train", "valid", "test"))
    s.add_argument("--results", help="append a row to this results CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="entropy / uniqueness / degradation / Jaccard analysis of codes")
    s.add_argument("--codes", required=True)
    s.add_argument("--mode", required=True, choices=("entropy", "uniqueness", "degrade-sweep", "jaccard-knn"))
    s.add_argument("--k", default="1,10")
    s.add_argument("--fractions")
    s.add_argument("--sample", type=int, help="sample this many query entities for jaccard-knn")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--with-weights", action="store_true")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="run the variant matrix over all seeds")
    common(s)
    s.add_argument("--variants", help="comma separated variant names")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"kgquant: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, CodeParseError, TripleParseError, FileNotFoundError) as exc:
        print(f"kgquant: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"kgquant: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
