"""Command-line entry point: ``stap <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 a checked property failed, 2 bad or missing configuration.
Set STAP_THREADS to cap worker processes and BLAS threads.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("stap")

SUBCOMMANDS = ("train", "bench", "ablate", "gridsearch", "inspect", "gradcheck")


def _threads() -> int:
    raw = os.environ.get("STAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"STAP_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _cap_blas(n: int) -> None:
    # only effective before numpy is first imported
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stap",
        description="Train, benchmark and ablate the spatio-temporal popularity model on synthetic data.",
        epilog="Environment: STAP_THREADS caps worker processes for multi-seed runs (default 1).")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value config file; defaults when omitted")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("train", parents=[common], help="train one model and write its log, metrics and figures")
    b = sub.add_parser("bench", parents=[common], help="wall-time scaling of the kernels")
    b.add_argument("--kernel", action="append", metavar="NAME",
                   help="kernel to time (repeatable); all when omitted")
    b.add_argument("--sizes", metavar="CSVLIST", help="comma-separated sizes, e.g. 256,512,1024,2048")
    a = sub.add_parser("ablate", parents=[common], help="multi-seed comparison of a variant against the full model")
    a.add_argument("--variant", default="all", metavar="NAME",
                   help="variant to compare with full, or 'all' (default)")
    g = sub.add_parser("gridsearch", parents=[common], help="one model per memory-bank shape")
    g.add_argument("--sizes", metavar="CSVLIST", help="P values; C values come from the config")
    i = sub.add_parser("inspect", parents=[common], help="export frame scores and slot activations")
    i.add_argument("--checkpoint", metavar="PATH", help="model saved by train; trains afresh when omitted")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every kernel")
    return p


def _csv_ints(raw: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise SystemExit(f"{flag} expects comma-separated integers, got {raw!r}") from None


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg_text: str, seed: int, files, volatile=()) -> Path:
    """Config echo, seed and checksums. Files listed in ``volatile`` hold wall
    times, so they are named without a checksum."""
    man = {
        "command": command,
        "seed": seed,
        "config": cfg_text.splitlines(),
        "artifacts": {str(Path(f).relative_to(out)): sha256(Path(f)) for f in sorted(map(str, files))},
        "timing_artifacts": sorted(str(Path(f).relative_to(out)) for f in volatile),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def _write_metrics(path: Path, m, seed: int) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["MAE", "nMSE", "SRC", "n"])
        w.writerow([repr(m.MAE), repr(m.nMSE), repr(m.SRC), m.n])
    return path


# ---------------------------------------------------------------------------

def cmd_train(cfg, out: Path, args):
    from . import harness, plots, synthdata
    corpus = synthdata.generate_corpus(cfg.synth)
    res = harness.train_model(corpus, cfg.model, cfg.run.epochs, cfg.run.batch_size, cfg.seed)
    files = [harness.write_log_csv(res.log_rows, out / "training_log.csv", cfg.seed)]
    _, m = harness.evaluate(res.model, corpus)
    files.append(_write_metrics(out / "metrics.csv", m, cfg.seed))
    res.model.save(out / "model.stap")
    files.append(out / "model.stap")
    files.extend(harness.export_diagnostics(res.model, corpus, out, cfg.seed).values())
    files.append(plots.training_curves(res.log_rows, out / "training_curves.png"))
    files.append(plots.frame_score_curves(
        harness.frame_score_table(res.model, corpus, corpus.test_idx[:4]), out / "frame_scores.png"))
    if res.slot_history:
        from .spatial_memory import slot_statistics
        files.append(plots.slot_heatmap(slot_statistics(res.slot_history[-1]).mass, out / "slot_heatmap.png"))
    print(f"test MAE {m.MAE:.4f}  nMSE {m.nMSE:.4f}  SRC {m.SRC:.4f}  (n={m.n})")
    return 0, files, []


def cmd_bench(cfg, out: Path, args):
    from . import harness, plots
    kernels = args.kernel or list(harness.BENCH_KERNELS)
    bad = [k for k in kernels if k not in harness.BENCH_KERNELS]
    if bad:
        raise SystemExit(f"unknown kernel {bad[0]!r}; expected one of {', '.join(harness.BENCH_KERNELS)}")
    sizes = _csv_ints(args.sizes, "--sizes") if args.sizes else None
    reports, failed = [], False
    for k in kernels:
        rep = harness.bench_isolated(k, sizes, trials=cfg.run.bench_trials, seed=cfg.seed)
        ok, line = harness.scaling_check(rep)
        if rep.unstable:
            line += " [unstable]"
        print(line)
        failed |= ok is False
        reports.append(rep)
    stable = [harness.write_scaling_outputs_csv(reports, out / "scaling_outputs.csv", cfg.seed)]
    volatile = [harness.write_scaling_csv(reports, out / "scaling.csv", cfg.seed),
                plots.scaling_plot(reports, out / "scaling.png")]
    return (1 if failed else 0), stable, volatile


def _ablate_one(args_tuple):
    from . import harness
    variant, seed, model_cfg, synth_cfg, epochs, batch_size = args_tuple
    from dataclasses import replace
    return harness.run_ablation(variant, model_cfg, seed, replace(synth_cfg, seed=seed), epochs, batch_size)


def cmd_ablate(cfg, out: Path, args):
    from . import harness, plots
    if args.variant == "all":
        variants = [v for v in harness.VARIANTS if v != "full"]
    elif args.variant in harness.VARIANTS:
        variants = [args.variant] if args.variant != "full" else []
    else:
        print(f"unknown variant {args.variant!r}; expected one of {', '.join(harness.VARIANTS)} or all",
              file=sys.stderr)
        return 2, [], []
    seeds = [cfg.seed + k for k in range(cfg.run.ablation_seeds)]
    jobs = [(v, s, cfg.model, cfg.synth, cfg.run.ablation_epochs, cfg.run.batch_size)
            for v in ["full"] + variants for s in seeds]
    results = harness.run_seeds(_ablate_one, jobs, _threads())
    by = {v: [r for r in results if r.variant == v] for v in ["full"] + variants}
    checks = [harness.check_alignment(by["full"])]
    checks += [harness.PAIRED_CHECKS[v](by["full"], by[v]) for v in variants if v in harness.PAIRED_CHECKS]
    for c in checks:
        print(c.line())
    files = [harness.write_ablation_csv(results, out / "ablation.csv", cfg.seed),
             plots.ablation_bars(results, out / "ablation_mae.png")]
    with open(out / "checks.csv", "w", newline="") as fh:
        fh.write(f"# seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(["check", "wins", "trials", "required", "passed"])
        for c in checks:
            w.writerow([c.name, c.wins, c.trials, c.required, int(c.passed)])
    files.append(out / "checks.csv")
    return (0 if all(c.passed for c in checks) else 1), files, []


def cmd_gridsearch(cfg, out: Path, args):
    from . import harness, plots, synthdata
    Ps = _csv_ints(args.sizes, "--sizes") if args.sizes else list(cfg.run.grid_P)
    corpus = synthdata.generate_corpus(cfg.synth)
    rows = harness.grid_search(Ps, cfg.run.grid_C, corpus, cfg.model, cfg.seed,
                               cfg.run.grid_epochs, out / "grid.csv")
    for r in rows:
        print(",".join(map(str, r)))
    files = [out / "grid.csv"]
    if any(r[-1] == "ok" for r in rows):
        files += [plots.grid_heatmap(rows, out / f"grid_{m}.png", m) for m in ("MAE", "nMSE", "SRC")]
    return 0, files, []


def cmd_inspect(cfg, out: Path, args):
    from . import harness, plots, predictor, synthdata
    from .spatial_memory import slot_statistics
    corpus = synthdata.generate_corpus(cfg.synth)
    if args.checkpoint:
        model = predictor.PopularityModel(cfg.model, seed=cfg.seed)
        try:
            model.load(args.checkpoint)
        except OSError as exc:
            print(f"cannot read checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
            return 2, [], []
    else:
        model = harness.train_model(corpus, cfg.model, cfg.run.epochs, cfg.run.batch_size, cfg.seed).model
    paths = harness.export_diagnostics(model, corpus, out, cfg.seed)
    files = list(paths.values())
    files.append(plots.frame_score_curves(
        harness.frame_score_table(model, corpus, corpus.test_idx[:4]), out / "frame_scores.png"))
    hi, bg = harness.highlight_alignment(model, corpus, corpus.test_idx)
    print(f"mean frame score: highlights {hi:.5f}  background {bg:.5f}")
    if cfg.model.use_memory:
        st = slot_statistics(harness.routing_activations(model, corpus, corpus.test_idx))
        files.append(plots.slot_heatmap(st.mass, out / "slot_heatmap.png"))
        print(f"slots: entropy {st.entropy:.4f}  gini {st.gini:.4f}  top-{st.top_k} share {st.top_share:.4f}")
    return 0, files, []


def cmd_gradcheck(cfg, out: Path, args):
    from . import gradsuite
    res = gradsuite.run_suite(seed=cfg.seed)
    path = out / "gradcheck.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(["kernel", "max_rel_error", "probes", "passed"])
        for r in res.reports:
            print(r)
            w.writerow([r.kernel, repr(r.max_rel_error), r.probes, int(r.passed)])
    return (0 if res.passed else 1), [path], []


COMMANDS = {"train": cmd_train, "bench": cmd_bench, "ablate": cmd_ablate,
            "gridsearch": cmd_gridsearch, "inspect": cmd_inspect, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _cap_blas(_threads())
    from . import config as config_mod
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.default()
    except config_mod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    text = config_mod.echo(cfg)
    log.info("effective configuration:\n%s", text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    code, files, volatile = COMMANDS[args.command](cfg, out, args)
    if code != 2:
        write_manifest(out, args.command, text, cfg.seed, files, volatile)
    return code


if __name__ == "__main__":
    sys.exit(main())
