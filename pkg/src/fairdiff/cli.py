"""Command-line front end.

Exit codes: 0 success, 2 spec error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, hspace, metrics
from .diffcore import sample_batch
from .guidance import run_guided_generation
from .harness import SpecError, StageError, build_pipeline, load_spec, write_table
from .numkit import CheckpointError, RngStream, derive_seed, save_mlp
from .synthdata import export_dataset, sample_dataset, save_mixture


def _seed_list(text: str | None):
    if text is None:
        return None
    return [int(s) for s in text.replace(",", " ").split()]


def _float_list(text: str | None):
    if text is None:
        return None
    return [float(s) for s in text.replace(",", " ").split()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", type=Path, default=None, help="JSON experiment spec (defaults apply)")
    p.add_argument("--seed", type=str, default=None, help="seed list, e.g. 1,2,3")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for (config, seed) cells")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fairdiff",
                                 description="attribute-controlled diffusion sampling lab")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("world", "write the world spec and a labeled dataset export"),
        ("train-denoiser", "train the denoiser and write its checkpoint"),
        ("invert", "build and store the h-space datasets"),
        ("train-banks", "train per-step attribute heads and accuracy tables"),
        ("sample", "run one generation and write samples plus diagnostics"),
        ("evaluate", "score a samples file against the spec reference"),
        ("pipeline", "full strategy-comparison experiment"),
        ("ablate-gamma", "guidance-strength sweep"),
        ("ablate-batch", "batch-size sweep"),
        ("multi", "two-attribute balancing, marginal and subgroup modes"),
        ("downstream", "imbalanced-task rebalancing experiment"),
        ("data-efficiency", "classifier accuracy versus training-set size"),
        ("plot", "SVG line chart from a result table"),
    ]:
        p = sub.add_parser(name, help=desc)
        if name != "plot":
            _add_common(p)
    sub.choices["world"].add_argument("--export", type=int, default=1000,
                                      help="dataset rows to export")
    sub.choices["sample"].add_argument("--strategy", default="distribution",
                                       choices=["none", "distribution", "sample",
                                                "universal", "latent-edit"])
    sub.choices["sample"].add_argument("--trace", action="store_true",
                                       help="dump the per-step h record")
    sub.choices["evaluate"].add_argument("--samples", type=Path, required=True)
    sub.choices["ablate-gamma"].add_argument("--gammas", type=str, default=None)
    sub.choices["ablate-batch"].add_argument("--sizes", type=str, default=None)
    sub.choices["data-efficiency"].add_argument("--sizes", type=str, default=None)
    for flag, kw in [("--table", dict(type=Path, required=True)),
                     ("--x", dict(default="gamma")), ("--y", dict(default="fd")),
                     ("--group", dict(default="strategy")),
                     ("--out", dict(type=Path, default=Path("plot.svg")))]:
        sub.choices["plot"].add_argument(flag, **kw)
    return ap


def _cmd_world(spec, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = harness.build_world(spec)
    save_mixture(world, out / "world.json")
    rng = RngStream(derive_seed(int(spec["data"]["seed"]), "export"))
    export_dataset(sample_dataset(world, args.export, rng), out / "dataset.csv")
    print(f"world spec -> {out / 'world.json'}; {args.export} rows -> {out / 'dataset.csv'}")
    return 0


def _cmd_sample(spec, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipe = build_pipeline(spec, out)
    run = spec["run"]
    seed = int(spec["seeds"][0])
    n = int(run["n_samples"])
    if args.strategy == "none":
        srun = sample_batch(n, pipe.sched, pipe.net, RngStream(seed), record_h=args.trace)
        diag = []
    else:
        cfg = harness.make_guidance_config(pipe, args.strategy, float(run["gamma"]),
                                           int(run["batch_size"]), run["attribute"],
                                           run["reference"], derive_seed(seed, "quota"))
        srun, diag = run_guided_generation(cfg, pipe.sched, pipe.net, RngStream(seed),
                                           n, record_h=args.trace)
    np.savetxt(out / "samples.csv", srun.samples, delimiter=",",
               header=",".join(f"x_{i+1}" for i in range(srun.samples.shape[1])), comments="")
    manifest = {
        "seed": seed, "n_samples": n, "strategy": args.strategy,
        "schedule": spec["schedule"], "gamma": float(run["gamma"]),
        "batch_size": int(run["batch_size"]), "attribute": run["attribute"],
        "reference": run["reference"],
        "checkpoint": str(out / "denoiser.json"),
    }
    save_mlp(pipe.net, out / "denoiser.json")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    with open(out / "diagnostics.jsonl", "w") as fh:
        for d in diag:
            fh.write(json.dumps(dataclasses.asdict(d)) + "\n")
    if args.trace and srun.h_trace is not None:
        np.savez_compressed(out / "htrace.npz", steps=srun.steps, h=srun.h_trace)
    print(f"{n} samples -> {out / 'samples.csv'}")
    return 0


def _cmd_evaluate(spec, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipe = build_pipeline(spec, out)
    samples = np.loadtxt(args.samples, delimiter=",", skiprows=1)
    run = spec["run"]
    seed = int(spec["seeds"][0])
    row = harness.evaluate_samples(pipe, np.atleast_2d(samples), run["attribute"],
                                   run["reference"], seed, int(run["n_quality_reference"]))
    rows = [{"run_id": harness.spec_hash(spec)[:16], "metric": k, "value": v,
             "n": row["n"], "seed": seed} for k, v in row.items() if k != "n"]
    write_table(rows, out / "tables" / "evaluate.csv")
    for r in rows:
        print(f"{r['metric']}: {r['value']}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            harness.cmd_plot(args.table, args.x, args.y, args.group or None, args.out)
            print(f"chart -> {args.out}")
            return 0
        spec = load_spec(args.spec, _seed_list(args.seed))
        out = Path(args.out)
        if args.command == "world":
            return _cmd_world(spec, args)
        if args.command == "train-denoiser":
            pipe = build_pipeline(spec, out)
            save_mlp(pipe.net, out / "denoiser.json")
            print(f"denoiser checkpoint -> {out / 'denoiser.json'}")
            return 0
        if args.command == "invert":
            pipe = build_pipeline(spec, out)
            print(f"h-datasets cached for: {', '.join(pipe.hdatasets)}")
            return 0
        if args.command == "train-banks":
            pipe = build_pipeline(spec, out)
            for attr, bank in pipe.banks.items():
                hspace.save_bank(bank, out / f"bank-{attr}.json")
                hspace.export_accuracy_table(pipe.accuracy[attr], out / f"accuracy-{attr}.csv")
            print(f"banks -> {out}")
            return 0
        if args.command == "sample":
            return _cmd_sample(spec, args)
        if args.command == "evaluate":
            return _cmd_evaluate(spec, args)
        if args.command == "pipeline":
            rec = harness.cmd_pipeline(spec, out, jobs=args.jobs)
        elif args.command == "ablate-gamma":
            rec = harness.cmd_ablate_gamma(spec, out, _float_list(args.gammas), jobs=args.jobs)
        elif args.command == "ablate-batch":
            rec = harness.cmd_ablate_batch(spec, out, _seed_list(args.sizes), jobs=args.jobs)
        elif args.command == "multi":
            rec = harness.cmd_multi_attribute(spec, out, jobs=args.jobs)
        elif args.command == "downstream":
            rec = harness.cmd_downstream(spec, out, jobs=args.jobs)
        elif args.command == "data-efficiency":
            rec = harness.cmd_data_efficiency(spec, out, _seed_list(getattr(args, "sizes", None)),
                                              jobs=args.jobs)
        else:
            raise SpecError(f"unknown command {args.command!r}")
        print(f"run {rec.run_id}: {len(rec.rows)} rows in {rec.wall_clock_s:.1f}s -> {out / 'tables'}")
        return 0
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return 2
    except (StageError, CheckpointError, metrics.EvaluatorAccuracyError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
