"""Experiment orchestration: versioned spec files, content-addressed stage
caching, the standard experiment commands (pipeline, ablations,
multi-attribute balancing, downstream rebalancing, classifier data
efficiency), and delimited-text result tables.

Every metric row carries (strategy, gamma, batch size, seed); tables are
byte-reproducible for a fixed spec and seed list.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import diffcore, guidance, hspace, metrics, numkit, synthdata
from .diffcore import DenoiserTrainConfig, NoiseSchedule, make_schedule, sample_batch
from .guidance import GuidanceConfig, compute_edit_directions, run_guided_generation
from .hspace import HBankTrainConfig, HClassifierBank, build_hdataset, joint_bank, train_hbank
from .metrics import EvalClassifier, EvalTrainConfig, fairness_discrepancy, quality_score, subgroup_report
from .numkit import Adam, Mlp, RngStream, derive_seed, forward_layers, backward_layers, init_mlp, load_mlp, save_mlp
from .synthdata import (AttributedMixture, LabeledSample, ReferenceDistribution,
                        default_world, load_mixture, posterior_labels,
                        reweight_mixture, sample_balanced, sample_dataset,
                        save_mixture, uniform_reference)

SPEC_VERSION = "fairdiff-spec/v1"


class SpecError(ValueError):
    """Spec file is missing, malformed, or carries unknown keys."""


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


# ---------------------------------------------------------------------------
# Spec schema
# ---------------------------------------------------------------------------

DEFAULT_SPEC: dict[str, Any] = {
    "version": SPEC_VERSION,
    "world": {"preset": "default", "path": None},
    "data": {"train_size": 8000, "seed": 11},
    "schedule": {"T": 49, "beta_start": 0.02, "beta_end": 0.2},
    "denoiser": {"hidden": [128, 96, 128], "bottleneck_index": 2, "time_embed_width": 8,
                 "epochs": 200, "batch_size": 128, "lr": 1e-3, "lr_final": 2e-4, "seed": 12},
    "hbank": {"attributes": ["a1", "a2"], "per_class": 1000, "batch_size": 64,
              "lr": 1e-3, "epochs": 5, "seed": 13},
    "eval": {"train_size": 4000, "hidden": [32], "epochs": 150, "batch_size": 64,
             "lr": 1e-3, "min_accuracy": 0.99, "seed": 14},
    "run": {"n_samples": 5000, "batch_size": 100, "gamma": 1500.0, "attribute": "a1",
            "reference": [0.5, 0.5], "strategies": ["none", "sample", "distribution"],
            "n_quality_reference": 10000},
    "ablate": {"gammas": [0.0, 250.0, 500.0, 1000.0, 1500.0],
               "batch_sizes": [10, 25, 50, 75, 100]},
    "multi": {"attributes": ["a1", "a2"], "subgroup_reference": None},
    "downstream": {"majority": 2000, "minority": 200, "attribute": "a1",
                   "observation_noise": 1.0, "epochs": 30, "hidden": [32],
                   "augment_reference": [0.2, 0.8], "test_per_class": 2500},
    "efficiency": {"sizes": [200, 500, 1000, 2000], "attribute": "a1"},
    "seeds": [101, 202, 303, 404, 505],
}


def _merge_spec(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise SpecError(f"unknown spec key {where!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge_spec(base[key], val, where)
        else:
            out[key] = val
    return out


def load_spec(path: str | Path | None, seeds: Sequence[int] | None = None) -> dict:
    """Spec dict: defaults overlaid with the JSON file; unknown keys fail."""
    spec = dict(DEFAULT_SPEC)
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read spec {path}: {exc}") from exc
        if raw.get("version", SPEC_VERSION) != SPEC_VERSION:
            raise SpecError(f"spec version {raw.get('version')!r} != {SPEC_VERSION!r}")
        spec = _merge_spec(spec, raw)
    if seeds is not None:
        spec = dict(spec)
        spec["seeds"] = [int(s) for s in seeds]
    if not spec["seeds"]:
        raise SpecError("seed list is empty")
    return spec


def spec_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Stage artifacts with content-hash caching
# ---------------------------------------------------------------------------

@dataclass
class Pipeline:
    """All trained artifacts of one spec, plus cache bookkeeping."""

    spec: dict
    world: AttributedMixture
    sched: NoiseSchedule
    net: Mlp
    banks: dict[str, HClassifierBank]
    accuracy: dict[str, np.ndarray]
    hdatasets: dict[str, hspace.HDataset]
    evals: dict[str, EvalClassifier]
    cache_hits: dict[str, bool] = field(default_factory=dict)


def _cache_dir(out_dir: Path, stage: str, key: str) -> Path:
    return Path(out_dir) / "cache" / f"{stage}-{key[:12]}"


def _stage(out_dir: Path | None, stage: str, key_obj: Any, build, save, load):
    """Run `build` unless a cached artifact exists; returns (artifact, hit)."""
    if out_dir is None:
        return build(), False
    key = spec_hash(key_obj)
    cdir = _cache_dir(out_dir, stage, key)
    marker = cdir / "meta.json"
    if marker.exists():
        try:
            return load(cdir), True
        except Exception as exc:
            raise StageError(f"stage {stage}: corrupted cache artifact in {cdir}: {exc}") from exc
    artifact = build()
    cdir.mkdir(parents=True, exist_ok=True)
    save(cdir, artifact)
    marker.write_text(json.dumps({"stage": stage, "key": key}))
    return artifact, False


def build_world(spec: dict) -> AttributedMixture:
    w = spec["world"]
    if w.get("path"):
        return load_mixture(w["path"])
    if w.get("preset", "default") != "default":
        raise SpecError(f"unknown world preset {w['preset']!r}")
    return default_world()


def build_schedule(spec: dict) -> NoiseSchedule:
    s = spec["schedule"]
    return make_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))


def _denoiser_layer_sizes(spec: dict, d: int) -> list[int]:
    dn = spec["denoiser"]
    return [d + int(dn["time_embed_width"])] + [int(h) for h in dn["hidden"]] + [d]


def build_pipeline(spec: dict, out_dir: str | Path | None = None) -> Pipeline:
    """world -> dataset -> denoiser -> h-datasets -> banks -> evaluators.

    Stages are cached in out_dir/cache keyed by the content hash of their
    own config plus their parents' keys; a rerun with the same spec hits
    every cache.
    """
    out = Path(out_dir) if out_dir is not None else None
    hits: dict[str, bool] = {}
    world = build_world(spec)
    sched = build_schedule(spec)
    world_key = {"world": spec["world"], "schedule": spec["schedule"]}

    dn = spec["denoiser"]
    net_key = {"parent": world_key, "data": spec["data"], "denoiser": dn}

    def _build_net() -> Mlp:
        rng = RngStream(int(spec["data"]["seed"]))
        data = sample_dataset(world, int(spec["data"]["train_size"]), rng)
        net = init_mlp(_denoiser_layer_sizes(spec, world.dimension),
                       int(dn["bottleneck_index"]), RngStream(derive_seed(int(dn["seed"]), "init")))
        cfg = DenoiserTrainConfig(epochs=int(dn["epochs"]), batch_size=int(dn["batch_size"]),
                                  lr=float(dn["lr"]), lr_final=float(dn["lr_final"]),
                                  seed=int(dn["seed"]))
        diffcore.train_denoiser(data, sched, net, cfg)
        return net

    net, hit = _stage(out, "denoiser", net_key, _build_net,
                      lambda d, a: save_mlp(a, d / "denoiser.json"),
                      lambda d: load_mlp(d / "denoiser.json"))
    hits["denoiser"] = hit

    hb = spec["hbank"]
    banks: dict[str, HClassifierBank] = {}
    accuracy: dict[str, np.ndarray] = {}
    hdatasets: dict[str, hspace.HDataset] = {}
    for attr in hb["attributes"]:
        hd_key = {"parent": net_key, "hbank_data": {"attr": attr, "per_class": hb["per_class"],
                                                    "seed": hb["seed"]}}

        def _build_hd(attr=attr):
            rng = RngStream(derive_seed(int(hb["seed"]), "hdata", attr))
            data = sample_balanced(world, attr, int(hb["per_class"]), rng)
            return build_hdataset(data, sched, net)

        def _save_hd(d, a):
            np.savez_compressed(d / "hdataset.npz", steps=a.steps, h=a.h,
                                sample_ids=a.sample_ids,
                                **{f"label_{k}": v for k, v in a.labels.items()})

        def _load_hd(d):
            z = np.load(d / "hdataset.npz")
            labels = {k[len("label_"):]: z[k] for k in z.files if k.startswith("label_")}
            return hspace.HDataset(z["steps"], z["h"], labels, z["sample_ids"])

        hd, hit = _stage(out, f"hdataset-{attr}", hd_key, _build_hd, _save_hd, _load_hd)
        hits[f"hdataset-{attr}"] = hit
        hdatasets[attr] = hd

        bank_key = {"parent": hd_key, "train": {k: hb[k] for k in ("batch_size", "lr", "epochs", "seed")}}

        def _build_bank(attr=attr, hd=hd):
            cfg = HBankTrainConfig(batch_size=int(hb["batch_size"]), lr=float(hb["lr"]),
                                   epochs=int(hb["epochs"]), seed=derive_seed(int(hb["seed"]), "bank", attr))
            return train_hbank(hd, attr, cfg)

        def _save_bank(d, a):
            hspace.save_bank(a[0], d / "bank.json")
            hspace.export_accuracy_table(a[1], d / "accuracy.csv")

        def _load_bank(d):
            bank = hspace.load_bank(d / "bank.json")
            rows = list(csv.reader((d / "accuracy.csv").read_text().splitlines()))[1:]
            return bank, np.array([[float(t), float(a)] for t, a in rows])

        (bank, acc), hit = _stage(out, f"bank-{attr}", bank_key, _build_bank, _save_bank, _load_bank)
        hits[f"bank-{attr}"] = hit
        banks[attr] = bank
        accuracy[attr] = acc

    ev = spec["eval"]
    evals: dict[str, EvalClassifier] = {}
    for attr in hb["attributes"]:
        ev_key = {"parent": world_key, "eval": {**ev, "attr": attr}}

        def _build_eval(attr=attr):
            # seed stream disjoint from the h-classifier data by construction
            rng = RngStream(derive_seed(int(ev["seed"]), "evaldata", attr))
            data = sample_dataset(world, int(ev["train_size"]), rng)
            cfg = EvalTrainConfig(hidden=tuple(int(h) for h in ev["hidden"]),
                                  epochs=int(ev["epochs"]), batch_size=int(ev["batch_size"]),
                                  lr=float(ev["lr"]), min_accuracy=float(ev["min_accuracy"]),
                                  seed=derive_seed(int(ev["seed"]), "evalnet", attr))
            return metrics.train_eval_classifier(data, attr, cfg)

        def _save_eval(d, a):
            save_mlp(a.net, d / "evalclf.json")
            (d / "evalmeta.json").write_text(json.dumps(a.metadata))

        def _load_eval(d, attr=attr):
            meta = json.loads((d / "evalmeta.json").read_text())
            return EvalClassifier(attr, load_mlp(d / "evalclf.json"), meta)

        clf, hit = _stage(out, f"evalclf-{attr}", ev_key, _build_eval, _save_eval, _load_eval)
        hits[f"evalclf-{attr}"] = hit
        evals[attr] = clf

    return Pipeline(spec, world, sched, net, banks, accuracy, hdatasets, evals, hits)


# ---------------------------------------------------------------------------
# Run cells and metric rows
# ---------------------------------------------------------------------------

def _reference(values, attributes) -> ReferenceDistribution:
    return ReferenceDistribution(tuple(attributes), np.asarray(values, dtype=np.float64))


def make_guidance_config(pipe: Pipeline, strategy: str, gamma: float, batch_size: int,
                         attribute: str | Sequence[str], reference: Sequence[float],
                         quota_seed: int) -> GuidanceConfig:
    attrs = (attribute,) if isinstance(attribute, str) else tuple(attribute)
    ref = _reference(reference, attrs)
    if len(attrs) == 1:
        banks = [pipe.banks[attrs[0]]]
        refs = [ref]
    else:
        banks = [joint_bank(pipe.banks[attrs[0]], pipe.banks[attrs[1]])]
        refs = [ref]
    cfg = GuidanceConfig(strategy=strategy, gamma=gamma, banks=banks, references=refs,
                         batch_size=batch_size, quota_seed=quota_seed)
    if strategy == "latent-edit":
        cfg.directions = compute_edit_directions(pipe.hdatasets[attrs[0]], attrs[0])
        cfg.edit_class = 1
        cfg.edit_scale = 1.0
    if strategy == "universal":
        ev = pipe.spec["eval"]
        rng = RngStream(derive_seed(int(ev["seed"]), "guidance-clf", attrs[0]))
        data = sample_dataset(pipe.world, int(ev["train_size"]), rng)
        clf = metrics.train_eval_classifier(
            data, attrs[0],
            EvalTrainConfig(seed=derive_seed(int(ev["seed"]), "guidance-clf-net", attrs[0])))
        cfg.clean_classifier = clf.net
    return cfg


def generate_samples(pipe: Pipeline, strategy: str, gamma: float, batch_size: int,
                     attribute, reference, seed: int, n: int):
    """One generation cell; returns (samples, diagnostics)."""
    if strategy == "none":
        run = sample_batch(n, pipe.sched, pipe.net, RngStream(seed), record_h=False)
        return run.samples, []
    cfg = make_guidance_config(pipe, strategy, gamma, batch_size, attribute, reference,
                               quota_seed=derive_seed(seed, "quota"))
    run, diag = run_guided_generation(cfg, pipe.sched, pipe.net, RngStream(seed), n)
    return run.samples, diag


def evaluate_samples(pipe: Pipeline, samples: np.ndarray, attribute, reference,
                     seed: int, n_quality_reference: int) -> dict[str, float]:
    """FD against the reference plus quality against the reference-reweighted
    mixture (the analogue of scoring against a reference set that follows
    the target attribute distribution)."""
    attrs = (attribute,) if isinstance(attribute, str) else tuple(attribute)
    ref = _reference(reference, attrs)
    if len(attrs) == 1:
        rep = fairness_discrepancy(pipe.evals[attrs[0]], samples, ref)
    else:
        rep = subgroup_report(pipe.evals[attrs[0]], pipe.evals[attrs[1]], samples, ref)
    target_mix = reweight_mixture(pipe.world, ref)
    q = quality_score(target_mix, samples, RngStream(derive_seed(seed, "quality")),
                      n_reference=n_quality_reference)
    row = {"fd": rep.fd, "mean_logdensity": q.mean_log_density, "mmd2": q.mmd2, "n": rep.n}
    for c, frac in enumerate(rep.fractions):
        row[f"frac_{c}"] = float(frac)
    for c, frac in enumerate(rep.hard_fractions):
        row[f"hard_{c}"] = float(frac)
    return row


def _cell(pipe: Pipeline, strategy: str, gamma: float, batch_size: int, attribute,
          reference, seed: int, n: int, n_quality: int) -> dict[str, Any]:
    samples, _ = generate_samples(pipe, strategy, gamma, batch_size, attribute, reference, seed, n)
    row = evaluate_samples(pipe, samples, attribute, reference, seed, n_quality)
    label = attribute if isinstance(attribute, str) else "+".join(attribute)
    return {"attribute": label, "strategy": strategy, "gamma": gamma,
            "batch_size": batch_size, "seed": seed, **row}


_WORKER_PIPE: Pipeline | None = None
_WORKER_SPEC_OUT: tuple[dict, str | None] | None = None


def _worker_cell(payload) -> dict[str, Any]:
    global _WORKER_PIPE, _WORKER_SPEC_OUT
    spec, out_dir, params = payload
    if _WORKER_SPEC_OUT != (spec, out_dir) or _WORKER_PIPE is None:
        _WORKER_PIPE = build_pipeline(spec, out_dir)
        _WORKER_SPEC_OUT = (spec, out_dir)
    return _cell(_WORKER_PIPE, **params)


def run_cells(pipe: Pipeline, cells: list[dict], out_dir, jobs: int = 1) -> list[dict]:
    """Evaluate (config, seed) cells, in a worker pool when jobs > 1; the
    result order matches the request order regardless of scheduling."""
    if jobs <= 1:
        return [_cell(pipe, **c) for c in cells]
    payloads = [(pipe.spec, str(out_dir) if out_dir else None, c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_worker_cell, payloads))


# ---------------------------------------------------------------------------
# Tables and records
# ---------------------------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(rows: list[dict], path: str | Path) -> None:
    """Delimited text with a header row; float cells use shortest-roundtrip
    repr so identical runs produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in cols])


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def aggregate_rows(rows: list[dict], group_keys: Sequence[str],
                   value_keys: Sequence[str]) -> list[dict]:
    """Mean and std rows per group, tagged in the seed column."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in group_keys), []).append(row)
    out = []
    for key, members in groups.items():
        for tag, fn in (("mean", np.mean), ("std", np.std)):
            agg = dict(members[0])
            agg["seed"] = tag
            for vk in value_keys:
                agg[vk] = float(fn([m[vk] for m in members]))
            out.append({k: agg[k] for k in members[0].keys()})
    return out


@dataclass
class RunRecord:
    run_id: str
    spec_hash: str
    rows: list[dict]
    wall_clock_s: float
    cache_hits: dict[str, bool]

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "run_id": self.run_id, "spec_hash": self.spec_hash, "rows": self.rows,
            "wall_clock_s": self.wall_clock_s, "cache_hits": self.cache_hits}, indent=2))


def _record(spec: dict, rows: list[dict], t0: float, pipe: Pipeline | None,
            tag: str) -> RunRecord:
    sh = spec_hash(spec)
    return RunRecord(run_id=spec_hash({"spec": sh, "cmd": tag})[:16], spec_hash=sh,
                     rows=rows, wall_clock_s=time.time() - t0,
                     cache_hits=pipe.cache_hits if pipe else {})


VALUE_KEYS = ("fd", "mean_logdensity", "mmd2")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pipeline(spec: dict, out_dir: str | Path, jobs: int = 1) -> RunRecord:
    """Full flow; emits a strategy-comparison table of (FD, quality) rows."""
    t0 = time.time()
    out = Path(out_dir)
    pipe = build_pipeline(spec, out)
    run = spec["run"]
    cells = [
        dict(strategy=strategy, gamma=float(run["gamma"]), batch_size=int(run["batch_size"]),
             attribute=run["attribute"], reference=run["reference"], seed=int(seed),
             n=int(run["n_samples"]), n_quality=int(run["n_quality_reference"]))
        for strategy in run["strategies"] for seed in spec["seeds"]
    ]
    rows = run_cells(pipe, cells, out, jobs)
    rows += aggregate_rows(rows, ("attribute", "strategy", "gamma", "batch_size"), VALUE_KEYS)
    write_table(rows, out / "tables" / "pipeline.csv")
    rec = _record(spec, rows, t0, pipe, "pipeline")
    rec.write(out / "record-pipeline.json")
    return rec


def cmd_ablate_gamma(spec: dict, out_dir: str | Path, gammas: Sequence[float] | None = None,
                     jobs: int = 1) -> RunRecord:
    """FD and quality versus guidance strength for both guidance strategies."""
    t0 = time.time()
    out = Path(out_dir)
    pipe = build_pipeline(spec, out)
    run = spec["run"]
    gammas = list(spec["ablate"]["gammas"]) if gammas is None else list(gammas)
    cells = [
        dict(strategy=strategy, gamma=float(g), batch_size=int(run["batch_size"]),
             attribute=run["attribute"], reference=run["reference"], seed=int(seed),
             n=int(run["n_samples"]), n_quality=int(run["n_quality_reference"]))
        for strategy in ("distribution", "sample") for g in gammas for seed in spec["seeds"]
    ]
    rows = run_cells(pipe, cells, out, jobs)
    rows += aggregate_rows(rows, ("attribute", "strategy", "gamma", "batch_size"), VALUE_KEYS)
    write_table(rows, out / "tables" / "ablate_gamma.csv")
    rec = _record(spec, rows, t0, pipe, "ablate-gamma")
    rec.write(out / "record-ablate-gamma.json")
    return rec


def cmd_ablate_batch(spec: dict, out_dir: str | Path, sizes: Sequence[int] | None = None,
                     jobs: int = 1) -> RunRecord:
    """FD and quality versus the coupled batch size for distribution guidance."""
    t0 = time.time()
    out = Path(out_dir)
    pipe = build_pipeline(spec, out)
    run = spec["run"]
    sizes = list(spec["ablate"]["batch_sizes"]) if sizes is None else list(sizes)
    cells = [
        dict(strategy="distribution", gamma=float(run["gamma"]), batch_size=int(N),
             attribute=run["attribute"], reference=run["reference"], seed=int(seed),
             n=int(run["n_samples"]), n_quality=int(run["n_quality_reference"]))
        for N in sizes for seed in spec["seeds"]
    ]
    rows = run_cells(pipe, cells, out, jobs)
    rows += aggregate_rows(rows, ("attribute", "strategy", "gamma", "batch_size"), VALUE_KEYS)
    write_table(rows, out / "tables" / "ablate_batch.csv")
    rec = _record(spec, rows, t0, pipe, "ablate-batch")
    rec.write(out / "record-ablate-batch.json")
    return rec


def cmd_multi_attribute(spec: dict, out_dir: str | Path, jobs: int = 1) -> RunRecord:
    """Joint balancing of two attributes.

    Marginal mode sums guidance from the two per-attribute predictors;
    subgroup mode guides the 4-class product predictor toward a joint
    reference (uniform by default, or multi.subgroup_reference).
    """
    t0 = time.time()
    out = Path(out_dir)
    pipe = build_pipeline(spec, out)
    run = spec["run"]
    a1, a2 = spec["multi"]["attributes"]
    if a2 not in pipe.banks:
        raise StageError(f"multi-attribute balancing needs a trained bank for {a2!r}")
    n = int(run["n_samples"])
    nq = int(run["n_quality_reference"])
    gamma = float(run["gamma"])
    N = int(run["batch_size"])
    rows = []
    for seed in spec["seeds"]:
        seed = int(seed)
        # marginal mode: one ADP per attribute, updates summed
        cfg = GuidanceConfig(strategy="distribution", gamma=gamma,
                             banks=[pipe.banks[a1], pipe.banks[a2]],
                             references=[uniform_reference(a1), uniform_reference(a2)],
                             batch_size=N, quota_seed=derive_seed(seed, "quota"))
        srun, _ = run_guided_generation(cfg, pipe.sched, pipe.net, RngStream(seed), n)
        for attr in (a1, a2):
            row = evaluate_samples(pipe, srun.samples, attr, [0.5, 0.5], seed, nq)
            rows.append({"attribute": attr, "strategy": "distribution-marginal",
                         "gamma": gamma, "batch_size": N, "seed": seed, **row})
        unguided = sample_batch(n, pipe.sched, pipe.net, RngStream(seed), record_h=False)
        for attr in (a1, a2):
            row = evaluate_samples(pipe, unguided.samples, attr, [0.5, 0.5], seed, nq)
            rows.append({"attribute": attr, "strategy": "none", "gamma": 0.0,
                         "batch_size": N, "seed": seed, **row})
        # subgroup mode: 4-class product predictor
        sub_ref = spec["multi"]["subgroup_reference"] or [0.25, 0.25, 0.25, 0.25]
        cell = _cell(pipe, "distribution", gamma, N, (a1, a2), sub_ref, seed, n, nq)
        cell["strategy"] = "distribution-subgroup"
        rows.append(cell)
    rows += aggregate_rows(rows, ("attribute", "strategy", "gamma", "batch_size"), VALUE_KEYS)
    write_table(rows, out / "tables" / "multi.csv")
    rec = _record(spec, rows, t0, pipe, "multi")
    rec.write(out / "record-multi.json")
    return rec


# --- downstream rebalancing -------------------------------------------------

def _train_task_classifier(X: np.ndarray, y: np.ndarray, hidden: Sequence[int],
                           epochs: int, seed: int) -> Mlp:
    rng = RngStream(seed)
    net = init_mlp([X.shape[1], *hidden, 2], 1, rng.child("init"))
    opt = Adam(net.parameters(), lr=1e-3)
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, 64):
            rows = order[lo:lo + 64]
            logits, cache = forward_layers(net, X[rows])
            S = hspace._softmax(logits)
            S[np.arange(len(rows)), y[rows]] -= 1.0
            S /= len(rows)
            _, wg, bg = backward_layers(net, cache, S)
            opt.step(wg + bg)
            net.bump()
    return net


def _per_class_accuracy(net: Mlp, world: AttributedMixture, attribute: str,
                        noise: float, per_class: int, rng: RngStream) -> list[float]:
    accs = []
    for cls in (0, 1):
        pts: list[np.ndarray] = []
        while len(pts) < per_class:
            for s in sample_dataset(world, 4096, rng):
                if s.labels[attribute] == cls:
                    pts.append(s.x0)
        X = np.stack(pts[:per_class]) + noise * rng.standard_normal((per_class, world.dimension))
        logits, _ = forward_layers(net, X)
        accs.append(float((logits.argmax(axis=1) == cls).mean()))
    return accs


def cmd_downstream(spec: dict, out_dir: str | Path, jobs: int = 1) -> RunRecord:
    """Rebalance an imbalanced downstream classification task.

    The task observes world samples through isotropic measurement noise;
    class overlap in the observed features is what makes the 10:1 imbalance
    genuinely hurt minority accuracy. Guided generations targeting the
    minority close the gap: the augmentation count equals the difference of
    the class counts, and generated points carry exact posterior labels.
    """
    t0 = time.time()
    out = Path(out_dir)
    pipe = build_pipeline(spec, out)
    ds = spec["downstream"]
    attr = ds["attribute"]
    n_major, n_minor = int(ds["majority"]), int(ds["minority"])
    noise = float(ds["observation_noise"])
    augment_n = n_major - n_minor
    rows = []
    for seed in spec["seeds"]:
        seed = int(seed)
        r = RngStream(seed)
        major, minor = [], []
        while len(major) < n_major or len(minor) < n_minor:
            for s in sample_dataset(pipe.world, 8192, r.child("data")):
                (major if s.labels[attr] == 0 else minor).append(s)
        Xc = np.stack([s.x0 for s in major[:n_major] + minor[:n_minor]])
        Xtr = Xc + noise * r.child("obs-noise").standard_normal(Xc.shape)
        ytr = np.array([0] * n_major + [1] * n_minor)
        before_net = _train_task_classifier(Xtr, ytr, ds["hidden"], int(ds["epochs"]),
                                            derive_seed(seed, "task"))
        before = _per_class_accuracy(before_net, pipe.world, attr, noise,
                                     int(ds["test_per_class"]), r.child("test-before"))
        cfg = make_guidance_config(pipe, "distribution", float(spec["run"]["gamma"]),
                                   int(spec["run"]["batch_size"]), attr,
                                   ds["augment_reference"], derive_seed(seed, "quota"))
        grun, _ = run_guided_generation(cfg, pipe.sched, pipe.net,
                                        RngStream(derive_seed(seed, "augment")), augment_n)
        labels = np.array([l[attr] for l in posterior_labels(pipe.world, grun.samples)])
        Xg = grun.samples + noise * r.child("aug-noise").standard_normal(grun.samples.shape)
        Xa = np.concatenate([Xtr, Xg])
        ya = np.concatenate([ytr, labels])
        after_net = _train_task_classifier(Xa, ya, ds["hidden"], int(ds["epochs"]),
                                           derive_seed(seed, "task"))
        after = _per_class_accuracy(after_net, pipe.world, attr, noise,
                                    int(ds["test_per_class"]), r.child("test-after"))
        for phase, accs, ntr in (("before", before, len(ytr)), ("after", after, len(ya))):
            for cls in (0, 1):
                rows.append({"attribute": attr, "strategy": "distribution",
                             "gamma": float(spec["run"]["gamma"]),
                             "batch_size": int(spec["run"]["batch_size"]), "seed": seed,
                             "phase": phase, "group": cls, "n_train": ntr,
                             "n_augment": augment_n if phase == "after" else 0,
                             "accuracy": accs[cls]})
    rows += aggregate_rows(rows, ("attribute", "strategy", "gamma", "batch_size", "phase", "group"),
                           ("accuracy",))
    write_table(rows, out / "tables" / "downstream.csv")
    rec = _record(spec, rows, t0, pipe, "downstream")
    rec.write(out / "record-downstream.json")
    return rec


def cmd_data_efficiency(spec: dict, out_dir: str | Path, sizes: Sequence[int] | None = None,
                        jobs: int = 1) -> RunRecord:
    """Held-out accuracy of h-space banks and clean-data baselines across
    training-set sizes; h-bank rows carry per-step aggregates."""
    t0 = time.time()
    out = Path(out_dir)
    pipe = build_pipeline(spec, out)
    att = spec["efficiency"]["attribute"]
    sizes = list(spec["efficiency"]["sizes"]) if sizes is None else list(sizes)
    hb = spec["hbank"]
    rows = []
    for seed in spec["seeds"]:
        seed = int(seed)
        for size in sizes:
            per_class = int(size) // 2
            rng = RngStream(derive_seed(seed, "effdata", size))
            data = sample_balanced(pipe.world, att, per_class, rng)
            hd = build_hdataset(data, pipe.sched, pipe.net)
            cfg = HBankTrainConfig(batch_size=int(hb["batch_size"]), lr=float(hb["lr"]),
                                   epochs=int(hb["epochs"]), seed=derive_seed(seed, "effbank", size))
            _, acc = train_hbank(hd, att, cfg)
            low = acc[acc[:, 0] < 0.7 * pipe.sched.T, 1]
            rows.append({"attribute": att, "kind": "hbank", "size": int(size), "seed": seed,
                         "accuracy": float(acc[:, 1].mean()), "accuracy_low_t": float(low.mean())})
            try:
                clf = metrics.train_eval_classifier(
                    data, att, EvalTrainConfig(min_accuracy=0.0,
                                               seed=derive_seed(seed, "effclean", size)))
                rows.append({"attribute": att, "kind": "clean-mlp", "size": int(size), "seed": seed,
                             "accuracy": float(clf.metadata["holdout_accuracy"]),
                             "accuracy_low_t": ""})
            except ValueError as exc:
                raise StageError(f"data-efficiency clean baseline: {exc}") from exc
    agg = aggregate_rows([r for r in rows if r["kind"] == "hbank"],
                         ("attribute", "kind", "size"), ("accuracy", "accuracy_low_t"))
    agg += aggregate_rows([r for r in rows if r["kind"] == "clean-mlp"],
                          ("attribute", "kind", "size"), ("accuracy",))
    rows += agg
    write_table(rows, out / "tables" / "data_efficiency.csv")
    rec = _record(spec, rows, t0, pipe, "data-efficiency")
    rec.write(out / "record-data-efficiency.json")
    return rec


def cmd_plot(table_path: str | Path, x: str, y: str, group: str | None,
             out_path: str | Path) -> None:
    """SVG line chart of y against x from a result table, one line per group,
    drawn from the seed-mean rows."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in read_table(table_path) if r.get("seed") == "mean"]
    if not rows:
        raise StageError(f"no aggregate rows in {table_path}")
    fig, ax = plt.subplots(figsize=(6, 4))
    keys = sorted({r[group] for r in rows}) if group else [None]
    for key in keys:
        sel = [r for r in rows if group is None or r[group] == key]
        pts = sorted((float(r[x]), float(r[y])) for r in sel)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=str(key) if key is not None else y)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
