import json
from pathlib import Path

import numpy as np
import pytest

from fairdiff import cli, harness
from fairdiff.harness import (SpecError, StageError, aggregate_rows,
                              build_pipeline, cmd_ablate_gamma, cmd_pipeline,
                              load_spec, read_table, spec_hash, write_table)

TINY_OVERRIDE = {
    "data": {"train_size": 600},
    "denoiser": {"hidden": [32, 16, 32], "epochs": 8},
    "hbank": {"attributes": ["a1"], "per_class": 40},
    "eval": {"train_size": 600, "epochs": 30, "min_accuracy": 0.95},
    "run": {"n_samples": 120, "batch_size": 40, "n_quality_reference": 400,
            "strategies": ["none", "distribution"]},
    "seeds": [7, 8],
}


@pytest.fixture(scope="module")
def tiny_spec(tmp_path_factory):
    path = tmp_path_factory.mktemp("spec") / "tiny.json"
    path.write_text(json.dumps(TINY_OVERRIDE))
    return load_spec(path)


class TestSpecLoading:
    def test_defaults_have_version(self):
        spec = load_spec(None)
        assert spec["version"] == harness.SPEC_VERSION
        assert spec["run"]["gamma"] == 1500.0
        assert spec["ablate"]["gammas"] == [0.0, 250.0, 500.0, 1000.0, 1500.0]
        assert spec["ablate"]["batch_sizes"] == [10, 25, 50, 75, 100]

    def test_unknown_top_level_key(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"bogus": 1}')
        with pytest.raises(SpecError, match="bogus"):
            load_spec(p)

    def test_unknown_nested_key(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"run": {"gama": 5}}')
        with pytest.raises(SpecError, match="run.gama"):
            load_spec(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"version": "fairdiff-spec/v999"}')
        with pytest.raises(SpecError, match="version"):
            load_spec(p)

    def test_seed_override_and_empty_seeds(self):
        spec = load_spec(None, seeds=[1, 2])
        assert spec["seeds"] == [1, 2]
        with pytest.raises(SpecError):
            load_spec(None, seeds=[])

    def test_spec_hash_stable(self):
        assert spec_hash({"a": 1, "b": 2}) == spec_hash({"b": 2, "a": 1})


class TestTables:
    def test_round_trip(self, tmp_path):
        rows = [{"a": 1, "b": 0.25, "c": "x"}, {"a": 2, "b": -1.5, "c": "y"}]
        path = tmp_path / "t.csv"
        write_table(rows, path)
        back = read_table(path)
        assert back[0]["a"] == "1" and float(back[1]["b"]) == -1.5

    def test_aggregate_rows(self):
        rows = [{"strategy": "s", "seed": 1, "fd": 0.2},
                {"strategy": "s", "seed": 2, "fd": 0.4}]
        agg = aggregate_rows(rows, ("strategy",), ("fd",))
        means = [r for r in agg if r["seed"] == "mean"]
        stds = [r for r in agg if r["seed"] == "std"]
        assert means[0]["fd"] == pytest.approx(0.3)
        assert stds[0]["fd"] == pytest.approx(0.1)


class TestPipelineCommand:
    def test_rows_and_rerun_cache(self, tiny_spec, tmp_path):
        out = tmp_path / "out"
        rec1 = cmd_pipeline(tiny_spec, out)
        assert not all(rec1.cache_hits.values())
        table1 = (out / "tables" / "pipeline.csv").read_bytes()
        rows = read_table(out / "tables" / "pipeline.csv")
        seed_rows = [r for r in rows if r["seed"] not in ("mean", "std")]
        assert len(seed_rows) == 2 * 2  # strategies x seeds
        for r in seed_rows:
            for col in ("attribute", "strategy", "gamma", "batch_size", "seed", "fd"):
                assert r[col] != ""
        rec2 = cmd_pipeline(tiny_spec, out)
        assert all(rec2.cache_hits.values())
        assert (out / "tables" / "pipeline.csv").read_bytes() == table1

    def test_identical_spec_reproduces_bytes_in_fresh_dir(self, tiny_spec, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cmd_pipeline(tiny_spec, out1)
        cmd_pipeline(tiny_spec, out2)
        assert (out1 / "tables" / "pipeline.csv").read_bytes() == \
               (out2 / "tables" / "pipeline.csv").read_bytes()

    def test_gamma_zero_equals_unguided(self, tiny_spec, tmp_path):
        out = tmp_path / "out"
        cmd_pipeline(tiny_spec, out)
        cmd_ablate_gamma(tiny_spec, out, gammas=[0.0])
        pipeline_rows = read_table(out / "tables" / "pipeline.csv")
        ablate_rows = read_table(out / "tables" / "ablate_gamma.csv")
        for seed in ("7", "8"):
            none_row = next(r for r in pipeline_rows
                            if r["strategy"] == "none" and r["seed"] == seed)
            zero_row = next(r for r in ablate_rows
                            if r["strategy"] == "distribution" and r["seed"] == seed)
            assert zero_row["fd"] == none_row["fd"]
            assert zero_row["mean_logdensity"] == none_row["mean_logdensity"]

    def test_ablate_row_count(self, tiny_spec, tmp_path):
        out = tmp_path / "out"
        rec = cmd_ablate_gamma(tiny_spec, out, gammas=[0.0, 10.0])
        seed_rows = [r for r in rec.rows if r["seed"] not in ("mean", "std")]
        assert len(seed_rows) == 2 * 2 * 2  # strategies x gammas x seeds

    def test_corrupted_cached_checkpoint_names_file(self, tiny_spec, tmp_path):
        out = tmp_path / "out"
        build_pipeline(tiny_spec, out)
        victim = next((out / "cache").glob("denoiser-*")) / "denoiser.json"
        victim.write_text("{broken")
        with pytest.raises(StageError, match="denoiser.json"):
            build_pipeline(tiny_spec, out)


class TestCli:
    def test_spec_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"nonsense": true}')
        assert cli.main(["pipeline", "--spec", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_stage_failure_exit_code(self, tmp_path):
        spec = dict(TINY_OVERRIDE)
        p = tmp_path / "tiny.json"
        p.write_text(json.dumps(spec))
        # multi-attribute balancing without an a2 bank is a stage failure
        assert cli.main(["multi", "--spec", str(p), "--out", str(tmp_path / "o")]) == 3

    def test_world_and_plot(self, tmp_path):
        p = tmp_path / "tiny.json"
        p.write_text(json.dumps(TINY_OVERRIDE))
        out = tmp_path / "o"
        assert cli.main(["world", "--spec", str(p), "--out", str(out), "--export", "50"]) == 0
        assert (out / "world.json").exists()
        assert len((out / "dataset.csv").read_text().splitlines()) == 51
        assert cli.main(["pipeline", "--spec", str(p), "--out", str(out)]) == 0
        assert cli.main(["plot", "--table", str(out / "tables" / "pipeline.csv"),
                         "--x", "gamma", "--y", "fd", "--group", "strategy",
                         "--out", str(out / "fig.svg")]) == 0
        assert (out / "fig.svg").read_text().startswith("<?xml")

    def test_sample_and_evaluate(self, tmp_path):
        p = tmp_path / "tiny.json"
        p.write_text(json.dumps(TINY_OVERRIDE))
        out = tmp_path / "o"
        assert cli.main(["sample", "--spec", str(p), "--out", str(out),
                         "--strategy", "distribution", "--trace"]) == 0
        assert (out / "manifest.json").exists()
        assert (out / "htrace.npz").exists()
        diag_lines = (out / "diagnostics.jsonl").read_text().splitlines()
        assert len(diag_lines) > 0
        record = json.loads(diag_lines[0])
        assert {"t", "p_hat", "loss", "grad_norm"} <= set(record)
        assert cli.main(["evaluate", "--spec", str(p), "--out", str(out),
                         "--samples", str(out / "samples.csv")]) == 0
        assert (out / "tables" / "evaluate.csv").exists()

    def test_jobs_flag_matches_serial(self, tmp_path):
        p = tmp_path / "tiny.json"
        p.write_text(json.dumps(TINY_OVERRIDE))
        out1, out2 = tmp_path / "s", tmp_path / "j"
        assert cli.main(["pipeline", "--spec", str(p), "--out", str(out1)]) == 0
        assert cli.main(["pipeline", "--spec", str(p), "--out", str(out2), "--jobs", "2"]) == 0
        assert (out1 / "tables" / "pipeline.csv").read_bytes() == \
               (out2 / "tables" / "pipeline.csv").read_bytes()
