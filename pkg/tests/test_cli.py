import csv
import json

import numpy as np
import pytest

from flowbridge.backbone import BackboneModel, ModelConfig, load_checkpoint
from flowbridge.cli import main
from flowbridge.toydata import read_jsonl

from conftest import TINY

TRAIN = dict(steps=3, batch_size=4, optimizer="adam", lr=1e-3, lr_decay="none", log_every=0,
             flow={"n_steps": 20})


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(tmp, name, cfg, *flags):
    return main([name, "--config", write(tmp / f"{name}.json", cfg), *flags])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert run(tmp, "gen-data", {"dataset": {"n_complexes": 40, "seed": 2}, "output": "data.jsonl"}) == 0
    cfg = {"data": "data.jsonl", "output": "model.json", "model": TINY, "train": TRAIN}
    assert run(tmp, "train", cfg) == 0
    return tmp


def sample_cfg(**kw):
    return {"checkpoint": "model.json", "contexts": "data.jsonl", "n_contexts": 2, "n_per_context": 2,
            "n_steps": 10, "output": "samples.jsonl", **kw}


class TestGenData:
    def test_outputs(self, workdir):
        data = read_jsonl(workdir / "data.jsonl")
        stats = json.loads((workdir / "data.jsonl.stats.json").read_text())
        assert len(data) == 40
        assert stats["n_complexes"] == 40

    def test_reproducible(self, workdir, tmp_path):
        assert run(tmp_path, "gen-data", {"dataset": {"n_complexes": 40}, "output": "d.jsonl"}, "--seed", "2") == 0
        assert (tmp_path / "d.jsonl").read_bytes() == (workdir / "data.jsonl").read_bytes()

    def test_missing_config(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.json")]) == 2

    def test_bad_schema(self, tmp_path):
        assert run(tmp_path, "gen-data", {"dataset": {"bogus": 1}, "output": "d.jsonl"}) == 2
        assert run(tmp_path, "gen-data", {"outptu": "d.jsonl"}) == 2

    def test_unknown_command(self, tmp_path):
        assert main(["fly", "--config", "x.json"]) == 2


class TestTrain:
    def test_zero_steps_keeps_initialisation(self, workdir, tmp_path):
        base = {"data": str(workdir / "data.jsonl"), "model": TINY, "train": {**TRAIN, "steps": 0}}
        assert run(tmp_path, "train", {**base, "output": "a.json"}) == 0
        assert run(tmp_path, "train", {**base, "output": "b.json", "train": {**TRAIN, "steps": 1}}) == 0
        a, b = load_checkpoint(tmp_path / "a.json"), load_checkpoint(tmp_path / "b.json")
        init = BackboneModel(ModelConfig(**TINY), rng=np.random.default_rng(0))
        assert np.array_equal(a.model.params, init.params)
        assert not np.array_equal(b.model.params, init.params)

    def test_byte_identical_rerun(self, workdir, tmp_path):
        cfg = {"data": str(workdir / "data.jsonl"), "output": "again.json", "model": TINY, "train": TRAIN}
        assert run(tmp_path, "train", cfg) == 0
        assert (tmp_path / "again.json").read_bytes() == (workdir / "model.json").read_bytes()

    def test_resume_continues_history(self, workdir, tmp_path):
        data = str(workdir / "data.jsonl")
        full = {"data": data, "output": "full.json", "model": TINY, "train": {**TRAIN, "steps": 6}}
        assert run(tmp_path, "train", full) == 0
        first = {"data": data, "output": "half.json", "model": TINY, "train": TRAIN}
        assert run(tmp_path, "train", first) == 0
        resumed = {"data": data, "output": "rest.json", "resume": "half.json", "train": {**TRAIN, "steps": 6}}
        assert run(tmp_path, "train", resumed) == 0
        assert (tmp_path / "rest.history.csv").read_text() == (tmp_path / "full.history.csv").read_text()
        a, b = load_checkpoint(tmp_path / "rest.json"), load_checkpoint(tmp_path / "full.json")
        assert np.array_equal(a.model.params, b.model.params)

    def test_divergence_exit_code(self, workdir, tmp_path, capsys):
        cfg = {"data": str(workdir / "data.jsonl"), "output": "x.json", "model": TINY,
               "train": {**TRAIN, "weights": {"lambda_coord": 1e9}}}
        assert run(tmp_path, "train", cfg) == 3
        assert "divergence" in capsys.readouterr().err
        assert (tmp_path / "x.history.csv").exists()

    def test_bad_train_schema(self, workdir, tmp_path):
        cfg = {"data": str(workdir / "data.jsonl"), "output": "x.json", "train": {"optimiser": "adam"}}
        assert run(tmp_path, "train", cfg) == 2


class TestSample:
    def test_records_and_summary(self, workdir):
        assert run(workdir, "sample", sample_cfg()) == 0
        lines = (workdir / "samples.jsonl").read_text().splitlines()
        assert len(lines) == 4
        rec = json.loads(lines[0])
        assert {"removed", "sigma_tot", "molecule", "n_nodes"} <= set(rec)
        with open(workdir / "samples.summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert all(int(r["n_atoms"]) + int(r["removed"]) == int(r["n_nodes"]) for r in rows)

    def test_zero_samples(self, workdir):
        assert run(workdir, "sample", sample_cfg(n_per_context=0, output="empty.jsonl")) == 0
        assert (workdir / "empty.jsonl").read_text() == ""
        assert (workdir / "empty.summary.csv").read_text().strip() == ",".join(
            ["context_id", "sample", "n_nodes", "n_atoms", "removed", "sigma_tot_mean"])

    def test_seed_determinism(self, workdir):
        assert run(workdir, "sample", sample_cfg(output="s1.jsonl"), "--seed", "5") == 0
        assert run(workdir, "sample", sample_cfg(output="s2.jsonl"), "--seed", "5") == 0
        assert (workdir / "s1.jsonl").read_bytes() == (workdir / "s2.jsonl").read_bytes()

    def test_extra_nodes_and_fixed_ligand(self, workdir):
        assert run(workdir, "sample", sample_cfg(output="x.jsonl"), "--extra-nodes", "7") == 0
        recs = [json.loads(x) for x in (workdir / "x.jsonl").read_text().splitlines()]
        assert all(r["n_nodes"] >= 7 for r in recs)
        assert run(workdir, "sample", sample_cfg(output="f.jsonl"), "--fixed-ligand") == 0
        data = read_jsonl(workdir / "data.jsonl")
        recs = [json.loads(x) for x in (workdir / "f.jsonl").read_text().splitlines()]
        assert recs[0]["molecule"]["atom_types"] == data[0].atom_types.tolist()

    def test_checkpoint_mismatch(self, workdir, tmp_path):
        ck = json.loads((workdir / "model.json").read_text())
        ck["params"] = ck["params"][:-1]
        write(tmp_path / "bad.json", ck)
        cfg = sample_cfg(checkpoint="bad.json", contexts=str(workdir / "data.jsonl"))
        assert run(tmp_path, "sample", cfg) == 4

    def test_negative_count(self, workdir):
        assert run(workdir, "sample", sample_cfg(n_per_context=-1)) == 2


class TestEval:
    def test_identical_inputs_give_zero(self, workdir):
        cfg = {"reference": "data.jsonl", "samples": {"a": "data.jsonl", "b": "data.jsonl"},
               "output_json": "rep.json", "n_boot": 3, "boot_size": 20}
        assert run(workdir, "eval", cfg) == 0
        rep = json.loads((workdir / "rep.json").read_text())["metrics"]
        for name, m in rep.items():
            if "/w1/" in name or "/jsd" in name or name.endswith("frechet"):
                assert m["value"] == pytest.approx(0.0, abs=1e-8), name
            assert m["boot_std"] is not None and m["boot_std"] >= 0
        for name, m in rep.items():
            method, metric = name.split("/", 1)
            other = "b" if method == "a" else "a"
            assert m["p_values"][other] == rep[f"{other}/{metric}"]["p_values"][method]
        assert (workdir / "rep.csv").exists()

    def test_deterministic(self, workdir):
        cfg = {"reference": "data.jsonl", "samples": "samples.jsonl", "output_json": "e1.json",
               "n_boot": 3, "boot_size": 20}
        run(workdir, "sample", sample_cfg())
        assert run(workdir, "eval", cfg) == 0
        assert run(workdir, "eval", {**cfg, "output_json": "e2.json"}) == 0
        assert (workdir / "e1.json").read_bytes() == (workdir / "e2.json").read_bytes()

    def test_schema_mismatch(self, tmp_path):
        (tmp_path / "a.csv").write_text("x,y\n1,2\n3,4\n")
        (tmp_path / "b.csv").write_text("x\n1\n2\n")
        write(tmp_path / "sa.json", {"continuous": ["x", "y"]})
        cfg = {"reference": "a.csv", "samples": "b.csv", "schema": "sa.json", "output_json": "r.json"}
        assert run(tmp_path, "eval", cfg) == 2


class TestAlign:
    def test_align_and_finetune(self, workdir):
        build = {"contexts": "data.jsonl", "n_contexts": 3, "samples_per_context": 3, "n_steps": 10,
                 "properties": {"compactness": 0.0}}
        acfg = {"steps": 2, "batch_size": 2, "flow": {"n_steps": 20}}
        cfg = {"checkpoint": "model.json", "build": build, "pairs_output": "pairs.jsonl",
               "alignment": acfg, "output": "aligned.json"}
        assert run(workdir, "align", cfg) == 0
        assert (workdir / "pairs.jsonl").read_text()
        ft = {"checkpoint": "model.json", "pairs": "pairs.jsonl", "alignment": acfg, "output": "ft.json"}
        assert run(workdir, "finetune", ft) == 0
        ref = load_checkpoint(workdir / "model.json").model.params
        assert not np.array_equal(load_checkpoint(workdir / "aligned.json").model.params, ref)

    def test_unknown_property(self, workdir, tmp_path):
        cfg = {"checkpoint": str(workdir / "model.json"),
               "build": {"contexts": str(workdir / "data.jsonl"), "properties": {"qed": 0.1}},
               "output": "a.json"}
        assert run(tmp_path, "align", cfg) == 2
