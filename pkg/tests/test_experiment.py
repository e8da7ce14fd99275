import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from fedchem.cli import main
from fedchem.dataset import BadLabelValue, DatasetFile, MissingColumn, load_dataset
from fedchem.experiment import (
    GridSpec,
    MixedDatasets,
    RunConfig,
    StageError,
    compare_runs,
    effective_workers,
    payload_bytes,
    read_comparison,
    run_experiment,
)
from fedchem.fedcore import FedConfig, load_round_checkpoint
from fedchem.nnet import MpnnConfig
from fedchem.partition import ClientPartition
from fedchem.scaffold import read_scaffold_manifest
from fedchem.strategies import StrategyConfig

TINY_MODEL = MpnnConfig(mp_layers=1, edge_hidden=4, node_dim=6, head_hidden=6)


def tiny(tmp_path, kind="erm", **fed):
    base = dict(num_clients=3, comm_rounds=2, local_steps=3, batch_size=16, strategy=StrategyConfig(kind=kind))
    base.update(fed)
    return RunConfig(alpha=0.5, model=TINY_MODEL, fed=FedConfig(**base), out_dir=str(tmp_path))


def write_csv(path, rows):
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------- ingestion

def test_three_rows(tmp_path):
    ds = load_dataset(DatasetFile(write_csv(tmp_path / "d.csv", ["smiles,y", "CCO,1.5", "c1ccccc1,-2", "C,0"])))
    assert len(ds) == 3 and ds.y.shape == (3, 1) and ds.mask.all()
    assert ds.y.dtype == np.float64 and ds.y[1, 0] == -2.0


def test_empty_label_masked(tmp_path):
    spec = DatasetFile(write_csv(tmp_path / "d.csv", ["smiles,a,b", "CCO,1,", "CC,,0"]),
                       task_columns=("a", "b"), task_type="classification")
    ds = load_dataset(spec)
    assert ds.mask.tolist() == [[True, False], [False, True]]
    assert spec.metric_name == "roc_auc"


def test_rejects_reported(tmp_path):
    ds = load_dataset(DatasetFile(write_csv(tmp_path / "d.csv", ["smiles,y", "CCO,1", "not_a_smiles(,2", "CC,3"])))
    assert len(ds) == 2
    (r,) = ds.rejects
    assert r.row == 3 and r.smiles == "not_a_smiles(" and r.error


def test_missing_column(tmp_path):
    with pytest.raises(MissingColumn):
        load_dataset(DatasetFile(write_csv(tmp_path / "d.csv", ["smi,y", "C,1"])))


def test_bad_labels(tmp_path):
    with pytest.raises(BadLabelValue, match="row 2.*'y'"):
        load_dataset(DatasetFile(write_csv(tmp_path / "d.csv", ["smiles,y", "C,abc"])))
    with pytest.raises(BadLabelValue):
        load_dataset(DatasetFile(write_csv(tmp_path / "e.csv", ["smiles,y", "C,2"]), task_type="classification"))


def test_shipped_datasets_parse(freesolv, esol):
    assert len(freesolv.dataset) == 642 and len(esol.dataset) == 1128
    assert not freesolv.dataset.rejects and not esol.dataset.rejects


# ---------------------------------------------------------------- configuration

def test_config_json_round_trip(tmp_path):
    cfg = replace(tiny(tmp_path, "flit_plus"), grid=GridSpec(gamma=(1.0, 2.0)), total_steps=300)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys"):
        RunConfig.from_json({"fed": {"rounds": 3}})


def test_total_steps_split_across_rounds(tmp_path):
    cfg = replace(tiny(tmp_path), total_steps=10_000, fed=FedConfig(comm_rounds=30))
    assert cfg.resolved().fed.local_steps == 333


def test_grid_points():
    g = GridSpec()
    assert len(g.points(StrategyConfig(kind="prox"))) == 5
    assert len(g.points(StrategyConfig(kind="flit_plus"))) == 9
    assert g.points(StrategyConfig()) == [StrategyConfig()]
    with pytest.raises(ValueError):
        GridSpec(mu=())


def test_threads_env(monkeypatch):
    monkeypatch.setenv("FEDCHEM_THREADS", "2")
    assert effective_workers(8) == 2 and effective_workers(1) == 1
    monkeypatch.delenv("FEDCHEM_THREADS")
    assert effective_workers(8) == 8


# ---------------------------------------------------------------- runs

def test_bundle_written_and_rereadable(tmp_path, freesolv):
    res = run_experiment(tiny(tmp_path / "a", "flit_plus"), freesolv)
    out = tmp_path / "a"
    back = json.loads((out / "results.json").read_text())
    assert back["test_metric"] == res["test_metric"] and len(back["history"]) == 2
    assert list(back) == sorted(back)
    part = ClientPartition.load(out / "partition.json")
    assert part.sizes == back["client_sizes"] and part.heterogeneity == back["heterogeneity_index"]
    manifest = read_scaffold_manifest(out / "scaffold_manifest.csv")
    assert len(manifest) == back["split_sizes"][0]
    params, model, rnd, _ = load_round_checkpoint(out / "final.ckpt")
    assert model == TINY_MODEL and rnd == 2
    lines = (out / "diagnostics.jsonl").read_text().splitlines()
    assert len(lines) == 6 and all(json.loads(x)["max_radius_error"] <= 1e-10 for x in lines)
    with open(out / "metrics.csv") as fh:
        assert [r["round"] for r in csv.DictReader(fh)] == ["1", "2"]
    assert (out / "rejects.csv").read_text().startswith("row,smiles,error")


def test_same_seed_same_payload(tmp_path, freesolv):
    a = run_experiment(tiny(tmp_path / "a").with_seed(4), freesolv)
    b = run_experiment(tiny(tmp_path / "b").with_seed(4), freesolv)
    assert payload_bytes(a) == payload_bytes(b)
    assert a["metadata"]["out_dir"] != b["metadata"]["out_dir"]
    c = run_experiment(tiny(tmp_path / "c").with_seed(5), freesolv)
    assert payload_bytes(a) != payload_bytes(c)


def test_flit_reduction_same_test_metric(tmp_path, freesolv):
    erm = run_experiment(tiny(tmp_path / "e"), freesolv, write=False)
    flit = run_experiment(replace(tiny(tmp_path / "f"), fed=replace(
        tiny(tmp_path).fed, strategy=StrategyConfig(kind="flit", gamma=0.0, lam=0.0))), freesolv, write=False)
    assert erm["test_metric"] == flit["test_metric"]
    assert erm["history"] == flit["history"]


def test_grid_selects_best_validation(tmp_path, freesolv):
    cfg = replace(tiny(tmp_path / "g", "prox"), grid=GridSpec(mu=(0.001, 10.0)))
    res = run_experiment(cfg, freesolv)
    vals = [r["best_val_metric"] for r in res["grid"]]
    k = int(np.argmin(vals))
    assert res["best_val_metric"] == vals[k] and res["test_metric"] == res["grid"][k]["test_metric"]
    assert res["selected_strategy"]["mu"] == (0.001, 10.0)[k]
    assert all((tmp_path / "g" / f"grid_{k:02d}" / "final.ckpt").exists() for k in range(2))
    assert (tmp_path / "g" / "final.ckpt").exists()


def test_stage_error_names_stage(tmp_path):
    cfg = replace(tiny(tmp_path), dataset=DatasetFile(str(tmp_path / "missing.csv"), "smiles", ("expt",)))
    with pytest.raises(StageError) as err:
        run_experiment(cfg)
    assert err.value.stage == "load"


# ---------------------------------------------------------------- comparison

def fake_result(path, strategy, alpha, seed, metric, dataset="FreeSolv.csv"):
    path.write_text(json.dumps({"strategy": strategy, "alpha": alpha, "seed": seed, "test_metric": metric,
                                "dataset": dataset, "metric": "rmse"}))
    return path


def test_compare_identical(tmp_path):
    a = fake_result(tmp_path / "a.json", "erm", 0.1, 0, 1.5)
    b = fake_result(tmp_path / "b.json", "erm", 0.1, 0, 1.5)
    (row,) = compare_runs([a, b])
    assert row["median"] == 1.5 and row["iqr"] == 0.0 and row["n_runs"] == 2
    assert compare_runs([a, b]) == compare_runs([b, a])


def test_compare_rows_ordered_by_alpha(tmp_path):
    paths = [fake_result(tmp_path / f"{a}_{s}.json", "erm", a, s, a + s) for a in (1.0, 0.1, 0.5) for s in (0, 1)]
    rows = compare_runs(paths)
    assert [r["alpha"] for r in rows] == [0.1, 0.5, 1.0]


def test_compare_median_by_hand(tmp_path):
    vals = [2.0, 0.5, 3.5, 1.0, 9.0]
    paths = [fake_result(tmp_path / f"{s}.json", "flit", 0.1, s, v) for s, v in enumerate(vals)]
    (row,) = compare_runs(paths)
    assert row["median"] == sorted(vals)[2] == 2.0
    assert row["q25"] == 1.0 and row["q75"] == 3.5 and row["seeds"] == "0;1;2;3;4"


def test_compare_mixed(tmp_path):
    a = fake_result(tmp_path / "a.json", "erm", 0.1, 0, 1.0)
    b = fake_result(tmp_path / "b.json", "erm", 0.1, 1, 1.0, dataset="ESOL.csv")
    with pytest.raises(MixedDatasets):
        compare_runs([a, b])
    with pytest.raises(ValueError):
        compare_runs([a])


# ---------------------------------------------------------------- CLI

def test_cli_run_partition_compare(tmp_path, capsys):
    cfg = tiny(tmp_path)
    cfg.save(tmp_path / "cfg.json")
    for s in (0, 1):
        assert main(["run", "--config", str(tmp_path / "cfg.json"), "--seed", str(s), "--out", str(tmp_path / f"r{s}")]) == 0
    assert main(["partition", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "p")]) == 0
    assert ClientPartition.load(tmp_path / "p" / "partition.json").num_clients == 3
    out = tmp_path / "cmp.csv"
    assert main(["compare", "--inputs", str(tmp_path / "r0/results.json"), str(tmp_path / "r1/results.json"),
                 "--out", str(out)]) == 0
    (row,) = read_comparison(out)
    assert row["strategy"] == "erm" and row["seeds"] == "0;1"
    capsys.readouterr()
    assert main(["compare", "--inputs", str(tmp_path / "r0/results.json"), str(tmp_path / "r1/results.json")]) == 0
    assert capsys.readouterr().out.startswith("strategy,alpha")


def test_cli_reports_stage(tmp_path, capsys):
    cfg = replace(tiny(tmp_path), dataset=DatasetFile(str(tmp_path / "none.csv"), "smiles", ("expt",)))
    cfg.save(tmp_path / "cfg.json")
    assert main(["run", "--config", str(tmp_path / "cfg.json")]) == 2
    assert json.loads(capsys.readouterr().err)["stage"] == "load"


def test_cli_gradcheck_small(capsys):
    assert main(["gradcheck", "--cases", "2", "--coords", "6"]) == 0
    assert capsys.readouterr().out.count("ok") == 12
