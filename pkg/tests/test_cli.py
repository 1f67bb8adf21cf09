"""Config validation, experiment orchestration, and report reproducibility."""

import json

import pytest

from asclt_lab.cli import (
    ConfigValidationError,
    list_experiments,
    load_config,
    main,
    validate_config,
)

SEED = 20240821


def _doc(experiment, **overrides):
    doc = {"schema_version": 1, "experiment": experiment}
    doc.update(overrides)
    return doc


def _errors_by_field(doc):
    cfg, errors = validate_config(doc)
    assert cfg is None
    return {e.field for e in errors}


def _capture_list():
    lines = []
    list_experiments(echo=lines.append)
    return lines


def test_list_catalog_stable_order():
    lines = _capture_list()
    names = [ln.split(" -> ")[0] for ln in lines if " -> " in ln]
    assert names == [
        "asclt_fbm",
        "asclt_hermite_sub",
        "asclt_hermite_crit",
        "asclt_general_f",
        "non_gaussian",
        "kernels_decay",
        "delta_exactness",
        "malliavin_bounds",
        "sigma_limits",
    ]
    assert lines == _capture_list()
    defaults = [ln for ln in lines if ln.strip().startswith("default:")]
    assert len(defaults) == len(names)
    for ln in defaults:
        json.loads(ln.split("default:", 1)[1])


def test_validate_critical_rational_check():
    assert "model.H" in _errors_by_field(
        _doc("asclt_hermite_crit", model={"H": 0.7, "q": 2})
    )
    cfg, errors = validate_config(_doc("asclt_hermite_crit", model={"H": 0.75, "q": 2}))
    assert errors == [] and cfg.model["H"] == 0.75
    cfg, errors = validate_config(
        _doc("asclt_hermite_crit", model={"H": 5.0 / 6.0, "q": 3})
    )
    assert errors == []


def test_validate_unknown_fields():
    assert "typo_field" in _errors_by_field(_doc("asclt_fbm", typo_field=1))
    assert "model.bogus" in _errors_by_field(_doc("asclt_fbm", model={"H": 0.5, "bogus": 1}))
    assert "tolerances.zmax" in _errors_by_field(
        _doc("asclt_fbm", tolerances={"zmax": 3.0})
    )
    assert "seeds.extra" in _errors_by_field(
        _doc("asclt_fbm", seeds={"master_seed": 1, "replicates": 10, "extra": 2})
    )


def test_validate_schema_and_experiment():
    assert "schema_version" in _errors_by_field(
        {"schema_version": 2, "experiment": "asclt_fbm"}
    )
    assert "experiment" in _errors_by_field({"schema_version": 1, "experiment": "nope"})
    assert "<root>" in _errors_by_field([1, 2])


def test_validate_field_types_and_ranges():
    assert "n_grid" in _errors_by_field(_doc("asclt_fbm", n_grid=[64, 64, 256]))
    assert "n_grid[1]" in _errors_by_field(_doc("asclt_fbm", n_grid=[64, 1]))
    assert "seeds.master_seed" in _errors_by_field(
        _doc("asclt_fbm", seeds={"master_seed": -1, "replicates": 10})
    )
    assert "workers" in _errors_by_field(_doc("asclt_fbm", workers=0))
    assert "n_max" in _errors_by_field(_doc("asclt_fbm", n_max=True))
    assert "t_grid[0]" in _errors_by_field(_doc("asclt_fbm", t_grid=[-1.0]))
    assert "model.H" in _errors_by_field(_doc("asclt_fbm", model={"H": 1.0}))


def test_validate_regime_gates():
    assert "model.H" in _errors_by_field(
        _doc("asclt_hermite_sub", model={"H": 0.8, "q": 2})
    )
    assert "model.H" in _errors_by_field(_doc("non_gaussian", model={"H": 0.3, "q": 2}))
    assert "model.H" in _errors_by_field(
        _doc("asclt_general_f", model={"H": 0.6, "f": "arctan", "expansion_order": 9})
    )
    assert "model.f" in _errors_by_field(
        _doc("asclt_general_f", model={"H": 0.3, "f": "mystery", "expansion_order": 9})
    )
    assert "model.H" in _errors_by_field(
        _doc("sigma_limits", model={"H": 0.9, "q": 2})
    )


def test_validate_experiment_coherence():
    assert "n_max" in _errors_by_field(_doc("delta_exactness", n_max=8192))
    assert "seeds.replicates" in _errors_by_field(
        _doc("delta_exactness", seeds={"master_seed": 1, "replicates": 50})
    )
    assert "n_max" in _errors_by_field(_doc("non_gaussian", n_max=1000))
    assert "n_grid" in _errors_by_field(
        _doc("asclt_fbm", n_grid=[8192, 16384], n_max=16384)
    )


def test_defaults_fill_in():
    cfg, errors = validate_config(_doc("asclt_fbm"))
    assert errors == []
    assert cfg.master_seed == SEED
    assert cfg.replicates == 100
    assert cfg.model == {"H": 0.5}
    assert cfg.out_dir == "runs/asclt_fbm"
    assert cfg.workers == 1
    assert cfg.tolerances == {"ks_final_max": 0.35}


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigValidationError) as exc:
        load_config(tmp_path / "missing.json")
    assert exc.value.errors[0].field == "<file>"
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  broken\n}")
    with pytest.raises(ConfigValidationError) as exc:
        load_config(bad)
    assert exc.value.errors[0].field == "<json>"
    assert "line 2" in exc.value.errors[0].reason


def _write_config(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_main_validate_exit_codes(tmp_path, capsys):
    good = _write_config(tmp_path, "good.json", _doc("kernels_decay"))
    assert main(["validate", "--config", good]) == 0
    assert "ok: valid kernels_decay config" in capsys.readouterr().out
    bad = _write_config(
        tmp_path, "bad.json", _doc("asclt_hermite_crit", model={"H": 0.7, "q": 2})
    )
    assert main(["validate", "--config", bad]) == 1
    assert "model.H" in capsys.readouterr().err


def test_run_reports_identical_across_workers(tmp_path):
    doc = _doc(
        "delta_exactness",
        model={"H": 0.8},
        n_max=128,
        n_grid=[128],
        seeds={"master_seed": SEED, "replicates": 200},
        t_grid=[1.0],
    )
    cfg_path = _write_config(tmp_path, "delta.json", doc)
    out1, out2 = tmp_path / "w1", tmp_path / "w2"
    assert main(["run", "--config", cfg_path, "--out", str(out1)]) == 0
    assert main(
        ["run", "--config", cfg_path, "--out", str(out2), "--workers", "2"]
    ) == 0
    r1 = (out1 / "report.json").read_bytes()
    r2 = (out2 / "report.json").read_bytes()
    assert r1 == r2
    meta1 = json.loads((out1 / "run_meta.json").read_text())
    meta2 = json.loads((out2 / "run_meta.json").read_text())
    assert meta1["workers"] == 1 and meta2["workers"] == 2

    report = json.loads(r1)
    assert report["verdict"] == "consistent"
    assert report["results"]["max_abs_z"] <= 4.0
    assert "workers" not in report["config"]
    assert report["versions"]["asclt_lab"]
    csv_lines = (out1 / "delta.csv").read_text().splitlines()
    assert csv_lines[0] == "n,t,delta_sq_mc,delta_sq_exact,stderr"
    assert len(csv_lines) == 2


def test_run_seed_override(tmp_path):
    doc = _doc(
        "delta_exactness",
        n_max=64,
        n_grid=[64],
        seeds={"master_seed": SEED, "replicates": 150},
        t_grid=[1.0],
    )
    cfg_path = _write_config(tmp_path, "delta.json", doc)
    out = tmp_path / "seeded"
    assert main(
        ["run", "--config", cfg_path, "--out", str(out), "--seed", "7"]
    ) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["seeds"]["master_seed"] == 7


def test_run_kernels_decay(tmp_path):
    doc = _doc("kernels_decay", n_grid=[64, 256, 1024], n_max=1024)
    cfg_path = _write_config(tmp_path, "kern.json", doc)
    out = tmp_path / "kern"
    assert main(["run", "--config", cfg_path, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    rows = report["results"]["contractions"]
    assert len(rows) == 1 and rows[0]["fitted_slope"] < 0.0
    lines = (out / "contractions.csv").read_text().splitlines()
    assert lines[0] == "n,r,contraction_norm_sq"
    assert len(lines) == 4


def test_run_sigma_limits_verdicts(tmp_path):
    crit = _doc("sigma_limits", n_grid=[10000, 100000], n_max=100000)
    out = tmp_path / "crit"
    assert main(
        ["run", "--config", _write_config(tmp_path, "c.json", crit), "--out", str(out)]
    ) == 2
    report = json.loads((out / "report.json").read_text())
    assert report["results"]["limit"] == pytest.approx(0.5625)
    assert report["results"]["monotone_approach"] is True
    assert report["results"]["within"] is False

    sub = _doc(
        "sigma_limits",
        model={"H": 0.3, "q": 2},
        n_grid=[1000, 10000],
        n_max=10000,
        tolerances={"rel_sigma": 0.01},
    )
    out = tmp_path / "sub"
    assert main(
        ["run", "--config", _write_config(tmp_path, "s.json", sub), "--out", str(out)]
    ) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["results"]["regime"] == "subcritical"
    assert report["results"]["final_rel_gap"] <= 0.01


def test_run_asclt_fbm_small(tmp_path):
    doc = _doc(
        "asclt_fbm",
        n_grid=[64, 256, 1024],
        n_max=1024,
        seeds={"master_seed": SEED, "replicates": 60},
        t_grid=[1.0],
        tolerances={"ks_final_max": 0.5},
    )
    out = tmp_path / "fbm"
    assert main(
        ["run", "--config", _write_config(tmp_path, "f.json", doc), "--out", str(out)]
    ) == 0
    report = json.loads((out / "report.json").read_text())
    res = report["results"]
    assert res["ks"]["decreasing_overall"] is True
    assert res["il"]["in_verdict"] is True
    assert res["il"]["verdict"] == "consistent"
    assert res["criteria"]["verdict"] == "consistent"
    ks_lines = (out / "ks.csv").read_text().splitlines()
    assert ks_lines[0] == "n,seed,ks_distance"
    assert len(ks_lines) == 1 + 3 * 60


def test_run_non_gaussian_flagged(tmp_path):
    doc = _doc(
        "non_gaussian",
        n_max=1024,
        n_grid=[64, 256, 1024],
        seeds={"master_seed": SEED, "replicates": 15},
        t_grid=[1.0],
    )
    out = tmp_path / "ng"
    assert main(
        ["run", "--config", _write_config(tmp_path, "n.json", doc), "--out", str(out)]
    ) == 2
    report = json.loads((out / "report.json").read_text())
    res = report["results"]
    assert report["verdict"] == "flagged"
    assert res["criteria"]["verdict"] == "flagged"
    assert res["zn_moment"]["within"] is True
    assert res["il"]["in_verdict"] is False
    assert "separation" in res and res["separation"]["ratio"] > 0.0


def test_run_malliavin_bounds_small(tmp_path):
    doc = _doc(
        "malliavin_bounds",
        n_max=512,
        n_grid=[512],
        seeds={"master_seed": SEED, "replicates": 120},
        t_grid=[0.5, 1.0],
    )
    out = tmp_path / "mal"
    assert main(
        ["run", "--config", _write_config(tmp_path, "m.json", doc), "--out", str(out)]
    ) == 0
    report = json.loads((out / "report.json").read_text())
    res = report["results"]
    assert abs(res["dg_norm"]["z"]) <= 4.0
    assert all(row["holds"] for row in res["cf_gap"])
    assert res["co1"]["violates_printed"] is True
    assert res["co2"]["violates_printed"] is True
    assert res["co2"]["violates_first_power"] is False
    assert all(row["holds"] for row in res["gebelein"]["rows"])
    assert (out / "cf_gap.csv").read_text().startswith("n,t,cf_gap_mc,cf_gap_bound")
    geb_lines = (out / "gebelein.csv").read_text().splitlines()
    assert geb_lines[0] == "lag,cov_mc,se,bound,holds"
    assert len(geb_lines) == 22


def test_run_bad_config_exit_one(tmp_path, capsys):
    bad = _write_config(tmp_path, "bad.json", _doc("delta_exactness", n_max=8192))
    assert main(["run", "--config", bad]) == 1
    assert "n_max" in capsys.readouterr().err
