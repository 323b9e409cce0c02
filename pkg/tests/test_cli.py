"""Command line interface: configs, reports, exit codes, determinism."""

import copy
import json
import math
import os

import numpy as np
import pytest

from slqt.cli import (EXIT_CODES, canonical_json, exit_code_for, load_report,
                      main, parse_experiment_config)
from slqt.errors import (ConfigError, MaxIterExceeded, NonPositiveP,
                         RankDeficient, SlqtError)

SCALAR_CONFIG = {
    "mode": "data_driven",
    "plant": {"A": [[0.0]], "B": [[1.0]], "C": [[0.1]], "D": [[0.0]],
              "H": [[1.0]]},
    "reference": {"A_d": [[0.0]], "H_d": [[1.0]], "x_d0": [1.0],
                  "cases": [[[1.0]], [[2.0]]]},
    "cost": {"Q": [[1.0]], "R": [[1.0]]},
    "sim": {"h": 1e-3, "T_s": 0.01, "T": 0.1, "l": 201, "n_paths": 60,
            "base_seed": 3},
    "probing": {"amplitude": 1.0, "count": 10, "freq_range": [-50.0, 50.0],
                "seed": 5},
}


def write_config(tmp_path, overrides=None, name="cfg.json"):
    cfg = copy.deepcopy(SCALAR_CONFIG)
    for key, val in (overrides or {}).items():
        if val is None:
            cfg.pop(key, None)
        else:
            cfg[key] = val
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_canonical_json_is_sorted_and_stable():
    text = canonical_json({"b": 1, "a": [1.5, 2, True, None], "c": "x"})
    assert text == '{"a":[1.5,2,true,null],"b":1,"c":"x"}'
    assert canonical_json({"v": -0.0}) == '{"v":0}'
    assert canonical_json({"v": 0.1}) == '{"v":0.10000000000000001}'
    third = float(np.float64(1.0) / 3.0)
    assert float(json.loads(canonical_json({"v": third}))["v"]) == third


def test_canonical_json_rejects_non_finite():
    with pytest.raises(ConfigError):
        canonical_json({"v": math.inf})
    with pytest.raises(ConfigError):
        canonical_json({"v": math.nan})


def test_exit_code_mapping():
    assert exit_code_for(RankDeficient("r")) == EXIT_CODES["rank"]
    assert exit_code_for(MaxIterExceeded("m")) == EXIT_CODES["contract"]
    assert exit_code_for(NonPositiveP("p")) == EXIT_CODES["numerical"]
    assert exit_code_for(ConfigError("c")) == EXIT_CODES["config"]
    assert exit_code_for(SlqtError("s")) == EXIT_CODES["numerical"]


def test_parse_config_validation_matrix():
    good = parse_experiment_config(copy.deepcopy(SCALAR_CONFIG))
    assert good.mode == "data_driven"
    assert len(good.h_d_cases) == 2
    for mutate in (
        {"mode": "mystery"},
        {"plant": None},
        {"reference": {"A_d": [[0.0]], "H_d": [[1.0, 0.0]], "x_d0": [1.0]}},
        {"cost": {"Q": [[1.0]], "R": [[0.0]]}},
        {"hyper": {"alpha0": 2.0}},
        {"sim": {"h": 1e-3, "T_s": 1e-4, "T": 0.1, "l": 10}},
        {"probing": {"amplitude": 1.0}},
        {"tracking": {"schedule": [[7, 1.0]]}},
    ):
        cfg = copy.deepcopy(SCALAR_CONFIG)
        for k, v in mutate.items():
            if v is None:
                cfg.pop(k, None)
            else:
                cfg[k] = v
        with pytest.raises(ConfigError):
            parse_experiment_config(cfg)


def test_parse_config_shadow_constraints():
    cfg = copy.deepcopy(SCALAR_CONFIG)
    cfg["mode"] = "shadow"
    with pytest.raises(ConfigError):
        parse_experiment_config(cfg)  # no shadow block
    cfg["shadow"] = {"A_a": [[-1.0]], "x_a0": [0.0], "F_a": [[0.0]],
                     "y_a0": [1.0],
                     "probing": {"amplitude": 1.0, "count": 5,
                                 "freq_range": [-10.0, 10.0], "seed": 2}}
    with pytest.raises(ConfigError):
        parse_experiment_config(cfg)  # plant probing still present
    cfg.pop("probing")
    parsed = parse_experiment_config(cfg)
    assert parsed.shadow is not None
    cfg2 = copy.deepcopy(cfg)
    cfg2["plant"]["D"] = [[0.5]]
    with pytest.raises(ConfigError):
        parse_experiment_config(cfg2)  # shadow route requires D = 0


def test_missing_config_file_is_a_config_error(tmp_path, capsys):
    rc = main(["solve", "--config", str(tmp_path / "nope.json")])
    assert rc == EXIT_CODES["config"]
    assert "nope.json" in capsys.readouterr().err


def test_invalid_json_is_a_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = main(["solve", "--config", str(bad)])
    assert rc == EXIT_CODES["config"]


def test_solve_writes_report_and_prints_gain(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    rc = main(["solve", "--config", cfg, "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    p_true = (0.01 + np.sqrt(4.0001)) / 2.0
    assert f"{p_true:.4f}"[:5] in text
    report = load_report(str(out / "report.json"))
    assert not report.failed
    mb = report.payload["model_based"]
    assert mb["K_star"][0][0] == pytest.approx(p_true, abs=1e-9)
    assert mb["sare_residual"] < 1e-10
    assert mb["closed_loop_abscissa"] < 0.0
    assert mb["certification"] == "validated"
    assert (out / "model_based_trace.csv").exists()
    header = (out / "model_based_trace.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["iteration", "phase", "alpha"]


def test_learn_fb_payload_is_byte_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    out_a, out_b, out_c = (tmp_path / x for x in ("a", "b", "c"))
    assert main(["learn-fb", "--config", cfg, "--out", str(out_a)]) == 0
    assert main(["learn-fb", "--config", cfg, "--out", str(out_b)]) == 0
    assert main(["learn-fb", "--config", cfg, "--out", str(out_c),
                 "--seed", "17"]) == 0
    pa = load_report(str(out_a / "report.json"))
    pb = load_report(str(out_b / "report.json"))
    pc = load_report(str(out_c / "report.json"))
    assert pa.payload_text() == pb.payload_text()
    assert pa.payload_text() != pc.payload_text()
    # timestamps live outside the payload so they cannot break determinism
    doc = json.loads((out_a / "report.json").read_text())
    assert set(doc) >= {"schema", "created", "failed", "timing_s", "payload"}
    assert "created" not in doc["payload"]


def test_learn_ff_report_covers_cases_and_proportionality(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "ff"
    assert main(["learn-ff", "--config", cfg, "--out", str(out),
                 "--validate-with-model"]) == 0
    report = load_report(str(out / "report.json"))
    cases = report.payload["feedforward_cases"]
    assert [c["case"] for c in cases] == [1, 2]
    f1 = np.asarray(cases[0]["F"])
    f2 = np.asarray(cases[1]["F"])
    np.testing.assert_allclose(f2, 2.0 * f1, rtol=1e-10)
    assert report.payload["data_driven"]["vs_model"]["K_rel_err_2norm"] < 0.05
    csv_rows = (out / "ff_cases.csv").read_text().strip().splitlines()
    assert csv_rows[0].split(",")[0] == "case"
    assert len(csv_rows) == 3


def test_rank_deficient_run_exits_3_and_leaves_marker(tmp_path, capsys):
    cfg = write_config(tmp_path, overrides={
        "probing": None,
        "plant": {"A": [[-0.2]], "B": [[1.0]], "C": [[0.1]], "D": [[0.05]],
                  "H": [[1.0]]},
    })
    out = tmp_path / "rank"
    rc = main(["learn-fb", "--config", cfg, "--out", str(out)])
    assert rc == EXIT_CODES["rank"]
    report = load_report(str(out / "report.json"))
    assert report.failed
    assert "rank" in report.error["type"].lower() or "Rank" in report.error["type"]


def test_iteration_cap_exits_5(tmp_path):
    cfg = write_config(tmp_path, overrides={"hyper": {"max_iter": 1}})
    rc = main(["learn-fb", "--config", cfg, "--out", str(tmp_path / "cap")])
    assert rc == EXIT_CODES["contract"]


def test_collect_writes_loadable_datasets(tmp_path):
    from slqt.sim import load_dataset

    cfg = write_config(tmp_path)
    out = tmp_path / "data"
    assert main(["collect", "--config", cfg, "--out", str(out)]) == 0
    report = load_report(str(out / "report.json"))
    entries = report.payload["datasets"]
    assert len(entries) == 1
    ds = load_dataset(os.path.join(str(out), entries[0]["dir"]))
    assert ds.config.n_paths == 60
    assert ds.discount == pytest.approx(0.45)
    assert ds.x_d is not None


def test_track_produces_tracking_csv(tmp_path):
    cfg = write_config(tmp_path, overrides={
        "tracking": {"schedule": [[1, 1.0], [2, 1.0]], "h": 0.01,
                     "n_paths": 10, "base_seed": 9}})
    out = tmp_path / "trk"
    assert main(["track", "--config", cfg, "--out", str(out)]) == 0
    report = load_report(str(out / "report.json"))
    segs = report.payload["tracking"]["segments"]
    assert [s["case"] for s in segs] == [1, 2]
    assert all(np.isfinite(s["rms_error"]) for s in segs)
    lines = (out / "tracking.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "t"
    assert len(lines) == 2 + round(2.0 / 0.01)


def test_report_reemit_is_identical(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "solve"
    assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    src = str(out / "report.json")
    assert main(["report", src]) == 0
    shown = capsys.readouterr().out
    assert json.loads(shown)["payload"] == json.loads(open(src).read())["payload"]
    # canonical re-encode of a loaded report reproduces the payload bytes
    rep = load_report(src)
    assert canonical_json(json.loads(open(src).read())["payload"]) == rep.payload_text()


def test_report_rejects_other_schemas(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps({"schema": "slqt-report/999", "payload": {}}))
    with pytest.raises(ConfigError):
        load_report(str(p))
