import csv
import json
import math

import pytest

from molt.cli import AblationGrid, main, summarize_rows
from molt.config import ConfigError

SMALL = {
    "backbone": {"depth": 4, "width": 8, "heads": 2, "n_tokens": 4, "seed": 0},
    "stage_plan": {"early": [1, 2], "mid": [3], "late": [4], "adapted": ["late"]},
    "fdm": {"n_uda": 1, "n_cda": 1, "n_tokens": 2, "heads": 2},
    "data": {"regime": "audio-only", "num_classes": 2, "n": 60},
    "optim": {"epochs": 2, "batch_size": 16},
}


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_run_writes_five_files_and_replays(cfg_path, tmp_path):
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    names = {"metrics.json", "curves.csv", "fusion_weights.csv", "token_cosines.csv", "params.json"}
    assert names <= {p.name for p in (tmp_path / "a").iterdir()}
    assert (tmp_path / "a/metrics.json").read_bytes() == (tmp_path / "b/metrics.json").read_bytes()
    curves = rows(tmp_path / "a/curves.csv")
    assert [r["epoch"] for r in curves] == ["1", "2"]
    alpha = rows(tmp_path / "a/fusion_weights.csv")
    assert {r["modality"] for r in alpha} == {"audio", "visual"}
    assert all(r["layer_index"] == "4" and float(r["alpha"]) == pytest.approx(1.0) for r in alpha)


def test_seed_override_changes_metrics(cfg_path, tmp_path):
    main(["run", str(cfg_path), "--out", str(tmp_path / "a")])
    main(["run", str(cfg_path), "--out", str(tmp_path / "b"), "--seed", "3"])
    a = json.loads((tmp_path / "a/metrics.json").read_text())
    b = json.loads((tmp_path / "b/metrics.json").read_text())
    assert b["config"]["seed"] == 3 and a["epochs"] != b["epochs"]


def test_overlapping_stage_plan_exits_1(tmp_path, capsys):
    bad = json.loads(json.dumps(SMALL))
    bad["stage_plan"]["mid"] = [2, 3]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "stage_plan" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_invalid_json_exits_1(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{")
    assert main(["run", str(p)]) == 1


def test_divergence_exits_2(tmp_path, capsys):
    raw = json.loads(json.dumps(SMALL))
    raw["optim"].update(lr=1e200, schedule="constant")
    p = tmp_path / "hot.json"
    p.write_text(json.dumps(raw))
    with pytest.warns(RuntimeWarning):
        assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "diverged" in capsys.readouterr().err


def test_ablation_rows_and_failed_cells(cfg_path, tmp_path):
    grid = {"axis": "token-count", "values": [1, 2], "seeds": [0, 1], "base_config": cfg_path.name}
    g = tmp_path / "grid.json"
    g.write_text(json.dumps(grid))
    assert main(["ablate", str(g), "--out", str(tmp_path / "abl")]) == 0
    got = rows(tmp_path / "abl/ablation.csv")
    assert len(got) == 4 and all(r["status"] == "ok" for r in got)
    summary = rows(tmp_path / "abl/summary.csv")
    assert [r["value"] for r in summary] == ["1", "2"]
    assert float(summary[0]["median_trainable_fraction"]) < float(summary[1]["median_trainable_fraction"])


def test_failing_cell_is_recorded(cfg_path, tmp_path):
    raw = json.loads(json.dumps(SMALL))
    raw["optim"].update(lr=1e200, schedule="constant")
    grid = AblationGrid.from_dict({"axis": "tor-lambda", "values": [0.0], "seeds": [0], "base_config": raw})
    with pytest.warns(RuntimeWarning):
        from molt.cli import run_ablation
        out = run_ablation(grid, tmp_path / "abl")
    assert out[0]["status"] == "failed" and "TrainingDiverged" in out[0]["error"]
    assert rows(tmp_path / "abl/summary.csv")[0]["n_failed"] == "1"


def test_stage_plan_all_expands_to_seven(cfg_path):
    raw = json.loads(json.dumps(SMALL))
    raw["stage_plan"]["adapted"] = ["early"]
    grid = AblationGrid.from_dict({"axis": "stage-plan", "values": "all", "seeds": [0, 1], "base_config": raw})
    assert len(grid.values) == 7
    assert grid.cell_config(["early", "late"], 1).adapted_layers == [1, 2, 4]


@pytest.mark.parametrize("raw, field", [
    ({"axis": "depth", "values": [1]}, "axis"),
    ({"axis": "token-count", "values": []}, "values"),
    ({"axis": "token-count", "values": [0]}, "values[0].fdm.n_tokens"),
    ({"axis": "fusion-method", "values": ["max"]}, "values[0].fusion"),
    ({"axis": "tor-lambda", "values": [0.1], "seeds": []}, "seeds"),
])
def test_grid_validation(raw, field):
    with pytest.raises(ConfigError) as exc:
        AblationGrid.from_dict(raw)
    assert field in exc.value.errors


def test_summary_is_seed_order_invariant():
    base = [{"axis": "a", "value": "x", "seed": s, "status": "ok", "test_accuracy": acc,
             "trainable_fraction": 0.1, "activation_elements": 5} for s, acc in enumerate([0.2, 0.9, 0.5])]
    assert summarize_rows(base) == summarize_rows(base[::-1])
    assert summarize_rows(base)[0]["median_test_accuracy"] == 0.5


def test_probe_residual_only_and_drift(cfg_path, tmp_path):
    assert main(["probe", str(cfg_path), "--stack", "residual-only", "--out", str(tmp_path / "r")]) == 0
    assert all(float(r["mean_cosine"]) == 1.0 for r in rows(tmp_path / "r/similarity.csv"))
    angles = [0.1, 0.7, 1.3]
    assert main(["probe", str(cfg_path), "--stack", "drift", "--angles", *map(str, angles),
                 "--out", str(tmp_path / "d")]) == 0
    got = rows(tmp_path / "d/similarity.csv")
    assert len(got) == 2 * len(angles)
    for r in got:
        assert abs(float(r["mean_cosine"]) - math.cos(angles[int(r["layer_index"]) - 1])) < 1e-6


def test_probe_default_seeds_differ(cfg_path, tmp_path):
    main(["probe", str(cfg_path), "--out", str(tmp_path / "a")])
    main(["probe", str(cfg_path), "--out", str(tmp_path / "b"), "--seed", "1"])
    a = [float(r["mean_cosine"]) for r in rows(tmp_path / "a/similarity.csv")]
    b = [float(r["mean_cosine"]) for r in rows(tmp_path / "b/similarity.csv")]
    assert a != b and all(-1 <= v <= 1 for v in a + b)


def test_drift_without_angles_exits_1(cfg_path, tmp_path):
    assert main(["probe", str(cfg_path), "--stack", "drift", "--out", str(tmp_path / "d")]) == 1


def test_gradcheck_verb(tmp_path):
    tiny = {"backbone": {"depth": 4, "width": 4, "heads": 2, "n_tokens": 4},
            "stage_plan": {"early": [1, 2], "mid": [3], "late": [4], "adapted": ["late"]},
            "fdm": {"n_uda": 1, "n_cda": 1, "n_tokens": 2, "heads": 2}}
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(tiny))
    assert main(["gradcheck", str(p), "--out", str(tmp_path / "g")]) == 0
    rep = json.loads((tmp_path / "g/gradcheck.json").read_text())
    assert rep["max_rel_error"] < rep["tolerance"] == 1e-5
    big = tmp_path / "default.json"
    big.write_text("{}")
    assert main(["gradcheck", str(big), "--out", str(tmp_path / "g2")]) == 1
