"""
Tests for dataset loading, splits, presets, run records and the CLI.
"""

import io
import json
import os
import sys

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

sys.path.append(os.path.join(os.path.dirname(__file__), 'backend'))

import cli
from deep_wishart import harness
from deep_wishart.errors import DomainError, EmptyDataset, ParseError, ShapeMismatch, UnknownPreset
from deep_wishart.harness import DatasetSpec, RunRecord
from deep_wishart.inference import TrainSchedule
from deep_wishart.model import DeepWishartProcess, ModelConfig


def write_csv(path, rows, header=None):
    with open(path, "w") as f:
        if header:
            f.write(header + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")
    return str(path)


def regression_csv(tmp_path, n=20, name="data.csv"):
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, size=(n, 2))
    y = np.sin(x[:, 0]) + 0.5 * x[:, 1] + 0.1 * rng.normal(size=n)
    return write_csv(tmp_path / name, np.column_stack([x, y]).tolist())


def tiny_config():
    return ModelConfig(depth=1, inducing=5, batch_size=16, train_samples=2, eval_samples=3)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def test_load_csv_splits_target(tmp_path):
    path = write_csv(tmp_path / "a.csv", [[1, 2, 3], [4, 5, 6], [7, 8, 9]])
    x, y = harness.load_csv(DatasetSpec(path))
    np.testing.assert_array_equal(x, [[1, 2], [4, 5], [7, 8]])
    np.testing.assert_array_equal(y, [3, 6, 9])
    x, y = harness.load_csv(DatasetSpec(path, target_column=0))
    np.testing.assert_array_equal(y, [1, 4, 7])
    assert x.shape == (3, 2)


def test_load_csv_header(tmp_path):
    path = write_csv(tmp_path / "h.csv", [[1, 2], [3, 4]], header="x,y")
    with pytest.raises(ParseError) as exc:
        harness.load_csv(DatasetSpec(path))
    assert (exc.value.row, exc.value.col) == (0, 0)
    x, y = harness.load_csv(DatasetSpec(path, skip_header=True))
    assert x.shape == (2, 1)


def test_load_csv_reports_bad_cell(tmp_path):
    path = write_csv(tmp_path / "b.csv", [[1, 2], [3, "oops"]])
    with pytest.raises(ParseError) as exc:
        harness.load_csv(DatasetSpec(path))
    assert (exc.value.row, exc.value.col) == (1, 1)
    assert exc.value.to_dict()["kind"] == "ParseError"


def test_load_csv_reports_ragged_rows(tmp_path):
    long_row = tmp_path / "long.csv"
    long_row.write_text("1,2,3\n4,5,6,7\n")
    with pytest.raises(ParseError) as exc:
        harness.load_csv(DatasetSpec(str(long_row)))
    assert (exc.value.row, exc.value.col) == (1, 3)
    assert "4 fields" in exc.value.message
    short_row = tmp_path / "short.csv"
    short_row.write_text("1,2,3\n4,5\n")
    with pytest.raises(ParseError) as exc:
        harness.load_csv(DatasetSpec(str(short_row)))
    assert (exc.value.row, exc.value.col) == (1, 2)


def test_load_csv_empty_and_narrow(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(EmptyDataset):
        harness.load_csv(DatasetSpec(str(empty)))
    header_only = write_csv(tmp_path / "ho.csv", [], header="x,y")
    with pytest.raises(EmptyDataset):
        harness.load_csv(DatasetSpec(header_only, skip_header=True))
    with pytest.raises(ShapeMismatch):
        harness.load_csv(DatasetSpec(write_csv(tmp_path / "one.csv", [[1], [2]])))


def test_random_split_is_disjoint_and_exhaustive():
    spec = DatasetSpec("unused.csv", split_seed=3, split_index=1)
    train, test = harness.split_indices(50, spec)
    assert len(train) == 45 and len(test) == 5
    assert not set(train) & set(test)
    assert sorted(np.concatenate([train, test])) == list(range(50))
    again, _ = harness.split_indices(50, spec)
    np.testing.assert_array_equal(train, again)
    other, _ = harness.split_indices(50, DatasetSpec("unused.csv", split_seed=3, split_index=2))
    assert not np.array_equal(train, other)


def test_split_file(tmp_path):
    split = tmp_path / "train.txt"
    split.write_text("4 0 2\n")
    train, test = harness.split_indices(6, DatasetSpec("unused.csv", split_file=str(split)))
    np.testing.assert_array_equal(train, [0, 2, 4])
    np.testing.assert_array_equal(test, [1, 3, 5])
    split.write_text("9\n")
    with pytest.raises(DomainError):
        harness.split_indices(6, DatasetSpec("unused.csv", split_file=str(split)))


def test_split_rejects_bad_fraction():
    with pytest.raises(DomainError):
        harness.split_indices(10, DatasetSpec("unused.csv", train_fraction=0.0))


def test_standardize():
    x_train = np.array([[1.0, 5.0], [3.0, 5.0]])
    y_train = np.array([2.0, 4.0])
    xs, ys, xt, yt, st = harness.standardize(x_train, y_train, np.array([[2.0, 5.0]]), np.array([3.0]))
    np.testing.assert_allclose(xs[:, 0], [-1.0, 1.0])
    np.testing.assert_allclose(xs[:, 1], [0.0, 0.0])
    assert st.x_std[1] == harness.STD_FLOOR
    np.testing.assert_allclose(yt, [[0.0]])
    np.testing.assert_allclose(st.inverse_y(ys), y_train[:, None], atol=1e-12)
    np.testing.assert_allclose(st.inverse_x(xs), x_train, atol=1e-12)
    restored = harness.Standardizer.from_arrays(st.to_arrays())
    np.testing.assert_array_equal(restored.y_std, st.y_std)


# ---------------------------------------------------------------------------
# Presets and records
# ---------------------------------------------------------------------------

def test_presets():
    ids = [p["id"] for p in harness.list_presets()]
    assert "full-schedule" in ids and "desk-scale" in ids
    preset = harness.load_preset("desk-scale")
    assert ModelConfig.from_dict(preset["model"]).inducing == 20
    assert TrainSchedule.from_dict(preset["schedule"]).steps == 2000
    with pytest.raises(UnknownPreset):
        harness.load_preset("missing")


def make_record(**overrides):
    values = dict(dataset="d.csv", seed=1, config={"model": {"depth": 2, "inducing": 10}},
                  elbo_per_point=-1.25, test_loglik=-0.5, wall_time=3.0, code_hash="abc", steps=10)
    values.update(overrides)
    return RunRecord(**values)


def test_run_record_roundtrip(tmp_path):
    record = make_record()
    path = str(tmp_path / "run.json")
    record.save(path)
    assert RunRecord.load(path) == record
    assert RunRecord.from_json(record.to_json()).digest() == record.digest()


def test_digest_ignores_wall_time():
    assert make_record(wall_time=1.0).digest() == make_record(wall_time=99.0).digest()
    assert make_record(seed=2).digest() != make_record().digest()
    assert len(make_record().digest()) == 64


def test_code_hash_is_stable():
    assert harness.code_hash() == harness.code_hash()
    assert len(harness.code_hash()) == 40


def test_results_workbook(tmp_path):
    records = [make_record(), make_record(seed=2, test_loglik=None)]
    data = harness.write_results_workbook(records, str(tmp_path / "runs.xlsx"))
    ws = load_workbook(io.BytesIO(data)).active
    assert ws.title == "DWP Runs"
    assert [c.value for c in ws[1]][:3] == ["Dataset", "Depth", "Inducing"]
    assert ws.max_row == 3
    assert ws.cell(row=2, column=2).value == 2
    assert ws.cell(row=3, column=7).value is None
    assert os.path.getsize(tmp_path / "runs.xlsx") == len(data)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def test_run_experiment_without_training(tmp_path):
    spec = DatasetSpec(regression_csv(tmp_path), train_fraction=0.8)
    record = harness.run_experiment(spec, tiny_config(), TrainSchedule(steps=0), 0)
    assert (record.n_train, record.n_test) == (16, 4)
    assert np.isfinite(record.elbo_per_point)
    assert np.isfinite(record.test_loglik)
    assert record.config["model"]["depth"] == 1


def test_run_experiment_is_reproducible(tmp_path):
    spec = DatasetSpec(regression_csv(tmp_path), train_fraction=0.8)
    out = str(tmp_path / "run")
    first = harness.run_experiment(spec, tiny_config(), TrainSchedule(steps=2), 4, out)
    second = harness.run_experiment(spec, tiny_config(), TrainSchedule(steps=2), 4)
    assert first.digest() == second.digest()
    for name in ("run.json", "checkpoint.npz", "trace.jsonl"):
        assert os.path.exists(os.path.join(out, name))
    assert RunRecord.load(os.path.join(out, "run.json")).digest() == first.digest()


def test_run_experiment_without_test_rows(tmp_path):
    spec = DatasetSpec(regression_csv(tmp_path), train_fraction=1.0)
    record = harness.run_experiment(spec, tiny_config(), TrainSchedule(steps=0), 0)
    assert record.n_test == 0
    assert record.test_loglik is None


def test_evaluate_checkpoint(tmp_path):
    spec = DatasetSpec(regression_csv(tmp_path), train_fraction=0.8)
    out = str(tmp_path / "run")
    harness.run_experiment(spec, tiny_config(), TrainSchedule(steps=1), 0, out)
    model, arrays = DeepWishartProcess.load(os.path.join(out, "checkpoint.npz"))
    assert set(arrays) == {"x_mean", "x_std", "y_mean", "y_std"}
    result = harness.evaluate_checkpoint(os.path.join(out, "checkpoint.npz"), spec, samples=2)
    assert result["rows"] == 20
    assert np.isfinite(result["test_loglik"])


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def output_lines(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    return lines


def test_cli_sample_prior(tmp_path, capsys):
    out = str(tmp_path / "g.csv")
    code = cli.main(["sample-prior", "--depth", "2", "--points", "4", "--seed", "1", "--out", out])
    assert code == 0
    gram = pd.read_csv(out, header=None).to_numpy()
    assert gram.shape == (4, 4)
    np.testing.assert_allclose(gram, gram.T, atol=1e-12)
    assert np.linalg.eigvalsh(gram).min() >= -1e-10
    summary = json.loads(output_lines(capsys)[-1])
    assert summary["ok"] and summary["shape"] == [4, 4]


def test_cli_sample_prior_needs_a_layer(tmp_path, capsys):
    code = cli.main(["sample-prior", "--depth", "0", "--points", "4", "--out", str(tmp_path / "g.csv")])
    assert code == 2
    assert json.loads(output_lines(capsys)[-1])["kind"] == "DomainError"


def test_cli_verify_numerics(tmp_path, capsys):
    report = str(tmp_path / "verify.json")
    assert cli.main(["verify", "--suite", "numerics", "--draws", "200", "--json", report]) == 0
    lines = output_lines(capsys)
    assert lines[-1] == "4/4 checks passed"
    assert all(line.startswith("PASS") for line in lines[:-1])
    with open(report) as f:
        assert len(json.load(f)) == 4


def test_cli_train_and_table(tmp_path, capsys):
    data = regression_csv(tmp_path)
    out = str(tmp_path / "run")
    code = cli.main(["train", "--data", data, "--depth", "1", "--inducing", "5", "--batch", "16",
                     "--samples", "2", "--eval-samples", "3", "--steps", "2", "--stl", "",
                     "--out-dir", out])
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert result["ok"] and result["steps"] == 2
    assert result["config"]["schedule"]["stl"] == []

    table = str(tmp_path / "runs.xlsx")
    assert cli.main(["table", os.path.join(out, "run.json"), "--out", table]) == 0
    assert load_workbook(table).active.max_row == 2


def test_cli_preset_with_override(tmp_path, capsys):
    data = regression_csv(tmp_path)
    code = cli.main(["train", "--data", data, "--preset", "desk-scale", "--inducing", "5",
                     "--samples", "1", "--eval-samples", "2", "--steps", "0"])
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert result["config"]["model"]["inducing"] == 5
    assert result["config"]["schedule"]["lr_drop_step"] == 1000


def test_cli_reports_bad_files(tmp_path, capsys):
    bad = write_csv(tmp_path / "bad.csv", [[1, 2], ["x", 3]])
    assert cli.main(["train", "--data", bad, "--steps", "0"]) == 2
    payload = json.loads(output_lines(capsys)[-1])
    assert payload["kind"] == "ParseError"
    assert (payload["row"], payload["col"]) == (1, 0)


def test_cli_reports_ragged_rows(tmp_path, capsys):
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("1,2,3\n4,5,6,7\n")
    assert cli.main(["train", "--data", str(ragged), "--steps", "0"]) == 2
    payload = json.loads(output_lines(capsys)[-1])
    assert payload["kind"] == "ParseError"
    assert payload["row"] == 1
