from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner
from pydantic import ValidationError

from sketchlu import __version__
from sketchlu.core.exceptions import exit_code_for
from sketchlu.core.linalg import TridiagonalMatrix
from sketchlu.main import create_cli
from sketchlu.models.mlp import init_mlp
from sketchlu.repositories.checkpoint_repo import CheckpointRepo
from sketchlu.repositories.idx_repo import write_idx

DATA = ["--d", "4", "--n", "100", "--data-seed", "3"]


@pytest.fixture
def cli():
    return create_cli()


@pytest.fixture
def runner():
    return CliRunner()


def _run(runner, cli, args):
    return runner.invoke(cli, args, catch_exceptions=False)


def _pipeline(runner, cli, root, *, k0="0", eigenvalues=False):
    root.mkdir(parents=True, exist_ok=True)
    model, basis, scores = root / "model.mlpc", root / "basis.sklb", root / "scores.csv"
    train = _run(runner, cli, ["train", *DATA, "--hidden", "8", "--epochs", "3", "--out", str(model)])
    assert train.exit_code == 0, train.output
    precompute_args = [
        "precompute", *DATA, "--checkpoint", str(model), "--k0", k0, "--k1", "4", "--s", "32", "--out", str(basis),
    ]
    if eigenvalues:
        precompute_args.append("--use-eigenvals")
    precompute = _run(runner, cli, precompute_args)
    assert precompute.exit_code == 0, precompute.output
    score = _run(runner, cli, ["score", *DATA, "--checkpoint", str(model), "--basis", str(basis), "--out", str(scores)])
    assert score.exit_code == 0, score.output
    return model, basis, scores


class TestPipelineCommands:
    """train -> precompute -> score."""

    def test_writes_every_artifact(self, runner, cli, tmp_path):
        model, basis, scores = _pipeline(runner, cli, tmp_path)
        for path in (model, basis, scores):
            assert path.is_file()
        assert (tmp_path / "model.training_log.csv").is_file()
        assert (tmp_path / "basis.json").is_file()

        frame = pd.read_csv(scores)
        assert list(frame.columns) == ["dataset_id", "point_index", "method", "score"]
        assert set(frame["dataset_id"]) == {"id_test", "ood_test"}
        assert len(frame) == 50
        assert (frame["score"] >= 0).all()

        clamped = pd.read_csv(tmp_path / "scores.clamped.csv")
        assert list(clamped.columns) == ["dataset_id", "point_index", "raw_score"]
        assert (clamped["raw_score"] < 0).all()

        summary = json.loads((tmp_path / "scores.summary.json").read_text())
        assert 0.0 <= summary["metrics"]["auroc"] <= 1.0

    def test_byte_identical_reruns(self, runner, cli, tmp_path):
        first = _pipeline(runner, cli, tmp_path / "a")
        second = _pipeline(runner, cli, tmp_path / "b")
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_zero_epochs_keeps_initialization(self, runner, cli, tmp_path):
        out = tmp_path / "init.mlpc"
        result = _run(runner, cli, ["train", *DATA, "--hidden", "8", "--epochs", "0", "--seed", "5", "--out", str(out)])
        assert result.exit_code == 0
        expected = init_mlp((4, 8, 2), "tanh", seed=5).params.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(CheckpointRepo().load(out).params, expected)

    def test_dense_baselines(self, runner, cli, tmp_path):
        model, basis, _ = _pipeline(runner, cli, tmp_path, k0="3", eigenvalues=True)
        for method in ("le_exact", "lla"):
            out = tmp_path / f"{method}.csv"
            result = _run(
                runner, cli,
                ["score", *DATA, "--checkpoint", str(model), "--basis", str(basis), "--method", method, "--out", str(out)],
            )
            assert result.exit_code == 0, result.output
            assert (pd.read_csv(out)["method"] == method).all()

    def test_empty_split_writes_header_only(self, runner, cli, tmp_path):
        model, basis, _ = _pipeline(runner, cli, tmp_path)
        images = tmp_path / "empty.idx"
        write_idx(images, np.zeros((0, 2, 2), dtype=np.uint8))
        out = tmp_path / "empty.csv"
        result = _run(
            runner, cli,
            [
                "score", "--data-source", "idx", "--images", str(images), "--split", "id_test",
                "--checkpoint", str(model), "--basis", str(basis), "--out", str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        assert out.read_text() == "dataset_id,point_index,method,score\n"
        assert not (tmp_path / "empty.summary.json").exists()


class TestExitCodes:
    """Failures map to documented exit codes."""

    def test_lla_without_eigenvalues(self, runner, cli, tmp_path):
        model, basis, _ = _pipeline(runner, cli, tmp_path, k0="3", eigenvalues=False)
        result = _run(
            runner, cli,
            ["score", *DATA, "--checkpoint", str(model), "--basis", str(basis), "--method", "lla",
             "--out", str(tmp_path / "lla.csv")],
        )
        assert result.exit_code == 2

    def test_sketch_larger_than_padded_dimension(self, runner, cli, tmp_path):
        model = tmp_path / "model.mlpc"
        _run(runner, cli, ["train", *DATA, "--hidden", "8", "--epochs", "1", "--out", str(model)])
        result = _run(
            runner, cli,
            ["precompute", *DATA, "--checkpoint", str(model), "--s", "128", "--out", str(tmp_path / "b.sklb")],
        )
        assert result.exit_code == 2

    def test_basis_from_another_model(self, runner, cli, tmp_path):
        wide, narrow, basis = tmp_path / "wide.mlpc", tmp_path / "narrow.mlpc", tmp_path / "narrow.sklb"
        for hidden, out in (("8", wide), ("5", narrow)):
            trained = _run(runner, cli, ["train", *DATA, "--hidden", hidden, "--epochs", "1", "--out", str(out)])
            assert trained.exit_code == 0, trained.output
        precompute = _run(
            runner, cli,
            ["precompute", *DATA, "--checkpoint", str(narrow), "--k1", "3", "--s", "32", "--out", str(basis)],
        )
        assert precompute.exit_code == 0, precompute.output
        result = _run(
            runner, cli,
            ["score", *DATA, "--checkpoint", str(wide), "--basis", str(basis), "--out", str(tmp_path / "s.csv")],
        )
        assert result.exit_code == 2
        assert "model has p=58" in result.output

    def test_plain_validation_errors_are_input_errors(self):
        with pytest.raises(ValidationError) as info:
            TridiagonalMatrix(diag=[1.0, 2.0], offdiag=[0.1, 0.2])
        assert exit_code_for(info.value) == 2

    def test_missing_checkpoint(self, runner, cli, tmp_path):
        result = _run(runner, cli, ["score", *DATA, "--checkpoint", str(tmp_path / "absent.mlpc"),
                                    "--basis", str(tmp_path / "absent.sklb"), "--out", str(tmp_path / "s.csv")])
        assert result.exit_code == 2

    def test_invalid_flag_value(self, runner, cli, tmp_path):
        result = _run(runner, cli, ["precompute", "--k0", "0", "--k1", "0", "--out", str(tmp_path / "b.sklb")])
        assert result.exit_code == 2


class TestBenchCommands:
    """bench subcommands write reports."""

    def test_memory(self, runner, cli, tmp_path):
        result = _run(runner, cli, ["bench", "memory", "--p", "1000", "--s", "64", "--k", "8", "--out-dir", str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert "query_floats\t1576" in result.output
        reports = list(tmp_path.glob("memory-*.json"))
        assert len([p for p in reports if not p.name.endswith(".timings.json")]) == 1

    def test_lemma1(self, runner, cli, tmp_path):
        args = ["bench", "lemma1", "--p", "256", "--k", "4", "--s", "256", "--trials", "5", "--out-dir", str(tmp_path)]
        result = _run(runner, cli, args)
        assert result.exit_code == 0, result.output
        report_path = [line for line in result.output.splitlines() if line.endswith(".json")][-1]
        report = json.loads(open(report_path, encoding="utf-8").read())
        assert report["config"]["p"] == 256
        assert report["metrics"]["max"] <= 1e-10

    def test_version(self, runner, cli):
        result = _run(runner, cli, ["--version"])
        assert __version__ in result.output


@pytest.mark.slow
class TestEndToEndOod:
    """Two-gaussian OoD detection with default settings."""

    def test_slu_auroc(self, runner, cli, tmp_path):
        model, basis, scores = tmp_path / "m.mlpc", tmp_path / "b.sklb", tmp_path / "s.csv"
        assert _run(runner, cli, ["train", "--out", str(model)]).exit_code == 0
        assert _run(runner, cli, ["precompute", "--checkpoint", str(model), "--out", str(basis)]).exit_code == 0
        assert _run(runner, cli, ["score", "--checkpoint", str(model), "--basis", str(basis),
                                  "--out", str(scores)]).exit_code == 0
        summary = json.loads((tmp_path / "s.summary.json").read_text())
        assert summary["metrics"]["auroc"] >= 0.85
