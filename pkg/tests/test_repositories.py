from __future__ import annotations

import gzip
import json
import struct

import numpy as np
import pytest

from sketchlu.core.exceptions import BadMagic, DimensionMismatch, FormatError, MissingField, TruncatedFile
from sketchlu.core.sketch import sketch_new
from sketchlu.core.sketched_lanczos import preconditioned_sketched_lanczos, sketched_lanczos
from sketchlu.models.mlp import Activation, init_mlp
from sketchlu.models.report import ExperimentReport, ReportTable
from sketchlu.repositories.basis_repo import BasisRepo
from sketchlu.repositories.checkpoint_repo import CheckpointRepo
from sketchlu.repositories.idx_repo import load_idx, read_idx_array, write_idx
from sketchlu.repositories.report_repo import ReportRepo
from tests.conftest import philox


class TestIdxRepo:
    """IDX image / label files."""

    def test_write_then_load(self, tmp_path):
        images = philox(0).integers(0, 256, size=(6, 4, 4), dtype=np.uint8)
        labels = np.arange(6, dtype=np.uint8) % 3
        write_idx(tmp_path / "img.idx", images)
        write_idx(tmp_path / "lab.idx", labels)

        ds = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx", name="digits")
        assert (ds.n, ds.d) == (6, 16)
        np.testing.assert_allclose(ds.inputs, images.reshape(6, 16) / 255.0)
        np.testing.assert_array_equal(ds.targets, labels)
        assert ds.manifest["image_shape"] == [4, 4]

    def test_gzip(self, tmp_path):
        images = np.full((2, 3, 3), 7, dtype=np.uint8)
        write_idx(tmp_path / "img.idx.gz", images)
        with gzip.open(tmp_path / "img.idx.gz", "rb") as fh:
            assert fh.read(4) == b"\x00\x00\x08\x03"
        np.testing.assert_array_equal(read_idx_array(tmp_path / "img.idx.gz"), images)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">BBBBI", 0, 0, 0x0D, 1, 3) + b"\x00" * 12)
        with pytest.raises(BadMagic):
            read_idx_array(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(struct.pack(">BBBBIII", 0, 0, 8, 3, 5, 4, 4) + b"\x01" * 10)
        with pytest.raises(TruncatedFile):
            load_idx(path)

    def test_label_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "img.idx", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "lab.idx", np.zeros(4, dtype=np.uint8))
        with pytest.raises(DimensionMismatch):
            load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")

    def test_empty_file_set(self, tmp_path):
        write_idx(tmp_path / "img.idx", np.zeros((0, 2, 2), dtype=np.uint8))
        ds = load_idx(tmp_path / "img.idx")
        assert (ds.n, ds.d) == (0, 4)


class TestCheckpointRepo:
    """MLPC checkpoints."""

    def test_round_trip_rounds_to_float32(self, tmp_path):
        model = init_mlp((3, 5, 2), Activation.relu, seed=1)
        repo = CheckpointRepo()
        loaded = repo.load(repo.save(model, tmp_path / "m.mlpc"))
        assert loaded.layer_dims == model.layer_dims
        assert loaded.activation == model.activation
        np.testing.assert_array_equal(loaded.params, model.params.astype(np.float32).astype(np.float64))

    def test_header_layout(self):
        buf = CheckpointRepo.encode(init_mlp((2, 4, 3), "tanh", seed=0))
        assert buf[:4] == b"MLPC"
        assert struct.unpack_from("<III", buf, 4) == (1, 0, 3)
        assert len(buf) == 16 + 3 * 4 + 27 * 4

    def test_bad_magic(self):
        buf = bytearray(CheckpointRepo.encode(init_mlp((2, 2), "tanh", seed=0)))
        buf[:4] = b"XXXX"
        with pytest.raises(BadMagic):
            CheckpointRepo().decode(bytes(buf))

    def test_truncated(self):
        buf = CheckpointRepo.encode(init_mlp((2, 4, 3), "tanh", seed=0))
        with pytest.raises(TruncatedFile):
            CheckpointRepo().decode(buf[:-4])

    def test_unknown_version(self):
        buf = bytearray(CheckpointRepo.encode(init_mlp((2, 2), "tanh", seed=0)))
        struct.pack_into("<I", buf, 4, 9)
        with pytest.raises(FormatError):
            CheckpointRepo().decode(bytes(buf))


class TestBasisRepo:
    """SKLB basis files."""

    def test_round_trip(self, tmp_path, small_fisher):
        sk = sketch_new(small_fisher.p, 128, seed=3, transform="dft")
        basis = sketched_lanczos(small_fisher.operator(), 8, sk, seed=4, retain_eigenvalues=True)
        repo = BasisRepo()
        loaded = repo.load(repo.save(basis, tmp_path / "b.sklb"))

        np.testing.assert_array_equal(loaded.U_S, basis.U_S)
        np.testing.assert_array_equal(loaded.eigenvalues, basis.eigenvalues)
        assert loaded.lanczos_seed == 4
        assert loaded.sketch.metadata() == sk.metadata()
        v = philox(5).standard_normal(small_fisher.p)
        np.testing.assert_array_equal(loaded.sketch.apply(v), sk.apply(v))

    def test_without_eigenvalues(self, small_fisher):
        sk = sketch_new(small_fisher.p, 64, seed=1)
        basis = sketched_lanczos(small_fisher.operator(), 5, sk, seed=2, retain_eigenvalues=True)
        repo = BasisRepo()
        assert repo.decode(repo.encode(basis, include_eigenvalues=False)).eigenvalues is None

    def test_preconditioner_block(self, small_fisher):
        sk = sketch_new(small_fisher.p, 128, seed=1)
        basis = preconditioned_sketched_lanczos(small_fisher.operator(), 4, 6, sk, seed=2, retain_eigenvalues=True)
        repo = BasisRepo()
        loaded = repo.decode(repo.encode(basis))
        assert loaded.k0 == 4
        np.testing.assert_array_equal(loaded.preconditioner.U0, basis.preconditioner.U0)
        u0, lam0 = BasisRepo.require_dense(loaded, need_eigenvalues=True)
        assert u0.shape == (small_fisher.p, 4)
        np.testing.assert_array_equal(lam0, basis.preconditioner.eigenvalues)

        stripped = repo.decode(repo.encode(basis, include_eigenvalues=False))
        with pytest.raises(MissingField) as info:
            BasisRepo.require_dense(stripped, need_eigenvalues=True)
        assert info.value.field == "eigenvalues"

    def test_plain_basis_has_no_dense_block(self, small_fisher):
        basis = sketched_lanczos(small_fisher.operator(), 3, sketch_new(small_fisher.p, 32, seed=0), seed=0)
        with pytest.raises(MissingField):
            BasisRepo.require_dense(basis, need_eigenvalues=False)

    def test_corrupt_files(self, small_fisher):
        basis = sketched_lanczos(small_fisher.operator(), 3, sketch_new(small_fisher.p, 32, seed=0), seed=0)
        buf = BasisRepo().encode(basis)
        with pytest.raises(BadMagic):
            BasisRepo().decode(b"MLPC" + buf[4:])
        with pytest.raises(TruncatedFile):
            BasisRepo().decode(buf[:-8])

    def test_non_orthonormal_payload_is_format_error(self, small_fisher):
        basis = sketched_lanczos(small_fisher.operator(), 3, sketch_new(small_fisher.p, 32, seed=0), seed=0)
        buf = BasisRepo().encode(basis, include_eigenvalues=False)
        n_bytes = 8 * basis.U_S.size
        scaled = (2.0 * np.frombuffer(buf[-n_bytes:], dtype="<f8")).astype("<f8").tobytes()
        with pytest.raises(FormatError, match="column-orthonormal"):
            BasisRepo().decode(buf[:-n_bytes] + scaled)


class TestReportRepo:
    """JSON / CSV experiment reports."""

    @pytest.fixture
    def report(self):
        return ExperimentReport(
            name="ablation",
            config={"p": 100, "seed": 0},
            metrics={"spearman": -0.9},
            tables={
                "error_surface": ReportTable(
                    row_labels=["k=10", "k=20"],
                    col_labels=["s=64", "inf"],
                    values=[[0.5, np.nan], [0.25, 0.0]],
                    index_name="k",
                )
            },
            timings={"run": 1.5},
        )

    def test_files_share_stem(self, tmp_path, report):
        written = ReportRepo(tmp_path).save(report)
        stem = written["report"].name[: -len(".json")]
        assert stem.startswith("ablation-") and len(stem) == len("ablation-") + 12
        assert written["timings"].name == f"{stem}.timings.json"
        assert written["error_surface"].name == f"{stem}.error_surface.csv"

    def test_primary_json_excludes_timings(self, tmp_path, report):
        payload = ReportRepo(tmp_path).load(ReportRepo(tmp_path).save(report)["report"])
        assert "timings" not in payload
        assert payload["tables"]["error_surface"]["values"][0][1] is None
        assert payload["metrics"] == {"spearman": -0.9}

    def test_identical_runs_identical_bytes(self, tmp_path, report):
        a = ReportRepo(tmp_path / "a").save(report)
        b = ReportRepo(tmp_path / "b").save(report.model_copy(update={"timings": {"run": 9.0}}))
        assert a["report"].read_bytes() == b["report"].read_bytes()
        assert a["error_surface"].read_bytes() == b["error_surface"].read_bytes()

    def test_non_finite_metric_rejected(self):
        with pytest.raises(ValueError):
            ExperimentReport(name="x", metrics={"bad": float("nan")})

    def test_table_shape_checked(self):
        with pytest.raises(ValueError):
            ReportTable(row_labels=["a"], col_labels=["b", "c"], values=[[1.0]])

    def test_json_is_sorted(self, tmp_path, report):
        text = ReportRepo(tmp_path).save(report)["report"].read_text()
        assert json.loads(text)["config"] == {"p": 100, "seed": 0}
        assert text.index('"config"') < text.index('"metrics"') < text.index('"name"')
