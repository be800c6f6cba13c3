import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duet.align import AlignModel, embed_expressions, embed_images
from duet.core import Rng
from duet.errors import InputError
from duet.fuse import FuseAdapter, alpha
from duet.regress import RegModel
from duet.tsvio import (
    load_align,
    load_fuse,
    load_reg,
    read_ids_tsv,
    read_manifest,
    read_matrix_tsv,
    save_align,
    save_fuse,
    save_reg,
    sha256_file,
    update_manifest,
    write_ids_tsv,
    write_matrix_tsv,
)


class TestMatrixTsv:
    def test_roundtrip_lossless(self, tmp_path):
        rng = Rng(1)
        m = rng.child("m").standard_normal((7, 4)) * np.exp(
            rng.child("s").uniform(-30, 30, size=(7, 4))
        )
        m[0, 0] = 0.0
        m[1, 1] = -0.0
        m[2, 2] = np.pi
        path = tmp_path / "m.tsv"
        rows = [f"r{i}" for i in range(7)]
        cols = [f"c{j}" for j in range(4)]
        write_matrix_tsv(path, m, rows, cols)
        back, rids, cids = read_matrix_tsv(path)
        assert np.array_equal(back, m)
        assert rids == rows
        assert cids == cols

    def test_header_first_cell_is_id(self, tmp_path):
        path = tmp_path / "m.tsv"
        write_matrix_tsv(path, np.zeros((1, 2)), ["a"], ["x", "y"])
        text = path.read_text(encoding="utf-8")
        assert text.startswith("id\tx\ty\n")
        assert text.endswith("\n")
        assert "\r" not in text

    def test_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("spot\tx\na\t1\n", encoding="utf-8")
        with pytest.raises(InputError, match="id"):
            read_matrix_tsv(path)

    def test_rejects_ragged_rows(self, tmp_path):
        path = tmp_path / "ragged.tsv"
        path.write_text("id\tx\ty\na\t1\n", encoding="utf-8")
        with pytest.raises(InputError):
            read_matrix_tsv(path)

    def test_missing_file_names_path(self, tmp_path):
        missing = tmp_path / "nope.tsv"
        with pytest.raises(InputError, match="nope.tsv"):
            read_matrix_tsv(missing)

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        rows=st.integers(1, 6),
        cols=st.integers(1, 5),
        scale=st.integers(-250, 250),
    )
    def test_roundtrip_property(self, seed, rows, cols, scale, tmp_path_factory):
        # repr-based serialization must be lossless across the float64 range
        m = Rng(seed).child("m").standard_normal((rows, cols)) * 10.0**scale
        path = tmp_path_factory.mktemp("rt") / "m.tsv"
        write_matrix_tsv(path, m, [f"r{i}" for i in range(rows)],
                         [f"c{j}" for j in range(cols)])
        back, _, _ = read_matrix_tsv(path)
        assert np.array_equal(back, m)

    def test_id_list_roundtrip(self, tmp_path):
        path = tmp_path / "ids.tsv"
        write_ids_tsv(path, ["a", "b", "c"])
        assert read_ids_tsv(path) == ["a", "b", "c"]


class TestCheckpoints:
    def test_align_roundtrip(self, tmp_path):
        model = AlignModel.init(img_dim=10, gene_dim=14, rng=Rng(2),
                                embed_dim=8, hidden=16, temperature=0.05)
        path = tmp_path / "align.ckpt"
        save_align(path, model)
        back = load_align(path)
        assert back.temperature == model.temperature
        assert back.embed_dim == model.embed_dim
        x = Rng(3).child("x").standard_normal((5, 10))
        y = Rng(3).child("y").uniform(0, 3, size=(5, 14))
        assert np.array_equal(embed_images(back, x), embed_images(model, x))
        assert np.array_equal(embed_expressions(back, y),
                              embed_expressions(model, y))

    def test_reg_roundtrip(self, tmp_path):
        model = RegModel.init(12, 9, Rng(4), hidden=(16, 16))
        path = tmp_path / "reg.ckpt"
        save_reg(path, model)
        back = load_reg(path)
        assert back.feature_dim == 12 and back.gene_dim == 9
        x = Rng(5).child("x").standard_normal((6, 12))
        assert np.array_equal(back.predict(x), model.predict(x))

    def test_fuse_roundtrip(self, tmp_path):
        ad = FuseAdapter.init(7, Rng(6), reg_coef=2.5)
        ad.mlp.layers[-1].bias[...] = 0.3
        ad.mlp.touch()
        path = tmp_path / "fuse.ckpt"
        save_fuse(path, ad)
        back = load_fuse(path)
        assert back.reg_coef == 2.5
        f = Rng(7).child("f").standard_normal(7)
        assert alpha(back, f) == alpha(ad, f)

    def test_wrong_magic_rejected(self, tmp_path):
        model = RegModel.init(4, 3, Rng(8), hidden=(8,))
        path = tmp_path / "reg.ckpt"
        save_reg(path, model)
        with pytest.raises(InputError, match="magic"):
            load_align(path)

    def test_truncated_rejected(self, tmp_path):
        model = RegModel.init(4, 3, Rng(9), hidden=(8,))
        path = tmp_path / "reg.ckpt"
        save_reg(path, model)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(InputError, match="truncated"):
            load_reg(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = RegModel.init(4, 3, Rng(10), hidden=(8,))
        path = tmp_path / "reg.ckpt"
        save_reg(path, model)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(InputError, match="trailing"):
            load_reg(path)


class TestManifest:
    def test_records_hashes_and_stages(self, tmp_path):
        out = tmp_path / "a.tsv"
        write_matrix_tsv(out, np.ones((2, 2)), ["r0", "r1"], ["c0", "c1"])
        man = tmp_path / "manifest.json"
        update_manifest(man, "synth", seed=7, config={"n": 2}, outputs=[out])
        doc = read_manifest(man)
        assert doc["seed"] == 7
        assert doc["stages"]["synth"]["outputs"]["a.tsv"] == sha256_file(out)
        update_manifest(man, "eval", seed=7, config={"n": 2}, outputs=[],
                        inputs=[out])
        doc = read_manifest(man)
        assert set(doc["stages"]) == {"synth", "eval"}

    def test_hash_tracks_content(self, tmp_path):
        out = tmp_path / "a.tsv"
        write_matrix_tsv(out, np.ones((1, 1)), ["r"], ["c"])
        h1 = sha256_file(out)
        write_matrix_tsv(out, np.zeros((1, 1)), ["r"], ["c"])
        h2 = sha256_file(out)
        assert h1 != h2
        write_matrix_tsv(out, np.ones((1, 1)), ["r"], ["c"])
        assert sha256_file(out) == h1

    def test_manifest_is_valid_json(self, tmp_path):
        man = tmp_path / "manifest.json"
        update_manifest(man, "s", seed=1, config={}, outputs=[])
        json.loads(man.read_text(encoding="utf-8"))
