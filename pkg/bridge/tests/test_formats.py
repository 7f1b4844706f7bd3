"""Byte-level and round-trip checks for the file format writers."""

import json
import struct

import numpy as np
import pytest

from graftbridge import (AdapterBundle, DataError, read_adapter, read_archive,
                         read_manifest, write_activations, write_adapter,
                         write_archive, write_manifest)


class TestArchive:
    def test_bytes_match_hand_built_layout(self, tmp_path):
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        b = np.array([[1.5]], dtype=np.float32)
        path = tmp_path / "t.safetensors"
        write_archive(path, {"beta": b, "alpha": a}, metadata={"who": "me"})

        header = {
            "__metadata__": {"who": "me"},
            "alpha": {"dtype": "F32", "shape": [2, 3], "data_offsets": [0, 24]},
            "beta": {"dtype": "F32", "shape": [1, 1], "data_offsets": [24, 28]},
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        want = (struct.pack("<Q", len(head)) + head
                + a.tobytes() + b.tobytes())
        assert path.read_bytes() == want

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"x": rng.standard_normal((4, 5)), "y": rng.standard_normal((2, 2))}
        path = tmp_path / "t.safetensors"
        write_archive(path, tensors, metadata={"k": "3"})
        loaded, metadata = read_archive(path)
        assert metadata == {"k": "3"}
        for name, arr in tensors.items():
            np.testing.assert_array_equal(loaded[name],
                                          arr.astype(np.float32).astype(np.float64))

    def test_rejects_empty_and_bad_names(self, tmp_path):
        with pytest.raises(DataError, match="no tensors"):
            write_archive(tmp_path / "t", {})
        with pytest.raises(DataError, match="invalid tensor name"):
            write_archive(tmp_path / "t", {"__metadata__": np.ones(1)})

    def test_rejects_non_finite_on_write_and_read(self, tmp_path):
        path = tmp_path / "t.safetensors"
        with pytest.raises(DataError, match="non-finite"):
            write_archive(path, {"x": np.array([np.nan])})
        write_archive(path, {"x": np.ones(4)})
        raw = bytearray(path.read_bytes())
        (hlen,) = struct.unpack("<Q", raw[:8])
        start = 8 + hlen
        raw[start:start + 4] = struct.pack("<f", float("inf"))
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="'x'.*non-finite"):
            read_archive(path)

    def test_rejects_bad_offsets(self, tmp_path):
        path = tmp_path / "t.safetensors"
        header = {"x": {"dtype": "F32", "shape": [4], "data_offsets": [0, 12]}}
        head = json.dumps(header).encode()
        path.write_bytes(struct.pack("<Q", len(head)) + head + b"\0" * 16)
        with pytest.raises(DataError, match="offsets for tensor 'x'"):
            read_archive(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="archive not found"):
            read_archive(tmp_path / "absent.safetensors")


class TestManifest:
    def test_round_trip_with_orientation(self, tmp_path):
        fields = {"name": "m", "vocab_size": 16, "hidden_size": 8,
                  "intermediate_size": 16, "n_layers": 1, "n_heads": 2,
                  "n_kv_heads": 2, "head_dim": 4}
        path = tmp_path / "m.json"
        write_manifest(fields, path, orientation={"q": "out_in"})
        doc = read_manifest(path)
        assert doc["hidden_size"] == 8
        assert doc["storage_orientation"]["q"] == "out_in"
        assert doc["storage_orientation"]["embedding"] == "in_out"

    def test_rejects_unknown_family_and_flag(self, tmp_path):
        with pytest.raises(DataError, match="unknown tensor family"):
            write_manifest({}, tmp_path / "m.json", orientation={"gate": "out_in"})
        with pytest.raises(DataError, match="must be in_out or out_in"):
            write_manifest({}, tmp_path / "m.json", orientation={"q": "col_major"})


class TestActivations:
    def test_key_layout(self, tmp_path):
        rng = np.random.default_rng(1)
        layers = [[rng.standard_normal((4, 6)) for _ in range(2)]
                  for _ in range(3)]
        path = tmp_path / "a.safetensors"
        write_activations(layers, path, corpus_id="c:seed=0", k=2, m=4)
        tensors, metadata = read_archive(path)
        assert sorted(tensors) == [f"layer.{i}.batch.{b}"
                                   for i in range(3) for b in range(2)]
        assert metadata["corpus"] == "c:seed=0"
        assert (metadata["k"], metadata["m"]) == ("2", "4")

    def test_rejects_wrong_batch_count(self, tmp_path):
        layers = [[np.ones((4, 6))]]
        with pytest.raises(DataError, match="expected k=2"):
            write_activations(layers, tmp_path / "a", corpus_id="c", k=2, m=4)


class TestAdapterBundle:
    def entries(self, rank=2):
        rng = np.random.default_rng(2)
        return {(0, "q"): (rng.standard_normal((rank, 8)),
                           rng.standard_normal((8, rank)))}

    def test_round_trip(self, tmp_path):
        bundle = AdapterBundle(rank=2, alpha=4.0, entries=self.entries())
        write_adapter(bundle, tmp_path / "ad")
        loaded = read_adapter(tmp_path / "ad")
        assert loaded.rank == 2 and loaded.alpha == 4.0
        A, B = loaded.entries[(0, "q")]
        want_A, want_B = bundle.entries[(0, "q")]
        np.testing.assert_array_equal(A, want_A.astype(np.float32))
        np.testing.assert_array_equal(B, want_B.astype(np.float32))

    def test_validate_errors(self):
        with pytest.raises(DataError, match="rank must be >= 1"):
            AdapterBundle(rank=0, alpha=1.0, entries=self.entries()).validate()
        with pytest.raises(DataError, match="no entries"):
            AdapterBundle(rank=2, alpha=1.0, entries={}).validate()
        bad = {(0, "gate"): self.entries()[(0, "q")]}
        with pytest.raises(DataError, match="unknown module"):
            AdapterBundle(rank=2, alpha=1.0, entries=bad).validate()
        with pytest.raises(DataError, match="disagree with bundle rank"):
            AdapterBundle(rank=3, alpha=1.0, entries=self.entries()).validate()

    def test_missing_half_and_sidecar(self, tmp_path):
        write_adapter(AdapterBundle(rank=2, alpha=1.0, entries=self.entries()),
                      tmp_path / "ad")
        tensors, _ = read_archive(tmp_path / "ad" / "adapter.safetensors")
        del tensors["layers.0.q.lora_B"]
        write_archive(tmp_path / "ad" / "adapter.safetensors", tensors)
        with pytest.raises(DataError, match="missing lora_B"):
            read_adapter(tmp_path / "ad")
        with pytest.raises(DataError, match="sidecar not found"):
            read_adapter(tmp_path / "elsewhere")
