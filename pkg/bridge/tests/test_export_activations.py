"""Activation capture: layout, metadata, pooling, determinism, rejection."""

import filecmp
import hashlib

import numpy as np
import pytest

from graftbridge import DataError, ExportJob, export_activations, read_archive

from conftest import HIDDEN, loragraft_cli


def job_for(ckpt, corpus, out_dir, **kw):
    defaults = dict(k=3, m=8, seed=9, single_threaded=True)
    defaults.update(kw)
    return ExportJob(checkpoint=ckpt, out_dir=out_dir, corpus=corpus, **defaults)


class TestLayout:
    def test_batches_and_shapes(self, exports):
        tensors, metadata = read_archive(exports["old"] / "activations.safetensors")
        assert sorted(tensors) == [f"layer.{i}.batch.{b}"
                                   for i in range(2) for b in range(3)]
        for arr in tensors.values():
            assert arr.shape == (8, HIDDEN)
        assert (metadata["k"], metadata["m"]) == ("3", "8")
        assert metadata["pooling"] == "mean_nonpad"
        assert metadata["hooked_layers"] == "0,1"

    def test_corpus_id_folds_hash_seed_and_pooling(self, exports, corpus):
        _, metadata = read_archive(exports["old"] / "activations.safetensors")
        digest = hashlib.sha256(corpus.read_bytes()).hexdigest()[:16]
        assert metadata["corpus"] == f"{digest}:seed=9:pool=mean_nonpad"

    def test_matching_metadata_across_models(self, exports):
        old_meta = read_archive(exports["old"] / "activations.safetensors")[1]
        new_meta = read_archive(exports["new"] / "activations.safetensors")[1]
        for key in ("corpus", "k", "m", "pooling"):
            assert old_meta[key] == new_meta[key]


class TestPooling:
    def test_rows_match_hook_capture(self, ckpt_old, corpus, tmp_path):
        """Independent route: forward hooks on the decoder layers.

        The hidden-state convention puts the final norm on the last
        layer's entry, so the oracle applies it there explicitly.
        """
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        out = export_activations(job_for(ckpt_old, corpus, tmp_path))
        tensors, _ = read_archive(out)

        tokenizer = AutoTokenizer.from_pretrained(str(ckpt_old))
        model = AutoModelForCausalLM.from_pretrained(
            str(ckpt_old), dtype=torch.float32, attn_implementation="eager")
        model.eval()
        captured = {}

        def hook_for(i):
            def hook(module, args, output):
                captured[i] = output[0] if isinstance(output, tuple) else output
            return hook

        for i, layer in enumerate(model.model.layers):
            layer.register_forward_hook(hook_for(i))
        last = len(model.model.layers) - 1

        lines = [ln.strip() for ln in corpus.read_text().splitlines() if ln.strip()]
        order = np.random.default_rng(9).permutation(len(lines))[:24]
        chosen = [lines[i] for i in order]
        with torch.no_grad():
            for b in range(3):
                enc = tokenizer(chosen[b * 8:(b + 1) * 8], return_tensors="pt",
                                padding=True, truncation=True, max_length=64)
                model(input_ids=enc["input_ids"],
                      attention_mask=enc["attention_mask"])
                mask = enc["attention_mask"].to(torch.float32)
                for i in range(2):
                    h = captured[i]
                    if i == last:
                        h = model.model.norm(h)
                    pooled = ((h * mask.unsqueeze(-1)).sum(dim=1)
                              / mask.sum(dim=1, keepdim=True)).numpy()
                    got = tensors[f"layer.{i}.batch.{b}"]
                    assert np.abs(got - pooled).max() <= 1e-5


class TestDeterminism:
    def test_repeat_runs_are_byte_identical(self, ckpt_old, corpus, tmp_path):
        a = export_activations(job_for(ckpt_old, corpus, tmp_path / "a"))
        b = export_activations(job_for(ckpt_old, corpus, tmp_path / "b"))
        assert filecmp.cmp(a, b, shallow=False)

    def test_seed_changes_selection(self, ckpt_old, corpus, tmp_path):
        a = export_activations(job_for(ckpt_old, corpus, tmp_path / "a"))
        b = export_activations(job_for(ckpt_old, corpus, tmp_path / "b", seed=10))
        assert not filecmp.cmp(a, b, shallow=False)


class TestRejection:
    def test_corpus_too_small(self, ckpt_old, corpus, tmp_path):
        with pytest.raises(DataError, match=r"60 sequences, need k\*m = 1024"):
            export_activations(job_for(ckpt_old, corpus, tmp_path, k=16, m=64))

    def test_hooked_layers_must_exist(self, ckpt_old, corpus, tmp_path):
        with pytest.raises(DataError, match="subset of 0..1"):
            export_activations(job_for(ckpt_old, corpus, tmp_path, layers=(5,)))

    def test_missing_corpus_file(self, ckpt_old, tmp_path):
        with pytest.raises(DataError, match="corpus file not found"):
            export_activations(job_for(ckpt_old, tmp_path / "nope.txt", tmp_path))


class TestSubset:
    def test_layers_reindexed_contiguously(self, ckpt_old, corpus, tmp_path):
        out = export_activations(job_for(ckpt_old, corpus, tmp_path, layers=(1,)))
        tensors, metadata = read_archive(out)
        assert sorted(tensors) == [f"layer.0.batch.{b}" for b in range(3)]
        assert metadata["hooked_layers"] == "1"


class TestToolkitInterop:
    """The toolkit consumes the exports through its command line."""

    def test_similarity_accepts_matching_exports(self, exports, tmp_path):
        proc = loragraft_cli(
            "export-similarity",
            "--activations-old", str(exports["old"] / "activations.safetensors"),
            "--activations-new", str(exports["new"] / "activations.safetensors"),
            "--out", str(tmp_path / "sim.csv"))
        assert proc.returncode == 0, proc.stderr
        rows = (tmp_path / "sim.csv").read_text().strip().splitlines()
        assert len(rows) == 2 and len(rows[0].split(",")) == 3

    def test_mismatched_seed_is_rejected_early(self, ckpt_old, exports, corpus,
                                               tmp_path):
        other = export_activations(job_for(ckpt_old, corpus, tmp_path, seed=10))
        proc = loragraft_cli(
            "export-similarity",
            "--activations-old", str(other),
            "--activations-new", str(exports["new"] / "activations.safetensors"),
            "--out", str(tmp_path / "sim.csv"))
        assert proc.returncode == 3
        assert "different corpora" in proc.stderr
