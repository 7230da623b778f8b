import json
import struct

import numpy as np
import pytest

from mmtm import checkpoint, dataset, model


def small_store():
    vocab = dataset.Vocab(["cat", "sat"], ["+", "number0", "number1"])
    cfg = model.ModelConfig(src_vocab_size=vocab.src_size,
                            tgt_vocab_size=vocab.tgt_size, d_model=8, n_heads=2,
                            seed=13)
    return model.init_params(cfg), vocab


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        params, vocab = small_store()
        path = tmp_path / "m.mmtm"
        checkpoint.save(path, params, vocab)
        loaded = checkpoint.load(path)
        assert loaded.vocab.src_itos == vocab.src_itos
        assert loaded.vocab.tgt_itos == vocab.tgt_itos
        assert loaded.config == params.config
        assert loaded.params.tasks == params.tasks
        for name in params.tensors:
            np.testing.assert_array_equal(loaded.params[name], params[name])

    def test_save_is_deterministic(self, tmp_path):
        params, vocab = small_store()
        checkpoint.save(tmp_path / "a", params, vocab)
        checkpoint.save(tmp_path / "b", params, vocab)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_header_is_json_with_manifest(self, tmp_path):
        params, vocab = small_store()
        path = tmp_path / "m.mmtm"
        checkpoint.save(path, params, vocab)
        blob = path.read_bytes()
        assert blob[:4] == checkpoint.MAGIC
        (hlen,) = struct.unpack("<Q", blob[4:12])
        header = json.loads(blob[12:12 + hlen])
        names = [e["name"] for e in header["manifest"]]
        assert names == sorted(params.tensors)
        payload = blob[12 + hlen:]
        assert len(payload) == params.size() * 8  # float64


class TestMismatch:
    def test_tampered_vocab_hash_rejected(self, tmp_path):
        params, vocab = small_store()
        path = tmp_path / "m.mmtm"
        checkpoint.save(path, params, vocab)
        blob = bytearray(path.read_bytes())
        (hlen,) = struct.unpack("<Q", bytes(blob[4:12]))
        header = json.loads(bytes(blob[12:12 + hlen]))
        header["src_vocab"][-1] = "tampered"
        new_header = json.dumps(header, sort_keys=True).encode()
        out = (bytes(blob[:4]) + struct.pack("<Q", len(new_header)) + new_header
               + bytes(blob[12 + hlen:]))
        bad = tmp_path / "bad.mmtm"
        bad.write_bytes(out)
        with pytest.raises(checkpoint.CheckpointMismatch):
            checkpoint.load(bad)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"hello world")
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(path)
