import struct

import numpy as np
import pytest

from adapter_splade.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from adapter_splade.encoder import AdapterConfig, set_trainable
from adapter_splade.sparse import SpladeModel


@pytest.fixture
def model(tiny_config):
    acfg = AdapterConfig.bi(reduction_factor=2)
    m = SpladeModel.create(tiny_config, acfg, seed=4)
    set_trainable(m.store, acfg, "adapter-tune", tiny_config.num_layers)
    return m


class TestCheckpoint:
    def test_round_trip(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", model.store, model.config, model.adapters,
                               extra={"vocab": ["a", "b"]})
        store, config, adapters, header = load_checkpoint(path)
        assert store.equals(model.store)
        assert store.trainable == model.store.trainable
        assert list(store.names()) == list(model.store.names())
        assert config == model.config and adapters == model.adapters
        assert header["kind"] == "splade" and header["extra"] == {"vocab": ["a", "b"]}

    def test_no_adapters(self, tiny_config, tmp_path):
        m = SpladeModel.create(tiny_config, None)
        save_checkpoint(tmp_path / "m.ckpt", m.store, m.config, None)
        assert load_checkpoint(tmp_path / "m.ckpt")[2] is None

    def test_values_exact(self, model, tmp_path, rng):
        model.store.values["head.vocab_bias"][:] = rng.normal(size=model.config.vocab_size) * 1e-300
        save_checkpoint(tmp_path / "m.ckpt", model.store, model.config, model.adapters)
        store = load_checkpoint(tmp_path / "m.ckpt")[0]
        assert np.array_equal(store["head.vocab_bias"], model.store["head.vocab_bias"])

    def test_header_layout(self, model, tmp_path):
        raw = save_checkpoint(tmp_path / "m.ckpt", model.store, model.config, model.adapters).read_bytes()
        assert raw[:8] == MAGIC
        version, hlen = struct.unpack_from("<II", raw, 8)
        assert version == 1
        (count,) = struct.unpack_from("<I", raw, 16 + hlen)
        assert count == len(model.store)

    def test_bad_magic(self, model, tmp_path):
        p = save_checkpoint(tmp_path / "m.ckpt", model.store, model.config, model.adapters)
        p.write_bytes(b"NOTACKPT" + p.read_bytes()[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_version(self, model, tmp_path):
        p = save_checkpoint(tmp_path / "m.ckpt", model.store, model.config, model.adapters)
        raw = bytearray(p.read_bytes())
        raw[8:12] = struct.pack("<I", 7)
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 7"):
            load_checkpoint(p)

    def test_truncated_and_trailing(self, model, tmp_path):
        p = save_checkpoint(tmp_path / "m.ckpt", model.store, model.config, model.adapters)
        raw = p.read_bytes()
        p.write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)
        p.write_bytes(raw + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(p)
