import numpy as np
import pytest

from modules import autograd as ag
from modules.captioner import init_params
from modules.checkpoint import decode_records, encode_records, load_checkpoint, save_checkpoint
from modules.exceptions import CheckpointError, DataError
from modules.optim import AdamState, adam_step
from tests.conftest import tiny_config


def _trained(seed: int = 0):
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(seed))
    state = AdamState.for_params(params)
    with ag.recording():
        loss = ag.sum_(params["predictor.w"] * params["predictor.w"])
    adam_step(params, ag.backward(loss), state, lr=0.1)
    return cfg, params, state


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        cfg, params, state = _trained()
        path = tmp_path / "model.sqrl"
        save_checkpoint(path, params, state)
        fresh = init_params(cfg, np.random.default_rng(99))
        restored = load_checkpoint(path, fresh)
        for name in params:
            np.testing.assert_array_equal(fresh[name].data, params[name].data)
            np.testing.assert_array_equal(restored.first[name], state.first[name])
            np.testing.assert_array_equal(restored.second[name], state.second[name])
        assert restored.step == 1

    def test_weights_only_checkpoint(self, tmp_path):
        cfg, params, _ = _trained()
        path = tmp_path / "weights.sqrl"
        save_checkpoint(path, params)
        assert load_checkpoint(path, init_params(cfg, np.random.default_rng(1))) is None

    def test_header_is_magic_then_version(self):
        blob = encode_records({"x": np.zeros((2, 3))})
        assert blob[:4] == b"SQRL"
        assert int.from_bytes(blob[4:8], "little") == 1

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            decode_records(b"NOPE" + bytes(8))

    def test_truncated_payload(self):
        blob = encode_records({"x": np.ones(10)})
        with pytest.raises(CheckpointError):
            decode_records(blob[:-8])

    def test_config_mismatch(self, tmp_path):
        _, params, _ = _trained()
        path = tmp_path / "model.sqrl"
        save_checkpoint(path, params)
        other = init_params(tiny_config(d_model=12), np.random.default_rng(0))
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(path, other)

    def test_missing_file_is_a_data_error(self, tmp_path):
        _, params, _ = _trained()
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.sqrl", params)
