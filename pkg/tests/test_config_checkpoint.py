import numpy as np
import pytest

from glat import model as M
from glat.checkpoint import average_checkpoints, load_checkpoint, save_checkpoint
from glat.config import ExperimentConfig, default_config
from glat.errors import CheckpointError, ConfigError
from glat.tensor import Tensor

from conftest import tiny_config


def test_ini_round_trip_is_identity():
    cfg = default_config("glat_ctc", glancing__schedule="linear", optim__lr="0.001",
                         run__average_best="false")
    text = cfg.to_ini()
    again = ExperimentConfig.from_ini(text)
    assert again == cfg
    assert again.to_ini() == text
    assert again.optim.lr == 0.001 and again.run.average_best is False


def test_defaults_per_objective():
    assert default_config("ctc").decode.mode == "ctc"
    assert default_config("at").model.causal
    mlm = default_config("mlm_ablation")
    assert mlm.glancing.selection_strategy == "uniform_mlm" and mlm.glancing.input_mode == "mask_token"
    assert default_config("nat").glancing.ratio == 0.0


@pytest.mark.parametrize("over", [
    {"run__keep_best": "0"},
    {"optim__lr_policy": "cosine"},
    {"glancing__ratio": "1.5"},
    {"task__transformation": "shuffle"},
    {"optim__total_steps": "0"},
    {"model__vocab_size": "40"},
])
def test_invalid_configs_rejected(over):
    with pytest.raises(ConfigError):
        default_config("glm", **over).validate()


def test_unknown_key_and_bad_value():
    with pytest.raises(ConfigError):
        default_config("glm", optim__momentum="0.9")
    with pytest.raises(ConfigError):
        default_config("glm", optim__total_steps="many")
    with pytest.raises(ConfigError):
        default_config("glm", run__average_best="maybe")


def test_ctc_objective_requires_ctc_decoding():
    with pytest.raises(ConfigError):
        default_config("ctc", decode__mode="parallel_greedy").validate()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = M.init_params(tiny_config(), seed=0)
    save_checkpoint(tmp_path / "a.npz", params, {"step": 3}, {"__step__": np.asarray(3)})
    back, meta, optim = load_checkpoint(tmp_path / "a.npz")
    assert meta["step"] == 3 and int(optim["__step__"]) == 3
    assert back.config == params.config
    for k, t in params.tensors.items():
        assert np.array_equal(back[k].data, t.data)
        assert back[k].requires_grad == t.requires_grad


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x.npz").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.npz")


def test_average_one_and_copies(tmp_path):
    params = M.init_params(tiny_config(), seed=0)
    p = save_checkpoint(tmp_path / "a.npz", params)
    one = average_checkpoints([p])
    three = average_checkpoints([p, p, p], tmp_path / "avg.npz")
    for k, t in params.tensors.items():
        assert np.array_equal(one[k].data, t.data)
        assert np.array_equal(three[k].data, t.data)
    assert load_checkpoint(tmp_path / "avg.npz")[1]["averaged_from"] == [str(p)] * 3


def test_average_p_and_minus_p_is_zero(tmp_path):
    params = M.init_params(tiny_config(), seed=0)
    neg = M.ModelParams(params.config, {k: Tensor(-t.data, t.requires_grad, k) for k, t in params.tensors.items()})
    avg = average_checkpoints([save_checkpoint(tmp_path / "a.npz", params),
                               save_checkpoint(tmp_path / "b.npz", neg)])
    assert all(np.all(t.data == 0.0) for t in avg.tensors.values())


def test_average_mean_and_shape_mismatch(tmp_path):
    a = M.init_params(tiny_config(), seed=0)
    b = M.init_params(tiny_config(), seed=1)
    avg = average_checkpoints([save_checkpoint(tmp_path / "a.npz", a), save_checkpoint(tmp_path / "b.npz", b)])
    assert np.allclose(avg["embed"].data, (a["embed"].data + b["embed"].data) / 2)
    c = M.init_params(tiny_config(d_model=8), seed=0)
    with pytest.raises(CheckpointError):
        average_checkpoints([tmp_path / "a.npz", save_checkpoint(tmp_path / "c.npz", c)])
    with pytest.raises(CheckpointError):
        average_checkpoints([])


def test_unknown_objective():
    with pytest.raises(ConfigError):
        default_config("gan").validate()
