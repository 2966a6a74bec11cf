import copy
import logging
from pathlib import Path

import numpy as np
import pytest

import config
import tensor as T
from cotrain import DATASET_FILES, pretrain
from datasets import build_dataset_vocab, gen_class_dataset, gen_robot_dataset, gen_vl_dataset, write_dataset
from encoders import EncoderConfig, PatchEncoder
from gradcheck import finite_diff_grad, relative_error
from policy import PolicyConfig
from utils import config_hash


TINY_ENCODER = {"patch_size": 8, "embed_dim": 16, "num_layers": 1, "num_heads": 2}
TINY_POLICY = {"width": 32, "layers": 1, "heads": 2, "max_seq_len": 160, "horizon": 2,
               "encoder_mode": "dual", "codec_mode": "string"}


def check_gradients(build_loss, params, tol=1e-3, eps=1e-5):
    """Compare backward() against central differences; ``build_loss`` returns a scalar Tensor."""
    for p in params:
        p.grad = None
    loss = build_loss()
    T.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = finite_diff_grad(lambda: build_loss().item(), params, eps)
    for p, a, n in zip(params, analytic, numeric):
        err = relative_error(a, n)
        assert err < tol, f"{getattr(p, 'name', '')}: relative error {err}"


@pytest.fixture
def float64():
    with T.float64_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    return build_dataset_vocab(256)


@pytest.fixture
def encoder_cfg():
    return EncoderConfig.from_dict(TINY_ENCODER)


@pytest.fixture
def encoder(encoder_cfg):
    return PatchEncoder(encoder_cfg, np.random.default_rng(7)).bind_names("encoder.")


@pytest.fixture
def policy_cfg():
    return PolicyConfig.from_dict(TINY_POLICY)


@pytest.fixture
def tiny_config(tmp_path):
    """A full config tree scaled down so that gen-data, pretrain and train finish in seconds."""
    cfg = copy.deepcopy(config.DEFAULTS)
    cfg["data"].update(robot_episodes=6, vl_samples=12, class_samples=48, class_holdout_samples=24,
                       gate_episodes=5)
    cfg["encoder"].update(TINY_ENCODER)
    cfg["pretrain"].update(steps=0, batch_size=8)
    cfg["policy"].update({k: v for k, v in TINY_POLICY.items()})
    cfg["train"].update(steps=4, batch_size=4, eval_every=0, checkpoint_every=2, log_every=2,
                        dataset_dir=str(tmp_path / "data"),
                        encoder_checkpoint=str(tmp_path / "data" / "encoder.ckpt"))
    cfg["eval"].update(episodes_per_cell=2, max_steps=6, batch_size=4,
                       variants=[{"kind": "Matching"}, {"kind": "RandomBackground"}])
    cfg["probe"].update(max_iter=200)
    return cfg


@pytest.fixture(autouse=True)
def quiet_logging():
    logging.getLogger('vla').setLevel(logging.WARNING)
    yield


@pytest.fixture
def prepared(tiny_config):
    """Writes the tiny datasets and a zero-step pretrained encoder; returns the config."""
    cfg = tiny_config
    data_dir = Path(cfg["train"]["dataset_dir"])
    data = cfg["data"]
    seed = cfg["seed"]
    vocab = build_dataset_vocab(cfg["codec"]["num_bins"])
    digest = config_hash(cfg)
    items = {
        "robot": gen_robot_dataset(seed, data["robot_episodes"], data["task_mix"], data["horizon"],
                                   data["max_episode_steps"]),
        "vl": gen_vl_dataset(seed, data["vl_samples"], data["vl_question_kinds"]),
        "class": gen_class_dataset(seed, data["class_samples"], "class"),
        "class_holdout": gen_class_dataset(seed, data["class_holdout_samples"], "class_holdout"),
    }
    for name, records in items.items():
        write_dataset(data_dir / DATASET_FILES[name], records, vocab, digest)
    pretrain(cfg, cfg["train"]["encoder_checkpoint"], data_dir)
    return cfg
