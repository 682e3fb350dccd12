import numpy as np
import pytest
import torch

from conftest import FEATURE_DIM, SHAPE, WIDTH, random_images, tiny_encoder
from src.encoders.checkpoint import load_checkpoint, save_checkpoint
from src.encoders.encoder import encode, encoder_digest, init_encoder
from src.encoders.registry import ARCHITECTURES, EXPRESSIVENESS_ORDER, next_more_expressive
from src.utils.errors import CheckpointError, ConfigurationError, PreconditionError


def test_init_is_deterministic_per_seed():
    first = tiny_encoder(seed=4)
    second = tiny_encoder(seed=4)
    other = tiny_encoder(seed=5)
    assert encoder_digest(first) == encoder_digest(second)
    assert encoder_digest(first) != encoder_digest(other)


def test_init_leaves_global_rng_alone():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    tiny_encoder(seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_encode_shape_and_source(target_encoder):
    batch = encode(target_encoder, random_images(5))
    assert tuple(batch.vectors.shape) == (5, FEATURE_DIM)
    assert batch.source == "direct"


def test_encode_is_batch_size_independent(target_encoder):
    images = random_images(7)
    whole = encode(target_encoder, images, batch_size=7).vectors
    pieces = encode(target_encoder, images, batch_size=2).vectors
    assert torch.allclose(whole, pieces, atol=1e-5)


def test_encode_empty_batch(target_encoder):
    batch = encode(target_encoder, np.zeros((0, *SHAPE), dtype=np.float32))
    assert tuple(batch.vectors.shape) == (0, FEATURE_DIM)


def test_encode_restores_training_mode():
    encoder = tiny_encoder().train()
    encode(encoder, random_images(2))
    assert encoder.training


def test_encode_rejects_wrong_shape(target_encoder):
    with pytest.raises(PreconditionError):
        encode(target_encoder, random_images(2, shape=(16, 16, 3)))


def test_unknown_arch_and_bad_dim():
    with pytest.raises(ConfigurationError):
        init_encoder("transformer-xxl", FEATURE_DIM, SHAPE, 0)
    with pytest.raises(ConfigurationError):
        init_encoder("small-conv", 0, SHAPE, 0)


def test_every_registered_arch_builds_on_32px():
    images = random_images(2, shape=(32, 32, 3))
    for arch in ARCHITECTURES:
        encoder = init_encoder(arch, 8, (32, 32, 3), seed=0)
        assert tuple(encode(encoder, images).vectors.shape) == (2, 8), arch


@pytest.mark.parametrize("arch", ["resnet18", "mobilenet", "shufflenet", "densenet-s", "vgg-s"])
def test_single_channel_inputs_build_for_every_family(arch):
    encoder = init_encoder(arch, 8, (32, 32, 1), seed=0)
    images = random_images(2, shape=(32, 32, 1))
    assert tuple(encode(encoder, images).vectors.shape) == (2, 8)


@pytest.mark.parametrize("arch, narrow, wide", [("mobilenet", 16, 32), ("shufflenet", 12, 24), ("densenet-s", 6, 12)])
def test_width_scales_the_network(arch, narrow, wide):
    def parameters(width):
        encoder = init_encoder(arch, 8, (32, 32, 3), seed=0, width=width)
        return sum(p.numel() for p in encoder.parameters())

    assert parameters(narrow) < parameters(wide)


@pytest.mark.parametrize("arch", ["resnet18", "resnet34"])
def test_fixed_width_families_reject_a_width(arch):
    with pytest.raises(ConfigurationError):
        init_encoder(arch, 8, (32, 32, 3), seed=0, width=16)


def test_next_more_expressive_steps_up_the_chain():
    assert next_more_expressive("small-conv") == "small-conv-wide"
    assert next_more_expressive("resnet18") == "resnet34"
    assert next_more_expressive(EXPRESSIVENESS_ORDER[-1]) == EXPRESSIVENESS_ORDER[-1]
    with pytest.raises(ConfigurationError):
        next_more_expressive("nope")


def test_checkpoint_round_trip_preserves_outputs(tmp_path, target_encoder):
    path = save_checkpoint(target_encoder, tmp_path / "target.ckpt", config_digest="abc")
    loaded = load_checkpoint(path)
    images = random_images(3)
    assert torch.equal(encode(loaded, images).vectors, encode(target_encoder, images).vectors)
    assert loaded.provenance == "pretrained-target"
    assert loaded.width == WIDTH
    assert loaded.config_digest == "abc"


def test_truncated_checkpoint_is_rejected(tmp_path, target_encoder):
    path = save_checkpoint(target_encoder, tmp_path / "target.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_metadata_mismatch_is_rejected(tmp_path, target_encoder):
    path = save_checkpoint(target_encoder, tmp_path / "target.ckpt")
    payload = torch.load(path, weights_only=True)
    payload["metadata"]["feature_dim"] = FEATURE_DIM + 1
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
