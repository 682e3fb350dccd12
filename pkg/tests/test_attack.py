import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from torch.func import functional_call

from config.schemas import AttackConfig, AugmentationSpec, PretrainConfig
from conftest import FEATURE_DIM, SHAPE, tiny_encoder
from src.data.datasets import images_to_tensor
from src.encoders.checkpoint import load_checkpoint
from src.encoders.encoder import encoder_digest
from src.handlers.service import EaaSService
from src.training.attack import (
    FeatureCache,
    distillation_loss,
    feature_distance,
    loss_l1,
    loss_l2,
    loss_l2_prime,
    resolve_stolen_arch,
    steal,
)
from src.utils.artifacts import read_json
from src.utils.errors import AttackAborted, ConfigurationError, DomainError, InvariantViolation, PreconditionError

IDENTITY = AugmentationSpec(ops=[])


# feature_distance

def test_distance_of_identical_vectors():
    u = torch.tensor([0.3, -1.2, 2.0])
    assert feature_distance("l2", u, u).item() == 0.0
    assert feature_distance("l1", u, u).item() == 0.0
    assert feature_distance("cosine", u, u).item() == pytest.approx(-1.0)


def test_distance_of_orthogonal_unit_vectors():
    u, v = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    assert feature_distance("l2", u, v).item() == pytest.approx(math.sqrt(2))
    assert feature_distance("l1", u, v).item() == pytest.approx(2.0)
    assert feature_distance("cosine", u, v).item() == pytest.approx(0.0)


def test_norm_inequalities_and_symmetry_on_random_pairs():
    torch.manual_seed(0)
    u, v, w = torch.randn(3, 200, 10).unbind(0)
    l2, l1 = feature_distance("l2", u, v), feature_distance("l1", u, v)
    assert bool((l2 <= l1 + 1e-5).all())
    assert bool((l1 <= math.sqrt(10) * l2 + 1e-5).all())
    for metric in ("l1", "l2"):
        assert torch.allclose(feature_distance(metric, u, v), feature_distance(metric, v, u))
        triangle = feature_distance(metric, u, v) + feature_distance(metric, v, w)
        assert bool((feature_distance(metric, u, w) <= triangle + 1e-5).all())
    cosine = feature_distance("cosine", u, v)
    assert bool(((cosine >= -1 - 1e-6) & (cosine <= 1 + 1e-6)).all())


def test_distance_errors():
    with pytest.raises(DomainError):
        feature_distance("cosine", torch.zeros(3), torch.ones(3))
    with pytest.raises(PreconditionError):
        feature_distance("l2", torch.zeros(3), torch.zeros(4))
    with pytest.raises(ConfigurationError):
        feature_distance("chebyshev", torch.zeros(3), torch.zeros(3))


# losses

class Constant(torch.nn.Module):
    """Maps every image of a batch to a fixed row."""

    def __init__(self, rows):
        super().__init__()
        self.rows = torch.as_tensor(rows, dtype=torch.float32)

    def forward(self, x):
        return self.rows[: x.shape[0]]


def test_l1_single_image_arithmetic():
    cache = FeatureCache(1, 2)
    cache.store([0], torch.tensor([[1.0, 0.0]]))
    assert loss_l1(cache, Constant([[0.0, 0.0]]), torch.zeros(1, 3, 8, 8), [0], "l2").item() == pytest.approx(1.0)


def test_l1_is_the_batch_mean():
    cache = FeatureCache(3, 2)
    cache.store([0, 1, 2], torch.tensor([[3.0, 4.0], [0.0, 1.0], [1.0, 1.0]]))
    value = loss_l1(cache, Constant([[0.0, 0.0]] * 3), torch.zeros(3, 3, 8, 8), [0, 1, 2], "l2")
    assert value.item() == pytest.approx((5.0 + 1.0 + math.sqrt(2)) / 3)


def test_cache_refuses_unknown_indices_and_late_writes():
    cache = FeatureCache(2, 2)
    cache.store([0], torch.ones(1, 2))
    with pytest.raises(InvariantViolation):
        cache.lookup([1])
    cache.frozen = True
    with pytest.raises(InvariantViolation):
        cache.store([1], torch.ones(1, 2))


@pytest.fixture
def surrogate_tensor(surrogate_set):
    return images_to_tensor(surrogate_set.images)


@pytest.fixture
def cache(service, surrogate_tensor):
    return FeatureCache.build(service, "attacker", surrogate_tensor, batch_size=5)


def test_cache_build_bills_one_query_per_image(service, cache, surrogate_tensor):
    assert len(cache) == surrogate_tensor.shape[0]
    assert cache.frozen
    assert service.ledger_report("attacker").query_count == surrogate_tensor.shape[0]


def test_perfect_copy_has_zero_losses(service, cache, target_encoder, surrogate_tensor):
    indices = [0, 1, 2, 3]
    batch = surrogate_tensor[indices]
    assert loss_l1(cache, target_encoder, batch, indices, "l2").item() == pytest.approx(0.0, abs=1e-5)
    prime = loss_l2_prime(service, "attacker", target_encoder, batch, indices, "l2", AugmentationSpec.attack_default(), 0, 0)
    assert prime.item() == pytest.approx(0.0, abs=1e-5)


def test_identity_augmentation_collapses_all_losses(service, cache, surrogate_tensor):
    stolen = tiny_encoder(seed=8, provenance="stolen")
    indices = [2, 5, 7]
    batch = surrogate_tensor[indices]
    l1 = loss_l1(cache, stolen, batch, indices, "l2")
    l2 = loss_l2(cache, stolen, batch, indices, "l2", IDENTITY, seed=0, epoch=0)
    prime = loss_l2_prime(service, "attacker", stolen, batch, indices, "l2", IDENTITY, 0, 0)
    assert l2.item() == pytest.approx(l1.item(), rel=1e-5)
    assert prime.item() == pytest.approx(l1.item(), rel=1e-5)


def test_l2_issues_no_queries_and_is_reproducible(service, cache, surrogate_tensor):
    stolen = tiny_encoder(seed=8, provenance="stolen").eval()
    before = service.ledger_report("attacker").query_count
    indices = [0, 1, 2, 3]
    args = (cache, stolen, surrogate_tensor[indices], indices, "l2", AugmentationSpec.attack_default(), 3, 1)
    assert loss_l2(*args).item() == loss_l2(*args).item()
    assert service.ledger_report("attacker").query_count == before


@pytest.mark.parametrize("metric", ["l2", "l1", "cosine"])
def test_stealing_objective_gradient_matches_finite_differences(metric):
    torch.manual_seed(11)
    cache = FeatureCache(3, 4)
    cache.store([0, 1, 2], torch.randn(3, 4))
    images = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    network = nn.Sequential(nn.Conv2d(3, 2, 3), nn.Tanh(), nn.Flatten(), nn.Linear(2 * 6 * 6, 4)).double()
    names = [name for name, _ in network.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in network.parameters())
    flip = AugmentationSpec(ops=["hflip"], flip_p=0.5)

    def objective(*values):
        def stolen(x):
            return functional_call(network, dict(zip(names, values)), (x,))

        indices = [0, 1, 2]
        first = loss_l1(cache, stolen, images, indices, metric)
        return first + 0.7 * loss_l2(cache, stolen, images, indices, metric, flip, seed=3, epoch=1)

    assert torch.autograd.gradcheck(objective, params)


def test_l2_prime_bills_the_batch(service, cache, surrogate_tensor):
    stolen = tiny_encoder(seed=8, provenance="stolen")
    before = service.ledger_report("attacker").query_count
    indices = [0, 1, 2, 3, 4]
    loss_l2_prime(service, "attacker", stolen, surrogate_tensor[indices], indices, "l2", AugmentationSpec.attack_default(), 0, 0)
    assert service.ledger_report("attacker").query_count - before == 5


def test_distillation_loss_is_minimised_by_matching_logits():
    cached = torch.tensor([[2.0, 0.0, -1.0]])
    matched = distillation_loss(cached, cached.clone(), temperature=1.0)
    off = distillation_loss(cached, torch.tensor([[-1.0, 0.0, 2.0]]), temperature=1.0)
    assert matched.item() < off.item()


# steal

def _config(**overrides):
    values = dict(epochs=2, batch_size=4, lr=1e-3, lam=20.0, stolen_arch="small-conv", seed=0)
    values.update(overrides)
    return AttackConfig(**values)


def test_stolen_encoder_costs_one_query_per_image(service, surrogate_set):
    result = steal(service, "attacker", surrogate_set, _config())
    assert result.queries == len(surrogate_set) == 12
    assert result.ledger["query_count"] == 12
    assert result.ledger["cost_dollars"] == pytest.approx(12 * 3.2 / 1000)
    assert len(result.losses) == 2
    assert result.encoder.provenance == "stolen"
    assert result.encoder.feature_dim == FEATURE_DIM


def test_query_aug_costs_e_plus_one_passes(service, surrogate_set):
    result = steal(service, "attacker", surrogate_set, _config(variant="query_aug", epochs=3))
    assert result.queries == (3 + 1) * len(surrogate_set)


def test_local_pretrain_issues_no_queries(service, surrogate_set):
    config = _config(variant="local_pretrain")
    pretrain_config = PretrainConfig(arch="small-conv", feature_dim=FEATURE_DIM, input_shape=SHAPE, epochs=1, batch_size=4, proj_dim=4)
    result = steal(None, None, surrogate_set, config, pretrain_config=pretrain_config)
    assert result.queries == 0
    assert result.encoder.provenance == "local-baseline"
    assert service.ledger_report("attacker").query_count == 0


def test_zero_lambda_and_no_aug_give_identical_weights(target_encoder, surrogate_set):
    digests = []
    for config in (_config(lam=0.0), _config(variant="no_aug")):
        api = EaaSService(target_encoder)
        api.open_account("attacker")
        digests.append(encoder_digest(steal(api, "attacker", surrogate_set, config).encoder))
    assert digests[0] == digests[1]


def test_steal_is_deterministic(target_encoder, surrogate_set):
    digests = []
    for _ in range(2):
        api = EaaSService(target_encoder)
        api.open_account("attacker")
        digests.append(encoder_digest(steal(api, "attacker", surrogate_set, _config()).encoder))
    assert digests[0] == digests[1]


def test_training_lowers_the_loss(service, surrogate_set):
    result = steal(service, "attacker", surrogate_set, _config(epochs=10, lr=1e-2, lam=0.0))
    assert result.losses[-1]["loss"] < result.losses[0]["loss"]


def test_zero_lambda_loss_equals_l1(service, surrogate_set):
    result = steal(service, "attacker", surrogate_set, _config(lam=0.0))
    for row in result.losses:
        assert row["loss"] == pytest.approx(row["l1"])
        assert row["l2"] == 0.0


def test_cap_during_cache_build_aborts(service, surrogate_set):
    service.open_account("capped", budget_cap=5)
    with pytest.raises(AttackAborted):
        steal(service, "capped", surrogate_set, _config())


def test_cap_mid_run_returns_partial_artifacts(service, surrogate_set):
    service.open_account("capped", budget_cap=20)
    with pytest.raises(AttackAborted) as excinfo:
        steal(service, "capped", surrogate_set, _config(variant="query_aug", epochs=3))
    partial = excinfo.value.partial
    assert partial is not None
    assert partial.queries <= 20
    assert partial.ledger["query_count"] <= 20


def test_distillation_variant_trains(service, surrogate_set):
    result = steal(service, "attacker", surrogate_set, _config(variant="distillation"))
    assert result.variant == "distillation"
    assert result.queries == len(surrogate_set)
    assert all(np.isfinite(row["loss"]) for row in result.losses)


def test_artifacts_are_written_beside_the_checkpoint(tmp_path, service, surrogate_set):
    out = tmp_path / "stolen.ckpt"
    result = steal(service, "attacker", surrogate_set, _config(), out_path=out)
    assert encoder_digest(load_checkpoint(out)) == encoder_digest(result.encoder)
    assert (tmp_path / "stolen.losses.csv").read_text().startswith("epoch,loss,l1,l2")
    assert read_json(tmp_path / "stolen.ledger.json")["ledger"]["query_count"] == 12


def test_surrogate_smaller_than_batch(service, surrogate_set):
    with pytest.raises(PreconditionError):
        steal(service, "attacker", surrogate_set, _config(batch_size=16))


def test_stolen_arch_defaults_one_step_up():
    assert resolve_stolen_arch(AttackConfig(), "resnet18") == "resnet34"
    assert resolve_stolen_arch(AttackConfig(stolen_arch="small-conv"), "resnet18") == "small-conv"
    with pytest.raises(ConfigurationError):
        resolve_stolen_arch(AttackConfig(), None)
