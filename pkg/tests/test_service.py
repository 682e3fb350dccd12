from concurrent.futures import ThreadPoolExecutor

import pytest
import torch

from config.schemas import AccountConfig, DefenseConfig, ServiceConfig
from conftest import FEATURE_DIM, random_images
from src.encoders.checkpoint import save_checkpoint
from src.encoders.encoder import encode
from src.handlers.service import EaaSService
from src.utils.errors import AuthError, ConfigurationError, PreconditionError, QuotaError


def test_undefended_query_equals_direct_encoding(service, target_encoder):
    images = random_images(1, seed=30)
    served = service.query("attacker", images)
    assert torch.equal(served.vectors, encode(target_encoder, images).vectors)
    assert served.source == "eaas"
    assert served.defense_applied == "none"


def test_query_billing_matches_published_price(service):
    service.query("attacker", random_images(3))
    service.query("attacker", random_images(5))
    report = service.ledger_report("attacker")
    assert report.query_count == 8
    assert report.cost_dollars == pytest.approx(0.0256)


def test_fresh_account_costs_nothing(service):
    service.open_account("fresh")
    report = service.ledger_report("fresh")
    assert (report.query_count, report.cost_dollars) == (0, 0.0)


def test_cost_of_large_query_counts(service):
    assert service.ledger.cost(5000) == pytest.approx(16.0)
    assert service.ledger.cost(2500) == pytest.approx(8.0)


def test_quota_refusal_withholds_response_and_charge(service):
    service.open_account("capped", budget_cap=5)
    with pytest.raises(QuotaError):
        service.query("capped", random_images(6))
    assert service.ledger_report("capped").query_count == 0


def test_unknown_account(service):
    with pytest.raises(AuthError):
        service.query("mallory", random_images(1))


def test_wrong_image_shape_is_rejected_unbilled(service):
    with pytest.raises(PreconditionError):
        service.query("attacker", random_images(2, shape=(16, 16, 3)))
    assert service.ledger_report("attacker").query_count == 0


def test_empty_batch_costs_nothing(service):
    served = service.query("attacker", random_images(0))
    assert tuple(served.vectors.shape) == (0, FEATURE_DIM)
    assert service.ledger_report("attacker").query_count == 0


def test_from_config_builds_defense_and_accounts(target_encoder):
    config = ServiceConfig(
        defense=DefenseConfig(kind="top_k", k=3),
        price_per_1000=1.0,
        accounts=[AccountConfig(token="alice"), AccountConfig(token="bob", budget_cap=2)],
    )
    service = EaaSService.from_config(config, target=target_encoder)
    served = service.query("alice", random_images(4))
    assert served.defense_applied == "top_k:k=3"
    assert bool(((served.vectors != 0).sum(dim=1) <= 3).all())
    assert service.ledger_report("bob").remaining == 2
    assert service.ledger_report("alice").cost_dollars == pytest.approx(0.004)


def test_from_config_loads_target_checkpoint(tmp_path, target_encoder):
    path = save_checkpoint(target_encoder, tmp_path / "target.ckpt")
    service = EaaSService.from_config(ServiceConfig(target_checkpoint=path))
    images = random_images(2)
    assert torch.equal(service.query("attacker", images).vectors, encode(target_encoder, images).vectors)


def test_from_config_needs_a_target():
    with pytest.raises(ConfigurationError):
        EaaSService.from_config(ServiceConfig())


def test_service_exposes_no_weights(service):
    assert not any(name for name in dir(service) if "state_dict" in name or name == "target")


def test_each_response_carries_its_own_charge(service):
    first = service.query("attacker", random_images(3))
    second = service.query("attacker", random_images(2))
    assert (first.billing.query_count, second.billing.query_count) == (3, 5)
    assert second.billing.cost_dollars == pytest.approx(5 * 3.2 / 1000)


def test_concurrent_queries_get_distinct_counts(service):
    images = random_images(2, seed=31)
    with ThreadPoolExecutor(max_workers=8) as pool:
        batches = list(pool.map(lambda _: service.query("attacker", images), range(20)))
    assert sorted(batch.billing.query_count for batch in batches) == list(range(2, 41, 2))
    assert service.ledger_report("attacker").query_count == 40
