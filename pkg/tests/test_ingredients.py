import inspect

import numpy as np
import pytest

from soupkit.gnn import ModelSpec, init_params
from soupkit.graph import generate_sbm
from soupkit.ingredients import DivergenceError, TrainConfig, train_one, train_population


@pytest.fixture(scope="module")
def small():
    return generate_sbm(150, 3, 0.08, 0.01, 8, 0.5, seed=3)


def spec_for(g, dropout=0.0, arch="gcn"):
    return ModelSpec(arch, 2, g.feat_dim, 16, g.num_classes, dropout)


def test_train_one_is_deterministic(small):
    init = init_params(spec_for(small), 0)
    cfg = TrainConfig(epochs=15)
    a, acc_a = train_one(small, init, cfg, 5)
    b, acc_b = train_one(small, init, cfg, 5)
    assert a.bit_equal(b) and acc_a == acc_b
    assert not a.bit_equal(init)


def test_zero_learning_rate_returns_init(small):
    init = init_params(spec_for(small, dropout=0.3), 0)
    for opt in ("sgd", "adam"):
        p, _ = train_one(small, init, TrainConfig(epochs=5, lr=0.0, optimizer=opt), 1)
        assert p.bit_equal(init)


def test_generated_graph_is_learnable(sbm1000):
    init = init_params(ModelSpec("gcn", 2, 64, 64, 7, 0.5), 0)
    _, acc = train_one(sbm1000, init, TrainConfig(epochs=100, lr=0.01, optimizer="adam"), 0)
    assert acc >= 0.85


@pytest.mark.parametrize("dropout", [0.0, 0.5])
def test_members_diverge_from_shared_init(small, dropout):
    ing = train_population(small, spec_for(small, dropout), TrainConfig(epochs=10), 3)
    dists = [np.linalg.norm(a.flat() - b.flat()) for a, b in zip(ing.members, ing.members[1:])]
    assert min(dists) > 0
    assert all(m.spec == ing.shared_init.spec for m in ing.members)
    assert all(0.0 <= a <= 1.0 for a in ing.val_accs)
    assert ing.seeds == [0, 1, 2]


def test_member_depends_only_on_its_seed(small):
    cfg = TrainConfig(epochs=8, seed_base=10)
    ing = train_population(small, spec_for(small, 0.5), cfg, 3)
    solo, acc = train_one(small, ing.shared_init, cfg, 12)
    assert solo.bit_equal(ing.members[2]) and acc == ing.val_accs[2]


def test_worker_count_does_not_change_results(small):
    cfg = TrainConfig(epochs=8)
    spec = spec_for(small, 0.5, "sage")
    one = train_population(small, spec, cfg, 5, workers=1)
    for w in (2, 4):
        assert train_population(small, spec, cfg, 5, workers=w).bit_equal(one)


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_reports_epoch_and_ingredient(small):
    cfg = TrainConfig(epochs=20, lr=1e30, optimizer="sgd")
    with pytest.raises(DivergenceError) as info:
        train_one(small, init_params(spec_for(small), 0), cfg, 0)
    assert info.value.epoch >= 0
    for workers in (1, 2):
        with pytest.raises(DivergenceError) as info:
            train_population(small, spec_for(small), cfg, 2, workers=workers)
        assert info.value.ingredient in (0, 1)
        assert "ingredient" in str(info.value)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_train_one_has_no_shared_state_argument():
    params = list(inspect.signature(train_one).parameters)
    assert params == ["graph", "init", "config", "ingredient_seed"]
