import numpy as np
import pytest

from robustagg.data import FederationPlan, blob_task, federate, federate_indices, load_dataset, make_blobs, save_dataset
from robustagg.learning import ModelArch, OptimizerSpec, evaluate, init_params, train_local


def test_make_blobs_counts_and_determinism():
    d = make_blobs(3, 5, 10, 2.0, seed=0)
    assert len(d) == 30
    assert np.bincount(d.labels).tolist() == [10, 10, 10]
    again = make_blobs(3, 5, 10, 2.0, seed=0)
    assert d.features.tobytes() == again.features.tobytes()


def test_make_blobs_noiseless_examples_sit_on_centers():
    d = make_blobs(3, 5, 4, spread=2.0, seed=1, noise=0.0)
    for c in range(3):
        rows = d.features[d.labels == c]
        assert np.all(rows == rows[0])
        assert np.linalg.norm(rows[0]) == pytest.approx(2.0)
    zero = make_blobs(2, 3, 4, spread=0.0, seed=1, noise=0.0)
    assert not zero.features.any()


def test_spread_six_is_learnable_centrally():
    arch = ModelArch("softmax", input_dim=10, num_classes=2)
    train, test = blob_task(2, 10, 200, 200, spread=6.0, seed=3)
    w = train_local(arch, init_params(arch, 0), train, OptimizerSpec(learning_rate=0.01), seed=0)
    assert evaluate(arch, w, test)[1] > 0.95


def test_blob_task_split_is_disjoint():
    train, test = blob_task(3, 4, 10, 5, 2.0, seed=0)
    assert len(train) == 30 and len(test) == 15
    rows = {r.tobytes() for r in train.features} & {r.tobytes() for r in test.features}
    assert not rows


def test_iid_shards_equal():
    data = make_blobs(4, 2, 25, 1.0, seed=0)
    shards = federate(data, FederationPlan(4), seed=0)
    assert [len(s) for s in shards] == [25, 25, 25, 25]
    uneven = federate_indices(np.zeros(10, dtype=int), FederationPlan(3), seed=0)
    assert sorted(len(s) for s in uneven) == [3, 3, 4]


def test_too_many_clients():
    with pytest.raises(ValueError):
        federate_indices(np.zeros(3, dtype=int), FederationPlan(4), seed=0)


@pytest.mark.parametrize("plan", [FederationPlan(7), FederationPlan(9, "dirichlet", 0.3, 5)])
def test_partition_disjoint_and_conserved(plan):
    labels = np.random.default_rng(0).integers(0, 4, 400)
    shards = federate_indices(labels, plan, seed=2)
    flat = np.concatenate(shards)
    assert len(flat) == len(set(flat.tolist()))
    assert sum(len(s) for s in shards) == flat.size
    if plan.scheme.value == "iid":
        assert flat.size == 400
    again = federate_indices(labels, plan, seed=2)
    assert all(np.array_equal(a, b) for a, b in zip(shards, again))


def test_dirichlet_large_alpha_is_near_iid():
    labels = np.repeat(np.arange(4), 2500)
    glob = np.bincount(labels) / labels.size
    shards = federate_indices(labels, FederationPlan(5, "dirichlet", 1e6, 30), seed=0)
    assert len(shards) == 5
    for s in shards:
        hist = np.bincount(labels[s], minlength=4) / s.size
        assert 0.5 * np.abs(hist - glob).sum() < 0.05


def test_dirichlet_small_alpha_is_skewed():
    labels = np.repeat([0, 1], 500)
    for seed in range(20):
        shards = federate_indices(labels, FederationPlan(10, "dirichlet", 0.1, 0), seed=seed)
        shares = [np.bincount(labels[s], minlength=2).max() / s.size for s in shards]
        assert max(shares) > 0.9


def test_dirichlet_drops_small_clients():
    labels = np.repeat([0, 1], 100)
    shards = federate_indices(labels, FederationPlan(20, "dirichlet", 0.1, 30), seed=1)
    assert all(s.size >= 30 for s in shards)
    assert len(shards) < 20


def test_dataset_file_roundtrip(tmp_path):
    data = make_blobs(3, 4, 5, 1.5, seed=0)
    path = tmp_path / "d.csv"
    save_dataset(data, path)
    assert path.read_text().splitlines()[0] == "15,4"
    back = load_dataset(path)
    assert back.features.tobytes() == data.features.tobytes()
    assert np.array_equal(back.labels, data.labels)
