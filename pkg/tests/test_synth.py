import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feduda.synth import (
    DomainSpec,
    LabeledDataset,
    build_eval_split,
    concat_datasets,
    domain_transform,
    generate_domain,
    genuine_pairs,
    load_dataset,
    partition_clients,
    save_dataset,
    split_train_eval,
)


def small_spec(**kw):
    base = dict(name="a", num_identities=3, samples_per_identity=4, input_dim=5, intra_noise_sigma=0.2)
    base.update(kw)
    return DomainSpec(**base)


def test_generate_is_deterministic_bytewise():
    a = generate_domain(small_spec(), seed=7)
    b = generate_domain(small_spec(), seed=7)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.identities.tobytes() == b.identities.tobytes()


def test_generate_counts():
    ds = generate_domain(small_spec(), seed=7)
    assert len(ds) == 12
    assert set(ds.identities.tolist()) == {0, 1, 2}
    assert ds.num_identities == 3
    assert all(s.domain == "a" for s in ds.samples)


def test_shifted_domains_have_distant_means():
    sigma = 0.2
    off = np.zeros(5)
    off[0] = 3.0
    a = generate_domain(small_spec(name="a", intra_noise_sigma=sigma, rotation_strength=0.0), seed=1)
    b = generate_domain(
        small_spec(name="b", intra_noise_sigma=sigma, rotation_strength=0.0, shift_offset=tuple(off)), seed=1
    )
    # independent mean/distance computation over every sample
    mean_a = [sum(row[k] for row in a.features.tolist()) / len(a) for k in range(5)]
    mean_b = [sum(row[k] for row in b.features.tolist()) / len(b) for k in range(5)]
    dist = math.sqrt(sum((x - y) ** 2 for x, y in zip(mean_a, mean_b)))
    assert dist > sigma
    assert dist == pytest.approx(3.0)


@pytest.mark.parametrize(
    "field,kw",
    [
        ("num_identities", dict(num_identities=0)),
        ("samples_per_identity", dict(samples_per_identity=1)),
        ("input_dim", dict(input_dim=1)),
        ("intra_noise_sigma", dict(intra_noise_sigma=0.0)),
        ("shift_offset", dict(shift_offset=(1.0, 2.0))),
        ("identity_rank", dict(identity_rank=9)),
    ],
)
def test_invalid_spec_names_field(field, kw):
    with pytest.raises(ValueError, match=field):
        small_spec(**kw)


def test_transform_is_orthogonal_and_zero_strength_is_identity():
    q = domain_transform(small_spec(input_dim=8, rotation_strength=0.9, shift_rotation_seed=3))
    assert np.allclose(q @ q.T, np.eye(8), atol=1e-12)
    assert np.linalg.det(q) == pytest.approx(1.0)
    assert np.allclose(domain_transform(small_spec(rotation_strength=0.0)), np.eye(5))


def test_rotation_strength_bounds_angles():
    q = domain_transform(small_spec(input_dim=8, rotation_strength=0.5, shift_rotation_seed=3))
    angles = np.abs(np.angle(np.linalg.eigvals(q)))
    assert angles.max() == pytest.approx(0.5, abs=1e-9)


def test_impurity_leaves_some_identities_untransformed():
    off = tuple([2.0] + [0.0] * 4)
    pure = generate_domain(small_spec(num_identities=10, shift_offset=off), seed=0)
    dirty = generate_domain(small_spec(num_identities=10, shift_offset=off, impurity_fraction=0.3), seed=0)
    changed = {int(i) for i in np.unique(dirty.identities[np.any(pure.features != dirty.features, axis=1)])}
    assert len(changed) == 3


def test_partition_7000_identities_into_4():
    spec = DomainSpec("t", 7000, 2, 2, intra_noise_sigma=0.1)
    clients = partition_clients(generate_domain(spec, 0), 4)
    assert [c.num_identities for c in clients] == [1750] * 4


def test_partition_single_client_is_identity():
    ds = generate_domain(small_spec(), 0)
    (only,) = partition_clients(ds, 1)
    assert only.equals(ds)


def test_partition_uneven():
    ds = generate_domain(small_spec(num_identities=10), 0)
    clients = partition_clients(ds, 3)
    assert [c.num_identities for c in clients] == [4, 3, 3]
    sets = [set(c.label_origin[c.identities].tolist()) for c in clients]
    assert set().union(*sets) == set(range(10))
    assert all(not (sets[i] & sets[j]) for i in range(3) for j in range(i + 1, 3))
    for c in clients:
        assert set(c.identities.tolist()) == set(range(c.num_identities))


def test_partition_too_many_clients():
    with pytest.raises(ValueError):
        partition_clients(generate_domain(small_spec(), 0), 4)


@settings(max_examples=40, deadline=None)
@given(n_ids=st.integers(1, 30), K=st.integers(1, 30), seed=st.integers(0, 10))
def test_partition_property(n_ids, K, seed):
    if K > n_ids:
        return
    ds = generate_domain(small_spec(num_identities=n_ids, samples_per_identity=2, input_dim=2), seed)
    clients = partition_clients(ds, K)
    origins = [c.label_origin.tolist() for c in clients]
    flat = sorted(sum(origins, []))
    assert flat == list(range(n_ids))
    sizes = [c.num_identities for c in clients]
    assert max(sizes) - min(sizes) <= 1
    assert sum(len(c) for c in clients) == len(ds)
    # features land with the right original identity
    for c in clients:
        for row, lab in zip(c.features, c.identities):
            orig = c.label_origin[lab]
            assert any(np.array_equal(row, r) for r in ds.features[ds.identities == orig])


def test_eval_split_counts():
    ds = generate_domain(small_spec(num_identities=2, samples_per_identity=3), 0)
    split = build_eval_split(ds, 1.0, seed=0)
    assert len(split.query) == 2
    assert len(split.gallery) == 4
    assert sorted(split.query.identities.tolist()) == [0, 1]
    assert set(split.gallery.identities.tolist()) == {0, 1}


def test_genuine_pairs_of_three():
    assert len(genuine_pairs([5, 5, 5])) == 3


def test_impostor_pairs_never_share_identity():
    ds = generate_domain(small_spec(num_identities=6, samples_per_identity=4), 1)
    split = build_eval_split(ds, 1.0, seed=3)
    ids = split.dataset.identities
    n_gen = 0
    for i, j, genuine in split.test_pairs:
        assert (ids[i] == ids[j]) == genuine
        n_gen += genuine
    assert n_gen == 6 * 6
    assert len(split.test_pairs) == 2 * n_gen
    assert len({(i, j) for i, j, _ in split.test_pairs}) == len(split.test_pairs)


def test_eval_split_rejects_singletons():
    ds = LabeledDataset(np.arange(6.0).reshape(3, 2), [0, 1, 1], "x", 2)
    with pytest.raises(ValueError, match="fewer than 2"):
        build_eval_split(ds, 1.0, 0)


def test_split_train_eval_is_disjoint():
    ds = generate_domain(small_spec(num_identities=10), 0)
    train, split = split_train_eval(ds, 0.3, 5)
    assert train.num_identities == 7
    held = set(split.dataset.identities.tolist())
    assert len(held) == 3
    assert held.isdisjoint(set(train.label_origin.tolist()))


def test_concat_offsets_labels():
    a = generate_domain(small_spec(), 0)
    b = generate_domain(small_spec(num_identities=2), 1)
    c = concat_datasets([a, b])
    assert c.num_identities == 5
    assert c.identities[len(a):].min() == 3


def test_domain_shift_hurts_a_linear_classifier():
    # same canonical draw, two different transforms: identities correspond
    base = dict(num_identities=8, samples_per_identity=30, input_dim=6, intra_noise_sigma=0.3)
    a = generate_domain(DomainSpec("a", rotation_strength=0.0, **base), 4)
    b = generate_domain(DomainSpec("b", rotation_strength=1.0, shift_rotation_seed=9, **base), 4)
    xa = np.hstack([a.features, np.ones((len(a), 1))])
    w, *_ = np.linalg.lstsq(xa, np.eye(8)[a.identities], rcond=None)
    err_a = np.mean(np.argmax(xa @ w, 1) != a.identities)
    xb = np.hstack([b.features, np.ones((len(b), 1))])
    err_b = np.mean(np.argmax(xb @ w, 1) != b.identities)
    assert err_b > err_a


def test_text_round_trip(tmp_path):
    ds = generate_domain(small_spec(), 11)
    path = tmp_path / "d.txt"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.equals(ds)
    assert back.features.tobytes() == ds.features.tobytes()
    save_dataset(tmp_path / "e.txt", back)
    assert (tmp_path / "e.txt").read_bytes() == path.read_bytes()


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("hello world\n")
    with pytest.raises(ValueError):
        load_dataset(p)
