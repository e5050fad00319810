import math

import numpy as np
import pytest

from feduda.model import (
    BackboneParams,
    BatchSampler,
    HeadParams,
    ModelParams,
    dcl_penalty,
    embed,
    forward_embed,
    init_backbone,
    load_checkpoint,
    local_objective,
    margin_loss_and_grads,
    new_head,
    new_model,
    save_checkpoint,
    sgd_step,
    train_steps,
)

from oracles import finite_difference_grads, relative_error

GRAD_TOL = 1e-4


def random_case(seed):
    rng = np.random.default_rng(seed)
    dims = [int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5))]
    if rng.random() < 0.5:
        dims = [dims[0], dims[2]]
    classes = int(rng.integers(2, 5))
    model = new_model(dims, classes, seed, m=float(rng.uniform(0.1, 0.6)), s=float(rng.uniform(2, 12)))
    # un-normalized head rows exercise the normalization Jacobian
    model = ModelParams(model.backbone, HeadParams(model.head.class_weights * rng.uniform(0.5, 2, (classes, 1)),
                                                   model.head.margin, model.head.scale))
    n = int(rng.integers(1, 7))
    x = rng.standard_normal((n, dims[0]))
    y = rng.integers(0, classes, n)
    return model, x, y


def analytic_arrays(grads):
    return grads.backbone.arrays() + [grads.head.class_weights]


@pytest.mark.parametrize("seed", range(24))
def test_margin_loss_gradients_match_finite_differences(seed):
    model, x, y = random_case(seed)
    _, grads = local_objective(model, x, y)
    for a, n in zip(analytic_arrays(grads), finite_difference_grads(model, x, y)):
        assert relative_error(a, n) < GRAD_TOL


@pytest.mark.parametrize("seed", range(24))
def test_gradients_with_proximal_term(seed):
    model, x, y = random_case(seed)
    rng = np.random.default_rng(1000 + seed)
    ref = BackboneParams.from_arrays([a + 0.3 * rng.standard_normal(a.shape) for a in model.backbone.arrays()])
    prox = (float(rng.uniform(0.01, 2.0)), ref)
    _, grads = local_objective(model, x, y, prox)
    for a, n in zip(analytic_arrays(grads), finite_difference_grads(model, x, y, prox)):
        assert relative_error(a, n) < GRAD_TOL


def test_embedding_is_unit_norm():
    bb = init_backbone([5, 7, 3], 0)
    e = embed(bb, np.random.default_rng(0).standard_normal((20, 5)))
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0)


def test_forward_embed_hand_case():
    bb = BackboneParams(((np.eye(2), np.zeros(2)),))
    assert np.allclose(forward_embed(bb, np.array([3.0, 4.0])), [0.6, 0.8])


def test_zero_margin_unit_scale_is_cosine_softmax():
    model = new_model([4, 3], 5, seed=2, m=0.0, s=1.0)
    x = np.random.default_rng(3).standard_normal((6, 4))
    y = np.array([0, 1, 2, 3, 4, 0])
    loss, _ = margin_loss_and_grads(model, x, y)
    e = embed(model.backbone, x)
    w = model.head.class_weights / np.linalg.norm(model.head.class_weights, axis=1, keepdims=True)
    logits = e @ w.T
    ref = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(logits, y)])
    assert loss == pytest.approx(ref, rel=1e-12)


def test_single_class_has_zero_loss_and_gradient():
    model = new_model([3, 4, 2], 1, seed=0)
    loss, grads = margin_loss_and_grads(model, np.ones((3, 3)), np.zeros(3, dtype=int))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert all(np.allclose(a, 0) for a in analytic_arrays(grads))


def test_loss_increases_with_margin():
    x = np.random.default_rng(0).standard_normal((8, 4))
    y = np.arange(8) % 3
    losses = []
    for m in (0.0, 0.2, 0.4, 0.6):
        losses.append(margin_loss_and_grads(new_model([4, 3], 3, seed=1, m=m), x, y)[0])
    assert losses == sorted(losses)


def test_zero_lambda_prox_is_bitwise_noop():
    model, x, y = random_case(5)
    _, grads = margin_loss_and_grads(model, x, y)
    ref = init_backbone(model.backbone.dims, 77)
    a = sgd_step(model, grads, 0.1)
    b = sgd_step(model, grads, 0.1, prox=(0.0, ref))
    assert a.backbone.equals(b.backbone)
    assert np.array_equal(a.head.class_weights, b.head.class_weights)


def test_prox_scalar_step():
    # theta=2, reference 0, zero loss gradient, lam=0.01, lr=1 -> 1.98
    bb = BackboneParams(((np.array([[2.0]]), np.array([0.0])),))
    ref = BackboneParams(((np.array([[0.0]]), np.array([0.0])),))
    model = ModelParams(bb, HeadParams(np.array([[1.0]])))
    zero = ModelParams(ref, HeadParams(np.array([[0.0]])))
    out = sgd_step(model, zero, 1.0, prox=(0.01, ref))
    assert out.backbone.layers[0][0][0, 0] == pytest.approx(1.98)
    assert dcl_penalty(bb, ref, 0.01) == pytest.approx(0.02)


def test_prox_pulls_toward_reference():
    model, x, y = random_case(9)
    ref = init_backbone(model.backbone.dims, 123)
    _, grads = margin_loss_and_grads(model, x, y)
    zero = ModelParams(BackboneParams.from_arrays([np.zeros_like(a) for a in grads.backbone.arrays()]), grads.head)
    out = sgd_step(model, zero, 0.1, prox=(1.0, ref))
    before = np.linalg.norm(model.backbone.flat() - ref.flat())
    after = np.linalg.norm(out.backbone.flat() - ref.flat())
    assert after == pytest.approx(0.9 * before)


def test_negative_lambda_rejected():
    model, x, y = random_case(1)
    _, grads = margin_loss_and_grads(model, x, y)
    with pytest.raises(ValueError):
        sgd_step(model, grads, 0.1, prox=(-1.0, model.backbone))
    with pytest.raises(ValueError):
        dcl_penalty(model.backbone, model.backbone, -0.5)


def test_new_head_rows_are_unit_and_seeded():
    a = new_head(6, 4, seed=3)
    b = new_head(6, 4, seed=3)
    assert a.class_weights.shape == (6, 4)
    assert np.allclose(np.linalg.norm(a.class_weights, axis=1), 1.0)
    assert np.array_equal(a.class_weights, b.class_weights)
    with pytest.raises(ValueError):
        new_head(0, 4)


@pytest.mark.parametrize("kw", [dict(margin=-0.1), dict(margin=2.0), dict(scale=0.0)])
def test_head_validation(kw):
    with pytest.raises(ValueError):
        HeadParams(np.ones((2, 2)), **kw)


def test_sgd_keeps_head_rows_normalized():
    model, x, y = random_case(4)
    _, grads = margin_loss_and_grads(model, x, y)
    out = sgd_step(model, grads, 0.5)
    assert np.allclose(np.linalg.norm(out.head.class_weights, axis=1), 1.0)


def test_sampler_covers_every_sample_each_epoch():
    sampler = BatchSampler(10, seed=4)
    seen = []
    for _ in range(5):
        idx, sampler = sampler.next_batch(4)
        seen.extend(idx.tolist())
    assert sorted(seen[:10]) == list(range(10))
    assert sorted(seen[10:20]) == list(range(10))


def test_sampler_small_dataset_clamps_batch():
    idx, _ = BatchSampler(3, 0).next_batch(8)
    assert sorted(idx.tolist()) == [0, 1, 2]


def test_train_steps_is_deterministic_and_counts_batches():
    model, _, _ = random_case(2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((30, model.backbone.input_dim))
    y = rng.integers(0, model.head.num_classes, 30)
    a = train_steps(model, x, y, 7, 0.1, 8, BatchSampler(30, 1))
    b = train_steps(model, x, y, 7, 0.1, 8, BatchSampler(30, 1))
    assert len(a[3]) == 7
    assert a[0].backbone.equals(b[0].backbone)
    assert a[2] == b[2]


@pytest.mark.parametrize("full", [False, True])
def test_checkpoint_round_trip_is_exact(tmp_path, full):
    model, _, _ = random_case(6)
    obj = model if full else model.backbone
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, obj)
    back = load_checkpoint(path)
    if full:
        assert back.backbone.equals(model.backbone)
        assert np.array_equal(back.head.class_weights, model.head.class_weights)
        assert (back.head.margin, back.head.scale) == (model.head.margin, model.head.scale)
    else:
        assert isinstance(back, BackboneParams) and back.equals(model.backbone)
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"\x07nope")
    with pytest.raises(ValueError):
        load_checkpoint(p)
