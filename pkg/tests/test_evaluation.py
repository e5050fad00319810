import json

import numpy as np
import pytest

from feduda.evaluation import (
    FAR_LEVELS,
    evaluate,
    identification_eval,
    rank1_from_embeddings,
    roc_points,
    verification_eval,
    verification_from_scores,
    write_roc_csv,
)
from feduda.model import BackboneParams, init_backbone
from feduda.synth import DomainSpec, LabeledDataset, build_eval_split, generate_domain

from oracles import brute_rank1, brute_verification


def hand_case():
    scores = [0.9, 0.8, 0.3, 0.85, 0.2, 0.1]
    genuine = [True, True, True, False, False, False]
    return scores, genuine


def test_hand_case_matches_enumeration():
    scores, genuine = hand_case()
    res = verification_from_scores(scores, genuine, far_levels=(1 / 3, 0.1))
    acc, t, tar = brute_verification(scores, genuine, far_levels=(1 / 3, 0.1))
    # threshold 0.3 accepts all genuine pairs and one impostor
    assert res.accuracy == acc == 5 / 6
    assert res.threshold == t == 0.3
    assert res.tar_at_far[1 / 3] == tar[1 / 3] == 1.0
    assert res.achieved_far[1 / 3] == pytest.approx(1 / 3)
    # with no impostor allowed, only 0.9 clears 0.85
    assert res.tar_at_far[0.1] == tar[0.1] == pytest.approx(1 / 3)


@pytest.mark.parametrize("seed", range(20))
def test_verification_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 60))
    genuine = rng.random(n) < 0.5
    genuine[:2] = [True, False]
    # coarse rounding forces tied scores
    scores = np.round(rng.normal(genuine * 0.8, 0.5), int(rng.integers(1, 3)))
    res = verification_from_scores(scores, genuine)
    acc, t, tar = brute_verification(scores, genuine)
    assert res.accuracy == acc
    assert res.threshold == t
    assert res.tar_at_far == tar


@pytest.mark.parametrize("seed", range(5))
def test_enumeration_attains_dense_grid_optimum(seed):
    rng = np.random.default_rng(seed)
    genuine = np.arange(16) % 2 == 0
    scores = rng.normal(genuine * 0.5, 0.4)
    best_grid = 0.0
    for t in np.linspace(scores.min() - 1, scores.max() + 1, 20001):
        best_grid = max(best_grid, np.mean((scores >= t) == genuine))
    assert verification_from_scores(scores, genuine).accuracy == best_grid


def test_separated_scores():
    res = verification_from_scores([0.9, 0.8, 0.1, 0.0], [True, True, False, False])
    assert res.accuracy == 1.0
    assert all(v == 1.0 for v in res.tar_at_far.values())


def test_identical_scores():
    genuine = [True, False, False, False, True]
    res = verification_from_scores([0.5] * 5, genuine)
    assert res.accuracy == pytest.approx(3 / 5)


def test_needs_both_pair_kinds():
    with pytest.raises(ValueError):
        verification_from_scores([0.1, 0.2], [True, True])


def test_perfect_embeddings_in_eval():
    # one-hot identity features through an identity backbone
    x = np.repeat(np.eye(4), 3, axis=0)
    ds = LabeledDataset(x, np.repeat(np.arange(4), 3), "t", 4)
    split = build_eval_split(ds, 1.0, seed=0)
    acc, tar = verification_eval(BackboneParams(((np.eye(4), np.zeros(4)),)), split)
    assert acc == 1.0
    assert tar == {f: 1.0 for f in FAR_LEVELS}


def test_rank1_trivial_cases():
    q = np.eye(3)
    assert rank1_from_embeddings(q, [0, 1, 2], np.concatenate([q, q]), [0, 1, 2, 0, 1, 2]) == 1.0
    assert rank1_from_embeddings(q, [0, 1, 2], q, [5, 6, 7]) == 0.0
    with pytest.raises(ValueError):
        rank1_from_embeddings(q, [0, 1, 2], np.empty((0, 3)), [])


def test_rank1_hand_case():
    q = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    g = np.array([[0.9, 0.1], [0.1, 0.9], [0.8, 0.6], [0.5, 0.5], [-1.0, 0.0], [0.0, -1.0]])
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    qid, gid = [0, 1, 2], [0, 2, 2, 1, 0, 1]
    # nearest items: 0 (id 0, hit), 1 (id 2, miss), 3 (id 1, miss)
    assert rank1_from_embeddings(q, qid, g, gid) == brute_rank1(q, qid, g, gid) == pytest.approx(1 / 3)


@pytest.mark.parametrize("seed", range(20))
def test_rank1_matches_scan(seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((int(rng.integers(1, 8)), 3))
    g = rng.standard_normal((int(rng.integers(1, 12)), 3))
    qid = rng.integers(0, 4, len(q))
    gid = rng.integers(0, 4, len(g))
    assert rank1_from_embeddings(q, qid, g, gid) == brute_rank1(q, qid, g, gid)


def small_split(seed=0):
    spec = DomainSpec("t", 6, 4, 5, intra_noise_sigma=0.6)
    return build_eval_split(generate_domain(spec, seed), 1.0, seed)


@pytest.mark.parametrize("seed", range(5))
def test_report_tar_is_monotone(seed):
    rep = evaluate(init_backbone([5, 6, 3], seed), small_split(seed))
    tars = [rep.tar_at_far[f] for f in sorted(FAR_LEVELS, reverse=True)]
    assert tars == sorted(tars, reverse=True)
    assert 0.0 <= rep.verification_accuracy <= 1.0
    assert all(rep.achieved_far[f] <= f for f in FAR_LEVELS)


def test_scale_invariance():
    bb = init_backbone([5, 4], 3)
    w, b = bb.layers[0]
    scaled = BackboneParams(((w * 7.5, b * 7.5),))
    split = small_split()
    assert evaluate(bb, split) == evaluate(scaled, split)


def test_identification_eval_on_split():
    split = small_split(2)
    bb = init_backbone([5, 4], 1)
    direct = identification_eval(bb, split.query, split.gallery)
    assert direct == evaluate(bb, split).rank1


def test_record_and_roc(tmp_path):
    split = small_split(1)
    bb = init_backbone([5, 4], 0)
    rec = json.loads(evaluate(bb, split).to_json())
    assert {"verification_accuracy", "rank1", "tar@far=0.1"} <= set(rec)
    pts = roc_points(bb, split)
    assert pts[-1, 1] == 0.0 and pts[-1, 2] == 0.0
    assert np.all(np.diff(pts[:, 1]) <= 0)
    write_roc_csv(tmp_path / "roc.csv", pts)
    assert (tmp_path / "roc.csv").read_text().startswith("threshold,far,tar")
