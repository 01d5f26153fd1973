import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from misgen._validation import ContractViolation, GateFailure
from misgen.env import Action, CellClass
from misgen.extrapolate import (
    DiverseHeadsClassifier, HypothesisPair, LabeledSet, UnlabeledSet, collect_labeled,
    collect_unlabeled, disagreement_rate, head_reward, mutual_information,
    mutual_information_grad, order_heads, probe_transitions, read_dataset, write_dataset,
)
from misgen.levels import LevelDistribution, Mode
from misgen.nn import Network
from misgen.obs import WINDOW, decode_input, input_size
from misgen.policies import AlwaysRightPolicy, BaselinePolicy
from misgen.rollout import REWARD_AUDIT

from oracles import brute_force_mi, synthetic_task

TRAIN = LevelDistribution(Mode.TRAIN_RIGHT)
TEST = LevelDistribution(Mode.TEST_RANDOM)
probs = arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1))


# -- mutual information ------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.data())
def test_mi_matches_brute_force_and_is_symmetric(data):
    p = data.draw(probs)
    q = data.draw(arrays(np.float64, p.shape, elements=st.floats(0, 1)))
    mi = mutual_information(p, q)
    assert mi == pytest.approx(brute_force_mi(p, q), abs=1e-9)
    assert abs(mi - mutual_information(q, p)) <= 1e-12
    assert 0.0 <= mi <= math.log(2) + 1e-12


def test_mi_zero_for_constant_batch():
    p = np.full(50, 0.3)
    q = np.random.default_rng(0).random(50)
    assert mutual_information(p, q) == 0.0


def test_mi_reaches_ln2_for_identical_hard_coins():
    p = np.tile([0.0, 1.0], 500)
    assert mutual_information(p, p) == pytest.approx(math.log(2), abs=1e-3)


def test_mi_rejects_bad_input():
    with pytest.raises(ContractViolation):
        mutual_information([0.5, 1.2], [0.1, 0.2])
    with pytest.raises(ContractViolation):
        mutual_information([0.5], [0.1, 0.2])


def test_mi_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    p, q = rng.uniform(0.05, 0.95, 20), rng.uniform(0.05, 0.95, 20)
    mi, dp, dq = mutual_information_grad(p, q)
    assert mi == pytest.approx(mutual_information(p, q), abs=1e-12)
    eps = 1e-6
    for i in range(20):
        e = np.zeros(20)
        e[i] = eps
        assert dp[i] == pytest.approx((mutual_information(p + e, q) - mutual_information(p - e, q)) / (2 * eps), abs=1e-8)
        assert dq[i] == pytest.approx((mutual_information(p, q + e) - mutual_information(p, q - e)) / (2 * eps), abs=1e-8)


# -- classifier --------------------------------------------------------------------

def test_heads_split_the_two_features():
    rng = np.random.default_rng(0)
    X, y = synthetic_task(600, rng)
    U = rng.uniform(-1, 1, (600, 2))
    T = rng.uniform(-1, 1, (2000, 2))
    clf = DiverseHeadsClassifier(hidden=(32,), lambda_mi=10.0, epochs=60, lr=3e-3, seed=0).fit(X, y, U)
    P = clf.predict(T)
    feats = (T[:, 0] > 0, T[:, 1] > 0)
    best = max(np.mean(P[:, 0] == feats[0]) + np.mean(P[:, 1] == feats[1]),
               np.mean(P[:, 0] == feats[1]) + np.mean(P[:, 1] == feats[0]))
    assert best / 2 > 0.9
    assert disagreement_rate(clf.head_proba(T)) > 0.3


def test_classifier_is_deterministic_and_clonable():
    from sklearn.base import clone
    rng = np.random.default_rng(2)
    X, y = synthetic_task(100, rng)
    U = rng.uniform(-1, 1, (100, 2))
    a = DiverseHeadsClassifier(hidden=(8,), epochs=3, seed=5).fit(X, y, U)
    b = clone(a).fit(X, y, U)
    assert a.net_.equal(b.net_) and len(a.history_) == 3


def test_classifier_needs_both_classes():
    with pytest.raises(ContractViolation):
        DiverseHeadsClassifier().fit(np.zeros((4, 2)), np.ones(4), np.zeros((4, 2)))


def test_swap_heads_swaps_outputs():
    rng = np.random.default_rng(3)
    X, y = synthetic_task(50, rng)
    clf = DiverseHeadsClassifier(hidden=(8,), epochs=2).fit(X, y, X)
    before = clf.head_proba(X)
    clf.swap_heads()
    np.testing.assert_array_equal(clf.head_proba(X), before[:, ::-1])


def test_probe_transitions_show_the_intended_events():
    probes = probe_transitions()
    right = decode_input(probes["right"][0])
    coin = decode_input(probes["coin"][0])
    r = WINDOW // 2
    assert right.action_code == coin.action_code == Action.RIGHT
    # after the right step the next column is the border wall
    assert np.all(right.cur_frame[1:r + 2, r + 1] == CellClass.WALL)
    assert (coin.prev_frame == CellClass.COIN).any() and not (coin.cur_frame == CellClass.COIN).any()


def test_order_heads_puts_right_head_first():
    clf = DiverseHeadsClassifier(hidden=(4,))
    clf.net_ = Network(input_size(), (4,), {"h0": 1, "h1": 1}, seed=0)
    probes = probe_transitions()
    r, c = clf.head_proba(probes["right"])[0], clf.head_proba(probes["coin"])[0]
    order_heads(clf)
    r2, c2 = clf.head_proba(probes["right"])[0], clf.head_proba(probes["coin"])[0]
    assert (r2[0] - r2[1]) + (c2[1] - c2[0]) >= 0
    assert abs((r2[0] - r2[1]) + (c2[1] - c2[0])) == pytest.approx(abs((r[0] - r[1]) + (c[1] - c[0])))


# -- datasets ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def labeled():
    return collect_labeled(AlwaysRightPolicy(), TRAIN, episodes=12, neg_per_pos=3, seed=1)


def test_labeled_set_positives_show_coin_pickup(labeled):
    assert labeled.n_positive >= 9
    assert len(labeled) == labeled.n_positive * 4
    for i in np.flatnonzero(labeled.labels):
        assert (labeled.prev[i] == CellClass.COIN).any()
        assert not (labeled.cur[i] == CellClass.COIN).any()


def test_labeled_collection_is_deterministic(labeled):
    again = collect_labeled(AlwaysRightPolicy(), TRAIN, episodes=12, neg_per_pos=3, seed=1)
    assert np.array_equal(again.prev, labeled.prev) and np.array_equal(again.labels, labeled.labels)


def test_labeled_needs_train_levels_and_a_positive():
    with pytest.raises(ContractViolation):
        collect_labeled(AlwaysRightPolicy(), TEST, episodes=2)
    from misgen.rollout import ConstantPolicy
    with pytest.raises(GateFailure):
        collect_labeled(ConstantPolicy(Action.LEFT), TRAIN, episodes=2)


def test_dataset_jsonl_round_trip(tmp_path, labeled):
    path = write_dataset(tmp_path / "l.jsonl", labeled)
    back = read_dataset(path)
    assert isinstance(back, LabeledSet) and back.neg_per_pos == 3
    for name in ("prev", "cur", "actions", "level_seeds", "t", "labels"):
        assert np.array_equal(getattr(back, name), getattr(labeled, name))


def test_read_dataset_reports_bad_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"frames": ["0*225"]}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_dataset(path)


def test_unlabeled_collection_never_reads_reward(tmp_path):
    u = collect_unlabeled(TEST, episodes=4, steps_per_episode=10, explorer=BaselinePolicy(), seed=0)
    assert REWARD_AUDIT.count() == 0
    assert 0 < len(u) <= 40 and u.t.max() <= 10
    back = read_dataset(write_dataset(tmp_path / "u.jsonl", u))
    assert type(back) is UnlabeledSet and back.provenance() == u.provenance()


def test_unlabeled_needs_test_levels():
    with pytest.raises(ContractViolation):
        collect_unlabeled(TRAIN, episodes=1)


def test_set_length_check():
    with pytest.raises(ContractViolation):
        UnlabeledSet(np.zeros((2, 3, 3)), np.zeros((1, 3, 3)), np.zeros(2), np.zeros(2), np.zeros(2))


def test_pair_save_load_and_head_reward(tmp_path):
    net = Network(input_size(), (4,), {"h0": 1, "h1": 1}, seed=0)
    pair = HypothesisPair(net, 0.5, {"note": 1})
    pair.save(tmp_path / "pair.json")
    back = HypothesisPair.load(tmp_path / "pair.json")
    assert back.net.equal(net) and back.tau == 0.5 and back.metadata == {"note": 1}
    obs = decode_input(probe_transitions()["coin"][0])
    assert head_reward(back, 1, obs) == pytest.approx(pair.head_proba(probe_transitions()["coin"])[0, 1])
    with pytest.raises(ContractViolation):
        head_reward(pair, 2, obs)
