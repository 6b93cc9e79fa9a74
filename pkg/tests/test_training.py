import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spoofsplice import autodiff as ad
from spoofsplice.autodiff import Tensor
from spoofsplice.model import build, preset
from spoofsplice.training import (
    AdamState,
    BestKeeper,
    EpochRecord,
    LabelError,
    LabeledExample,
    TrainConfigError,
    TrainingError,
    adam_step,
    evaluate,
    load_examples,
    load_families,
    protocol_class_counts,
    read_manifest,
    relabel_la,
    select_best,
    sparse_ce,
    train,
    write_log,
)

ATTACKS = [f"A{i:02d}" for i in range(1, 20)]


# -- relabeling ----------------------------------------------------------

def test_combined_attacks_count_as_tts():
    for a in ("A13", "A14", "A15"):
        assert relabel_la(a, "3class") == 1


def test_bonafide_is_zero_in_both_modes():
    assert relabel_la("bonafide", "2class") == relabel_la("bonafide", "3class") == 0


def test_family_table_covers_every_attack_once():
    fam = load_families()
    assert sorted(fam) == ATTACKS
    assert set(fam.values()) == {"TTS", "VC"}


@pytest.mark.parametrize("attack", ATTACKS)
def test_two_class_labels_follow_from_three_class(attack):
    three = relabel_la(attack, "3class")
    assert three in (1, 2)
    assert relabel_la(attack, "2class") == {0: 0, 1: 1, 2: 1}[three]


def test_relabel_errors():
    with pytest.raises(LabelError):
        relabel_la("A20")
    with pytest.raises(LabelError):
        relabel_la("A01", "4class")


def test_user_family_table(tmp_path):
    path = tmp_path / "fam.json"
    path.write_text(json.dumps({"TTS": ["A05"], "VC": ["A01"]}))
    fam = load_families(path)
    assert relabel_la("A05", families=fam) == 1 and relabel_la("A01", families=fam) == 2
    path.write_text(json.dumps({"TTS": ["A05"], "VC": ["A05"]}))
    with pytest.raises(LabelError):
        load_families(path)


def _protocol(path, per_attack, bonafide):
    with open(path, "w") as fh:
        n = 0
        for _ in range(bonafide):
            fh.write(f"LA_0001 LA_T_{n:07d} - - bonafide\n")
            n += 1
        for attack, count in per_attack.items():
            for _ in range(count):
                fh.write(f"LA_0001 LA_T_{n:07d} - {attack} spoof\n")
                n += 1


@pytest.mark.parametrize("attacks,per,bona,tts,vc", [
    (ATTACKS[:6], 3800, 2580, 15200, 7600),
    (ATTACKS[:6], 3716, 2548, 14864, 7432),
    (ATTACKS[6:], 4914, 7355, 49140, 14742),
])
def test_protocol_counts_for_official_attack_layout(tmp_path, attacks, per, bona, tts, vc):
    """Each split's attacks at their official per-attack counts give the published class totals."""
    path = tmp_path / "protocol.txt"
    _protocol(path, {a: per for a in attacks}, bona)
    assert protocol_class_counts(path) == {0: bona, 1: tts, 2: vc}
    assert protocol_class_counts(path, "2class") == {0: bona, 1: tts + vc}


def test_malformed_protocol(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("LA_0001 LA_T_1 -\n")
    with pytest.raises(LabelError):
        protocol_class_counts(path)


# -- loss ----------------------------------------------------------------

def test_ce_perfect_prediction():
    p = Tensor(np.eye(3))
    assert float(sparse_ce(p, [0, 1, 2]).data) <= 1e-6


def test_ce_uniform_three_class():
    p = Tensor(np.full((4, 3), 1 / 3))
    assert float(sparse_ce(p, [0, 1, 2, 0]).data) == pytest.approx(math.log(3), abs=1e-12)


def test_ce_floors_zero_probability():
    p = Tensor(np.array([[1.0, 0.0]]))
    assert float(sparse_ce(p, [1]).data) == pytest.approx(-math.log(1e-12))


def test_ce_label_errors():
    p = Tensor(np.full((2, 3), 1 / 3))
    with pytest.raises(LabelError):
        sparse_ce(p, [0, 3])
    with pytest.raises(LabelError):
        sparse_ce(p, [0])


@pytest.mark.parametrize("seed", range(3))
def test_ce_softmax_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    labels = rng.integers(0, 3, size=4)
    loss = lambda: sparse_ce(ad.softmax(logits), labels)
    assert ad.grad_check(loss, [logits]) < 1e-6
    # closed form: (softmax - onehot) / B
    logits.grad = None
    loss().backward()
    p = np.exp(logits.data) / np.exp(logits.data).sum(1, keepdims=True)
    p[np.arange(4), labels] -= 1
    np.testing.assert_allclose(logits.grad, p / 4, atol=1e-12)


# -- Adam ----------------------------------------------------------------

def test_adam_first_step_with_unit_gradient():
    p = {"w": Tensor(np.zeros(5))}
    adam_step(p, {"w": np.ones(5)}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(p["w"].data, -1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.arange(4.0))}
    adam_step(p, {"w": np.zeros(4)}, AdamState())
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0))


def test_adam_matches_hand_computed_second_step():
    p = {"w": Tensor(np.array([1.0]))}
    s = AdamState()
    adam_step(p, {"w": np.array([2.0])}, s, lr=0.1)
    adam_step(p, {"w": np.array([-1.0])}, s, lr=0.1)
    m1, v1 = 0.1 * 2, 0.001 * 4
    m2, v2 = 0.9 * m1 + 0.1 * -1, 0.999 * v1 + 0.001 * 1
    step2 = 0.1 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert p["w"].data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8 / 2) - step2, rel=1e-9)
    assert s.step == 2


def test_adam_minimizes_sum_of_squares():
    rng = np.random.default_rng(0)
    p = {"w": Tensor(rng.normal(size=10))}
    s = AdamState()
    for step in range(2000):
        adam_step(p, {"w": 2 * p["w"].data}, s, lr=1e-2)
        if np.linalg.norm(p["w"].data) < 1e-3:
            break
    assert np.linalg.norm(p["w"].data) < 1e-3


def test_adam_rejects_non_finite():
    p = {"w": Tensor(np.zeros(2))}
    s = AdamState()
    with pytest.raises(TrainingError, match="w at step 1"):
        adam_step(p, {"w": np.array([1.0, np.nan])}, s)
    assert s.step == 0
    np.testing.assert_array_equal(p["w"].data, 0)


# -- selection -----------------------------------------------------------

def test_select_best_ties_go_to_earliest():
    assert select_best([3.0, 2.0, 2.5, 2.0, 4.0]) == 2
    assert select_best([1.0]) == 1


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30))
def test_select_best_is_first_argmin(losses):
    assert select_best(losses) == int(np.argmin(losses)) + 1


def test_best_keeper_snapshots_only_on_strict_improvement():
    keeper = BestKeeper()
    calls = []
    snap = lambda: calls.append(1) or len(calls)
    assert keeper.offer(1, 2.0, snap)
    assert not keeper.offer(2, 2.0, snap)
    assert keeper.offer(3, 1.0, snap)
    assert keeper.best_epoch == 3 and keeper.state == 2


# -- loop ----------------------------------------------------------------

SMALL = (16, 24, 1)


def _toy_examples(n, seed, classes=2):
    """Class c has a bright band on frequency rows 8c..8c+8."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % classes
        x = 0.1 * rng.standard_normal(SMALL[:2]).astype(np.float32)
        x[:, 8 * label:8 * label + 8] += 1.0
        out.append(LabeledExample(x, label, f"u{i}"))
    return out


def _tiny(classes=2, seed=0):
    return build(preset("tiny-plain", input_shape=SMALL, num_classes=classes), seed=seed)


def test_train_returns_checkpoint_of_min_dev_loss():
    model = _tiny()
    res = train(model, _toy_examples(12, 0), _toy_examples(6, 1), epochs=6, batch_size=4, lr=3e-3)
    dev = [r.dev_loss for r in res.log]
    assert res.best_epoch == int(np.argmin(dev)) + 1
    assert res.best_dev_loss == min(dev)
    assert res.best.metadata["epoch"] == res.best_epoch
    # the returned state reproduces its recorded dev loss
    again = build(model.config)
    again.load_state(res.best)
    loss, _, _ = evaluate(again, _toy_examples(6, 1))
    assert loss == pytest.approx(res.best_dev_loss, rel=1e-6)


def test_train_is_deterministic():
    logs = []
    for _ in range(2):
        res = train(_tiny(), _toy_examples(8, 0), _toy_examples(4, 1), epochs=2, batch_size=4, seed=3)
        logs.append(res.log)
    assert logs[0] == logs[1]


def test_train_stop_callback():
    res = train(_tiny(), _toy_examples(8, 0), _toy_examples(4, 1), epochs=5, batch_size=4,
                stop=lambda rec, m: rec.epoch == 2)
    assert len(res.log) == 2


def test_single_step_decreases_example_loss():
    from spoofsplice.training import stack, train_step
    for seed in range(3):
        model = _tiny(seed=seed)
        ex = _toy_examples(1, seed)
        x, y = stack(ex)
        before = float(sparse_ce(model.forward(x, mode="train"), y).data)
        train_step(model, x, y, AdamState(), lr=1e-4, seed=0)
        after = float(sparse_ce(model.forward(x, mode="train"), y).data)
        assert after < before


def test_train_config_errors():
    with pytest.raises(TrainConfigError):
        train(_tiny(), [], _toy_examples(2, 0))
    with pytest.raises(TrainConfigError):
        train(_tiny(), _toy_examples(2, 0), _toy_examples(2, 0), epochs=0)
    with pytest.raises(LabelError):
        train(_tiny(2), _toy_examples(3, 0, classes=3), _toy_examples(2, 0))


def test_write_log(tmp_path):
    hist = [EpochRecord(1, 0.9, 0.8, 0.5), EpochRecord(2, 0.7, 0.6, 0.75)]
    write_log(hist, tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert float(rows[1]["dev_sca"]) == 0.75


# -- manifests -----------------------------------------------------------

def test_manifest_with_attack_ids(tmp_path):
    from spoofsplice.audio_io import AudioClip, write_wav
    rng = np.random.default_rng(0)
    for i in range(3):
        write_wav(AudioClip(0.1 * rng.standard_normal(8000)), tmp_path / f"{i}.wav")
    (tmp_path / "m.csv").write_text("path,attack_id\n0.wav,bonafide\n1.wav,A01\n2.wav,A05\n")
    ex = load_examples(tmp_path / "m.csv", "3class", frames=40)
    assert [e.label for e in ex] == [0, 1, 2]
    assert ex[0].features.shape == (40, 432)
    ex2 = load_examples(tmp_path / "m.csv", "2class", frames=40)
    assert [e.label for e in ex2] == [0, 1, 1]


def test_manifest_errors(tmp_path):
    (tmp_path / "m.csv").write_text("file,kind\n")
    with pytest.raises(TrainConfigError):
        read_manifest(tmp_path / "m.csv")
    (tmp_path / "e.csv").write_text("path,label\n")
    with pytest.raises(TrainConfigError):
        load_examples(tmp_path / "e.csv")
