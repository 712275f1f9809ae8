import math

import pytest
import torch

from conftest import ACCEPTANCE_TARGET, linear_pair
from zsforget.encoders import RAW, InputError, build_class_prompts, build_toy_pair
from zsforget.evaluation import (
    CONSISTENT_FORGOTTEN,
    CONSISTENT_NOT_FORGOTTEN,
    DISCREPANCY_OVERCONFIDENT,
    DISCREPANCY_UNDERCONFIDENT,
    EvalReport,
    VerificationThresholds,
    before_after_report,
    classification_accuracy,
    is_discrepancy,
    verify_forgetting,
)
from zsforget.report import bf_af
from zsforget.toydata import LabeledImageSet

NAMES = ["a", "b", "c"]


def _onehot_pair():
    """Logits equal the image's three pixels, so predictions are set by the fixture."""
    pair = linear_pair(torch.eye(3), (1, 1, 3), NAMES, torch.eye(3))
    pair.normalization_mode = RAW
    return pair, build_class_prompts(NAMES, "{}")


def _dataset(pred, labels):
    images = torch.nn.functional.one_hot(torch.tensor(pred), 3).double().reshape(-1, 1, 1, 3)
    return LabeledImageSet(images, torch.tensor(labels), list(NAMES))


def test_perfect_fixture():
    pair, prompts = _onehot_pair()
    acc = classification_accuracy(pair, _dataset([0, 1, 2, 1], [0, 1, 2, 1]), prompts)
    assert dict(acc) == {"a": 1.0, "b": 1.0, "c": 1.0} and acc.pooled() == 1.0


def test_adversarial_fixture():
    pair, prompts = _onehot_pair()
    acc = classification_accuracy(pair, _dataset([1, 2, 0, 0], [0, 1, 2, 1]), prompts)
    assert all(v == 0.0 for v in acc.values()) and acc.pooled() == 0.0


def test_hand_counted_fixture():
    pair, prompts = _onehot_pair()
    labels = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    preds = [0, 1, 0, 1, 2, 2, 2, 0, 2]
    acc = classification_accuracy(pair, _dataset(preds, labels), prompts)
    assert acc["a"] == pytest.approx(2 / 3) and acc["b"] == 0.5 and acc["c"] == 0.75
    assert acc.pooled() == pytest.approx(6 / 9)
    assert acc.pooled(weighting="class") == pytest.approx((2 / 3 + 0.5 + 0.75) / 3)
    assert acc.pooled(["b", "c"]) == pytest.approx(4 / 6)


def test_pooled_matches_streaming_counter():
    pair, prompts = _onehot_pair()
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        n = int(torch.randint(3, 40, (1,), generator=g))
        labels = torch.randint(0, 3, (n,), generator=g).tolist()
        preds = torch.randint(0, 3, (n,), generator=g).tolist()
        correct = total = 0
        for p, y in zip(preds, labels):
            correct += p == y
            total += 1
        assert classification_accuracy(pair, _dataset(preds, labels), prompts).pooled() == correct / total


def test_empty_class_excluded():
    pair, prompts = _onehot_pair()
    acc = classification_accuracy(pair, _dataset([0, 1], [0, 1]), prompts)
    assert "c" not in acc and acc.excluded == ["c"]


def test_class_filter():
    pair, prompts = _onehot_pair()
    acc = classification_accuracy(pair, _dataset([0, 1, 2], [0, 1, 2]), prompts, class_filter={"b"})
    assert list(acc) == ["b"]


def test_prompt_dataset_mismatch():
    pair, _ = _onehot_pair()
    with pytest.raises(InputError):
        classification_accuracy(pair, _dataset([0], [0]), build_class_prompts(["x", "y", "z"], "{}"))


def test_unknown_weighting():
    pair, prompts = _onehot_pair()
    with pytest.raises(InputError):
        classification_accuracy(pair, _dataset([0], [0]), prompts).pooled(weighting="median")


def test_identity_report(toy):
    report = before_after_report(toy.pair, toy.pair, toy.test, "shapes", ACCEPTANCE_TARGET)
    assert report.target_acc_bf == report.target_acc_af
    assert report.other_acc_bf == report.other_acc_af
    assert list(report.cross_dataset_acc) == ["patterns"]
    bf, af = report.cross_dataset_acc["patterns"]
    assert bf == af


def test_report_validation(toy):
    with pytest.raises(InputError):
        before_after_report(toy.pair, build_toy_pair(embed_dim=16), toy.test, "shapes", ACCEPTANCE_TARGET)
    with pytest.raises(InputError):
        before_after_report(toy.pair, toy.pair, toy.test, "absent", ACCEPTANCE_TARGET)
    with pytest.raises(InputError):
        before_after_report(toy.pair, toy.pair, toy.test, "shapes", "purple hexagon")


def test_report_extras_routed(toy):
    extras = {"synth_train_acc": 0.5, "verdicts": ["x"], "note": 1}
    report = before_after_report(toy.pair, toy.pair, toy.test, "shapes", ACCEPTANCE_TARGET, extras=extras)
    assert report.synth_train_acc == 0.5 and report.verdicts == ["x"] and report.extras == {"note": 1}


def test_report_dict_round_trip():
    row = EvalReport("Lip", "ZS", "t", "d", 0.397, 0.056, 0.9, 0.8, {"other": (0.5, 0.4)}, 0.03, 0.0)
    assert EvalReport.from_dict(row.to_dict()) == row
    with pytest.raises(InputError):
        EvalReport("Lip", "bogus", "t", "d", 0, 0, 0, 0)


def test_paper_row_formatting():
    assert bf_af(0.397, 0.056) == "0.397 → 0.056"


def test_toy_run_gate(runs):
    row = runs["lip"].row
    assert row.target_acc_af <= 0.5 * row.target_acc_bf
    assert row.other_acc_af >= row.other_acc_bf - 0.05


@pytest.mark.parametrize(
    "synth, real, verdict",
    [
        (0.016, 0.875, DISCREPANCY_UNDERCONFIDENT),
        (0.922, 0.0, DISCREPANCY_OVERCONFIDENT),
        (0.031, 0.0, CONSISTENT_FORGOTTEN),
        (0.9, 0.95, CONSISTENT_NOT_FORGOTTEN),
    ],
)
def test_verdicts(synth, real, verdict):
    assert verify_forgetting(synth, real) == verdict


def test_verdict_direction_from_probability_stats():
    stats = {"synth_prob": 0.99, "real_prob": 0.6}
    assert verify_forgetting(0.016, 0.875, stats) == DISCREPANCY_OVERCONFIDENT
    assert is_discrepancy(DISCREPANCY_OVERCONFIDENT) and not is_discrepancy(CONSISTENT_FORGOTTEN)


def test_verdict_tolerance():
    loose = VerificationThresholds(goal_acc=0.1, tolerance=1.0)
    assert verify_forgetting(0.9, 0.2, thresholds=loose) == CONSISTENT_NOT_FORGOTTEN
    assert is_discrepancy(verify_forgetting(0.9, 0.2))


@pytest.mark.parametrize("synth", [-0.1, 1.5, math.nan])
def test_verdict_range(synth):
    with pytest.raises(InputError):
        verify_forgetting(synth, 0.5)
