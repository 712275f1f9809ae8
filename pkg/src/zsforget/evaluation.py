"""Before/after evaluation of a forgetting run."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import torch

from .encoders import ClassPromptSet, EncoderPair, InputError, build_class_prompts, class_logits
from .toydata import LabeledImageSet

log = logging.getLogger(__name__)

FORGETTING_TYPES = {"ZS": "ZS", "semi_ZS": "semi ZS", "not_ZS": "not ZS"}

CONSISTENT_FORGOTTEN = "consistent_forgotten"
CONSISTENT_NOT_FORGOTTEN = "consistent_not_forgotten"
DISCREPANCY_OVERCONFIDENT = "discrepancy_overconfident_synth"
DISCREPANCY_UNDERCONFIDENT = "discrepancy_underconfident_synth"


class ClassAccuracy(dict):
    """Mapping class name -> accuracy, with pooled counts attached."""

    def __init__(self, per_class: dict, correct: dict, total: dict, excluded: list):
        super().__init__(per_class)
        self.correct = correct
        self.total = total
        self.excluded = excluded

    def pooled(self, classes=None, weighting: str = "image") -> float:
        """Accuracy over ``classes``; image-weighted or class-weighted mean."""
        names = [c for c in (classes if classes is not None else self) if c in self]
        if not names:
            return float("nan")
        if weighting == "image":
            return sum(self.correct[c] for c in names) / sum(self.total[c] for c in names)
        if weighting == "class":
            return sum(self[c] for c in names) / len(names)
        raise InputError(f"unknown weighting {weighting!r}")


def predict(pair: EncoderPair, images: torch.Tensor, prompts: ClassPromptSet, batch_size: int = 512) -> torch.Tensor:
    with torch.no_grad():
        matrix = prompts.prompt_matrix(pair)
        out = [class_logits(pair, images[i : i + batch_size], matrix) for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.zeros(0, len(prompts))


def classification_accuracy(
    pair: EncoderPair, dataset: LabeledImageSet, prompts: ClassPromptSet, class_filter=None
) -> ClassAccuracy:
    """Per-class zero-shot accuracy. Classes without images are excluded and listed."""
    if list(prompts.class_names) != list(dataset.class_names):
        raise InputError("prompt classes do not match dataset classes")
    preds = predict(pair, dataset.images, prompts).argmax(dim=1) if len(dataset) else torch.zeros(0)
    hits = preds == dataset.labels
    per_class, correct, total, excluded = {}, {}, {}, []
    for idx, name in enumerate(dataset.class_names):
        if class_filter is not None and name not in class_filter:
            continue
        mask = dataset.labels == idx
        n = int(mask.sum())
        if n == 0:
            excluded.append(name)
            continue
        correct[name] = int(hits[mask].sum())
        total[name] = n
        per_class[name] = correct[name] / n
    if excluded:
        log.info("classes without images excluded from accuracy: %s", excluded)
    return ClassAccuracy(per_class, correct, total, excluded)


@dataclass
class EvalReport:
    method: str
    forgetting_type: str
    target_class: str
    dataset: str
    target_acc_bf: float
    target_acc_af: float
    other_acc_bf: float
    other_acc_af: float
    cross_dataset_acc: dict = field(default_factory=dict)
    synth_train_acc: float | None = None
    real_valid_acc: float | None = None
    retrieval: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.forgetting_type not in FORGETTING_TYPES:
            raise InputError(f"forgetting_type must be one of {list(FORGETTING_TYPES)}")
        self.cross_dataset_acc = {k: [float(v[0]), float(v[1])] for k, v in self.cross_dataset_acc.items()}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _same_architecture(a: EncoderPair, b: EncoderPair) -> bool:
    sa = [(n, tuple(p.shape)) for n, p in a.named_parameters()]
    sb = [(n, tuple(p.shape)) for n, p in b.named_parameters()]
    return sa == sb and type(a.visual) is type(b.visual) and type(a.textual) is type(b.textual)


def before_after_report(
    pair_bf: EncoderPair,
    pair_af: EncoderPair,
    datasets: Mapping[str, LabeledImageSet],
    target_dataset: str,
    target_class: str,
    method: str = "Lip",
    forgetting_type: str = "ZS",
    template: str = "a photo of a {}",
    weighting: str = "image",
    extras: Mapping | None = None,
) -> EvalReport:
    """Target, other-class and cross-dataset accuracy before and after forgetting.

    ``datasets`` are held-out evaluation sets keyed by name; ``target_class``
    belongs to ``datasets[target_dataset]``.
    """
    if not _same_architecture(pair_bf, pair_af):
        raise InputError("before/after checkpoints do not share an architecture")
    if target_dataset not in datasets:
        raise InputError(f"unknown dataset {target_dataset!r}")
    home = datasets[target_dataset]
    if target_class not in home.class_names:
        raise InputError(f"class {target_class!r} not in dataset {target_dataset!r}")
    others = [c for c in home.class_names if c != target_class]
    results = {}
    for tag, pair in (("bf", pair_bf), ("af", pair_af)):
        accs = {}
        for name, ds in datasets.items():
            accs[name] = classification_accuracy(pair, ds, build_class_prompts(ds.class_names, template))
        results[tag] = accs
    cross = {
        name: [results["bf"][name].pooled(weighting=weighting), results["af"][name].pooled(weighting=weighting)]
        for name in datasets
        if name != target_dataset
    }
    extras = dict(extras or {})
    report = EvalReport(
        method=method,
        forgetting_type=forgetting_type,
        target_class=target_class,
        dataset=target_dataset,
        target_acc_bf=results["bf"][target_dataset].pooled([target_class], weighting),
        target_acc_af=results["af"][target_dataset].pooled([target_class], weighting),
        other_acc_bf=results["bf"][target_dataset].pooled(others, weighting),
        other_acc_af=results["af"][target_dataset].pooled(others, weighting),
        cross_dataset_acc=cross,
        synth_train_acc=extras.pop("synth_train_acc", None),
        real_valid_acc=extras.pop("real_valid_acc", None),
        retrieval=extras.pop("retrieval", {}),
        verdicts=list(extras.pop("verdicts", [])),
        extras=extras,
    )
    return report


@dataclass(frozen=True)
class VerificationThresholds:
    goal_acc: float = 0.1
    tolerance: float = 0.2


def verify_forgetting(
    synth_acc: float,
    real_valid_acc: float,
    synth_prob_stats: Mapping | None = None,
    thresholds: VerificationThresholds = VerificationThresholds(),
) -> str:
    """Compare accuracy on synthetic forget samples with real validation accuracy.

    Consistent when both sit on the same side of ``goal_acc`` and differ by at
    most ``tolerance``. Otherwise the synthetic samples were mis-calibrated;
    the direction comes from ``synth_prob_stats`` (``synth_prob`` vs
    ``real_prob``) when given, else from which accuracy is higher.
    """
    if not 0.0 <= synth_acc <= 1.0:
        raise InputError("synth_acc must be in [0, 1]")
    synth_forgot = synth_acc < thresholds.goal_acc
    real_forgot = real_valid_acc < thresholds.goal_acc
    if synth_forgot == real_forgot and abs(synth_acc - real_valid_acc) <= thresholds.tolerance:
        return CONSISTENT_FORGOTTEN if synth_forgot else CONSISTENT_NOT_FORGOTTEN
    stats = synth_prob_stats or {}
    if "synth_prob" in stats and "real_prob" in stats and stats["synth_prob"] != stats["real_prob"]:
        over = stats["synth_prob"] > stats["real_prob"]
    else:
        over = synth_acc > real_valid_acc
    return DISCREPANCY_OVERCONFIDENT if over else DISCREPANCY_UNDERCONFIDENT


def is_discrepancy(verdict: str) -> bool:
    return verdict.startswith("discrepancy")
