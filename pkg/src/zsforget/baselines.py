"""Comparator unlearning methods, adapted to a dual encoder.

Amnesiac variants fine-tune on relabeled forget data (optionally with real
retain data). EMMN fine-tunes on error-maximizing noise for the target plus
error-minimizing samples for the retained classes. ULip is the forgetting
loop restricted to the image term and the visual branch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .encoders import ClassPromptSet, EncoderPair, InputError
from .forget import UNIMODAL, ForgetConfig, ForgetResult, run_forgetting
from .synth import SyntheticBatch, generate_synthetic_samples
from .toydata import LabeledImageSet
from .training import fit_contrastive

log = logging.getLogger(__name__)

AMNS = "amns"
AMNS_RETAIN = "amns_retain"
EMMN = "emmn"
ULIP = "ulip"
BASELINE_METHODS = (AMNS, AMNS_RETAIN, EMMN, ULIP)


@dataclass
class BaselineConfig:
    method: str = AMNS
    epochs: int = 5
    learning_rate: float = 1e-3
    label_remap_seed: int = 0
    batch_size: int = 16
    retain_set: LabeledImageSet | None = None
    emmn_retain_classes: Sequence[str] | None = None
    emmn_samples_per_class: int = 8
    emmn_step_size: float = 0.5
    emmn_max_steps: int = 500

    def __post_init__(self):
        if self.method not in BASELINE_METHODS:
            raise InputError(f"method must be one of {BASELINE_METHODS}")
        if self.method == AMNS_RETAIN and self.retain_set is None:
            raise InputError("amns_retain needs a retain_set")
        if self.method == EMMN and not self.emmn_retain_classes:
            raise InputError("emmn needs emmn_retain_classes")
        if self.epochs < 0 or self.learning_rate <= 0 or self.batch_size < 2:
            raise InputError("epochs >= 0, learning_rate > 0 and batch_size >= 2 required")


def remap_labels(n: int, n_classes: int, target: int, seed: int) -> torch.Tensor:
    """Uniform random labels over every class except ``target``."""
    if n_classes < 2:
        raise InputError("relabeling needs at least two classes")
    g = torch.Generator().manual_seed(seed)
    draws = torch.randint(n_classes - 1, (n,), generator=g)
    return draws + (draws >= target).long()


def _finetune(pair, images, labels, prompts: ClassPromptSet, cfg: BaselineConfig) -> EncoderPair:
    if cfg.epochs == 0 or len(images) == 0:
        return pair
    texts = [prompts.prompts[i] for i in labels.tolist()]
    fit_contrastive(
        pair, images, texts, labels, cfg.epochs, cfg.learning_rate, batch_size=cfg.batch_size, seed=cfg.label_remap_seed
    )
    return pair


def amnesiac_forget(pair: EncoderPair, prompts: ClassPromptSet, batch: SyntheticBatch, cfg: BaselineConfig) -> EncoderPair:
    """Fine-tune on synthetic forget images paired with random wrong-class prompts."""
    if len(prompts) < 2:
        raise InputError("amnesiac forgetting needs at least two classes")
    labels = remap_labels(len(batch), len(prompts), batch.target_class, cfg.label_remap_seed)
    return _finetune(pair, batch.images, labels, prompts, cfg)


def amnesiac_retain_forget(
    pair: EncoderPair,
    prompts: ClassPromptSet,
    forget_images: torch.Tensor,
    target_class: int,
    retain_set: LabeledImageSet,
    cfg: BaselineConfig,
) -> EncoderPair:
    """Amnesiac fine-tune over relabeled forget images plus correctly labeled real retain images."""
    if retain_set is None or len(retain_set) == 0:
        raise InputError("retain set is empty")
    if len(prompts) < 2:
        raise InputError("amnesiac forgetting needs at least two classes")
    # retain labels index the retain set's own classes; map them onto the prompt set
    index = {name: i for i, name in enumerate(prompts.class_names)}
    try:
        retain_labels = torch.tensor([index[retain_set.class_names[y]] for y in retain_set.labels.tolist()])
    except KeyError as exc:
        raise InputError(f"retain class {exc} not in prompt set") from exc
    forget_labels = remap_labels(len(forget_images), len(prompts), target_class, cfg.label_remap_seed)
    images = torch.cat([forget_images.to(retain_set.images.dtype), retain_set.images])
    labels = torch.cat([forget_labels, retain_labels])
    return _finetune(pair, images, labels, prompts, cfg)


def emmn_forget(pair: EncoderPair, prompts: ClassPromptSet, target_class: int, cfg: BaselineConfig, seed: int = 0) -> EncoderPair:
    """Error-maximizing noise for the target, error-minimizing samples for retained classes, then fine-tune.

    The anti-samples keep the target's label, so fitting them pulls the target
    prompt toward images the model does not associate with it.
    """
    if not cfg.emmn_retain_classes:
        raise InputError("emmn needs emmn_retain_classes")
    n = cfg.emmn_samples_per_class
    kw = dict(count=n, step_size=cfg.emmn_step_size, max_steps=cfg.emmn_max_steps)
    anti = generate_synthetic_samples(pair, prompts, target_class, seed=seed, sign=-1.0, **kw)
    images, labels = [anti.images], [torch.full((n,), target_class)]
    for j, name in enumerate(cfg.emmn_retain_classes):
        cls = prompts.index(name)
        if cls == target_class:
            raise InputError("the target class cannot be retained")
        keep = generate_synthetic_samples(pair, prompts, cls, seed=seed + 1 + j, **kw)
        images.append(keep.images)
        labels.append(torch.full((n,), cls))
    return _finetune(pair, torch.cat(images), torch.cat(labels), prompts, cfg)


def ulip_config(cfg: ForgetConfig) -> ForgetConfig:
    """The forgetting config with the image-only loss (textual budget is then 0)."""
    return replace(cfg, loss_kind=UNIMODAL)


def ulip_forget(
    pair: EncoderPair, prompts: ClassPromptSet, forget: SyntheticBatch, cfg: ForgetConfig
) -> ForgetResult:
    """Image-term Lipschitz forgetting of the visual encoder only.

    ``forget`` may hold real or synthetic images of the target class.
    """
    if len(forget) == 0:
        raise InputError("no forget images")
    return run_forgetting(pair, prompts, forget, ulip_config(cfg))
