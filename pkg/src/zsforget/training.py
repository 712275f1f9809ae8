"""Contrastive training of the toy dual encoder."""

from __future__ import annotations

import logging
from typing import Sequence

import torch
import torch.nn.functional as F

from .encoders import EncoderPair, InputError, build_toy_pair
from .toydata import LabeledImageSet

log = logging.getLogger(__name__)

TRAIN_TEMPLATES = ("a photo of a {}", "an image of a {}", "a picture of the {}", "{}")


def contrastive_loss(
    image_emb: torch.Tensor, text_emb: torch.Tensor, labels: torch.Tensor, logit_scale: float
) -> torch.Tensor:
    """Symmetric cross-entropy over the in-batch image/text similarity matrix.

    Row ``i`` of ``image_emb`` and ``text_emb`` form a pair. Pairs sharing a
    label are all treated as positives, with the target mass split evenly.
    """
    sim = logit_scale * F.normalize(image_emb, dim=-1) @ F.normalize(text_emb, dim=-1).T
    pos = (labels[:, None] == labels[None, :]).to(sim.dtype)
    img_to_txt = -(pos / pos.sum(1, keepdim=True) * torch.log_softmax(sim, dim=1)).sum(1).mean()
    txt_to_img = -(pos / pos.sum(0, keepdim=True) * torch.log_softmax(sim, dim=0)).sum(0).mean()
    return 0.5 * (img_to_txt + txt_to_img)


def fit_contrastive(
    pair: EncoderPair,
    images: torch.Tensor,
    prompts: Sequence[str],
    labels: torch.Tensor,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
    weight_decay: float = 0.0,
    norm_weight: float = 0.0,
) -> list[float]:
    """Fine-tune every parameter of ``pair`` on (image, prompt) pairs; returns epoch losses.

    ``norm_weight`` adds a penalty on squared log-norms of both embeddings,
    keeping image and text outputs on a comparable raw scale.
    """
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(pair.parameters(), lr=lr, weight_decay=weight_decay)
    losses = []
    n = len(images)
    for _ in range(epochs):
        order = torch.randperm(n, generator=g)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            img = pair.encode_images(images[idx])
            txt = pair.encode_text([prompts[i] for i in idx.tolist()])
            loss = contrastive_loss(img, txt, labels[idx], pair.logit_scale)
            if norm_weight:
                log_norms = torch.cat([img.norm(dim=1), txt.norm(dim=1)]).log()
                loss = loss + norm_weight * (log_norms**2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / max(n, 1))
    return losses


def train_toy_pair(
    dataset: LabeledImageSet,
    seed: int = 0,
    epochs: int = 40,
    lr: float = 3e-3,
    templates: Sequence[str] = TRAIN_TEMPLATES,
    embed_dim: int = 32,
    norm_weight: float = 0.1,
    logit_scale: float = 10.0,
) -> EncoderPair:
    """Train a fresh toy dual encoder on ``dataset``; deterministic given ``seed``."""
    counts = dataset.counts()
    if len(dataset.class_names) < 2 or sum(c > 0 for c in counts) < 2:
        raise InputError("need at least two classes to train a contrastive model")
    if min(counts) < 8:
        raise InputError(f"need at least 8 images per class, got {min(counts)}")
    torch.manual_seed(seed)
    pair = build_toy_pair(dataset.image_shape, embed_dim=embed_dim, seed=seed, logit_scale=logit_scale)
    g = torch.Generator().manual_seed(seed + 1)
    choice = torch.randint(len(templates), (len(dataset),), generator=g).tolist()
    prompts = [templates[t].format(dataset.class_names[y]) for t, y in zip(choice, dataset.labels.tolist())]
    losses = fit_contrastive(
        pair, dataset.images, prompts, dataset.labels, epochs, lr, seed=seed, norm_weight=norm_weight
    )
    log.info("toy training finished: first loss %.4f, last loss %.4f", losses[0], losses[-1])
    return pair
