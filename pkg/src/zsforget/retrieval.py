"""Image retrieval from text (IfT) and image (IfI) queries, scored by precision@k."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .encoders import EncoderPair, InputError
from .toydata import LabeledImageSet


@dataclass
class RetrievalIndex:
    embeddings: torch.Tensor
    labels: list[str]
    sources: list[str]
    checkpoint_tag: str = ""

    def __post_init__(self):
        if len(self.embeddings) != len(self.labels) or len(self.labels) != len(self.sources):
            raise InputError("embeddings, labels and sources must align")

    def __len__(self) -> int:
        return len(self.labels)


def item_label(dataset: str, class_name: str) -> str:
    return f"{dataset}/{class_name}"


def build_retrieval_index(
    pair: EncoderPair, datasets: Mapping[str, LabeledImageSet], checkpoint_tag: str = ""
) -> RetrievalIndex:
    """Embed every image of every dataset into one searchable database."""
    embs, labels, sources = [], [], []
    with torch.no_grad():
        for name, ds in datasets.items():
            embs.append(pair.encode_images(ds.images))
            labels += [item_label(name, ds.class_names[y]) for y in ds.labels.tolist()]
            sources += [name] * len(ds)
    return RetrievalIndex(torch.cat(embs), labels, sources, checkpoint_tag)


def rank_items(index: RetrievalIndex, query: torch.Tensor, exclude: int | None = None) -> list[int]:
    """Item indices by descending cosine similarity; ties keep index order."""
    sims = F.normalize(index.embeddings, dim=-1) @ F.normalize(query.to(index.embeddings.dtype), dim=-1)
    order = torch.sort(-sims, stable=True).indices.tolist()
    if exclude is not None:
        order = [i for i in order if i != exclude]
    return order


def retrieval_precision_at_k(
    index: RetrievalIndex,
    query: torch.Tensor,
    relevant_label: str,
    ks: Sequence[int],
    exclude: int | None = None,
) -> dict[int, float]:
    """Fraction of relevant items among the top ``k`` for each ``k``.

    ``exclude`` removes one item (the query image itself, for image queries).
    """
    n_candidates = len(index) - (1 if exclude is not None else 0)
    for k in ks:
        if not 1 <= k <= n_candidates:
            raise InputError(f"k={k} outside 1..{n_candidates}")
    order = rank_items(index, query, exclude)
    hits = [index.labels[i] == relevant_label for i in order]
    return {k: sum(hits[:k]) / k for k in ks}


def retrieval_scores(
    pair: EncoderPair,
    datasets: Mapping[str, LabeledImageSet],
    target_dataset: str,
    target_class: str,
    template: str = "a photo of a {}",
    ks: Sequence[int] = (1, 5, 10),
    index: RetrievalIndex | None = None,
) -> dict[str, float]:
    """IfT and IfI precision@k for one class; keys look like ``"IfT@5"``.

    IfI averages over every image of the class used in turn as the query.
    """
    if index is None:
        index = build_retrieval_index(pair, datasets)
    relevant = item_label(target_dataset, target_class)
    with torch.no_grad():
        text_query = pair.encode_text([template.format(target_class)])[0]
    out = {f"IfT@{k}": v for k, v in retrieval_precision_at_k(index, text_query, relevant, ks).items()}
    queries = [i for i, lab in enumerate(index.labels) if lab == relevant]
    sums = {k: 0.0 for k in ks}
    for i in queries:
        for k, v in retrieval_precision_at_k(index, index.embeddings[i], relevant, ks, exclude=i).items():
            sums[k] += v
    for k in ks:
        out[f"IfI@{k}"] = sums[k] / len(queries) if queries else float("nan")
    return out
