"""Gradient-ranked selective layer updates."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .encoders import TEXTUAL, VISUAL, EncoderPair


class MissingGradientError(RuntimeError):
    pass


@dataclass
class LayerRanking:
    scores: dict[str, float]
    selected_visual: list[str]
    selected_textual: list[str]

    @property
    def selected(self) -> list[str]:
        return self.selected_visual + self.selected_textual


def layer_gradients(loss: torch.Tensor, pair: EncoderPair, names=None) -> dict[str, torch.Tensor]:
    """Gradients of ``loss`` for the named layers (default: eligible ones).

    Parameters the loss does not depend on get an explicit zero gradient.
    """
    params = pair.layer_params()
    if names is None:
        names = [d.name for d in pair.layer_catalog if d.eligible]
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, tensors, grads)}


def rank_layers_by_gradient(
    pair: EncoderPair, gradients: dict[str, torch.Tensor], visual_budget: int, textual_budget: int
) -> LayerRanking:
    """Top layers per branch by mean absolute gradient.

    Only eligible layers compete; ties keep catalog order.
    """
    scores: dict[str, float] = {}
    order: dict[str, list[tuple[float, int, str]]] = {VISUAL: [], TEXTUAL: []}
    for position, desc in enumerate(pair.layer_catalog):
        if not desc.eligible:
            continue
        if desc.name not in gradients:
            raise MissingGradientError(f"no gradient for eligible layer {desc.name!r}")
        score = float(gradients[desc.name].abs().mean())
        scores[desc.name] = score
        order[desc.branch].append((-score, position, desc.name))
    picks = {}
    for branch, budget in ((VISUAL, visual_budget), (TEXTUAL, textual_budget)):
        ranked = sorted(order[branch])
        picks[branch] = [name for _, _, name in ranked[: max(int(budget), 0)]]
    return LayerRanking(scores, picks[VISUAL], picks[TEXTUAL])


def make_optimizer(pair: EncoderPair, lr: float, weight_decay: float, betas=(0.9, 0.98), names=None):
    """AdamW over the eligible layers (or ``names``)."""
    params = pair.layer_params()
    if names is None:
        names = [d.name for d in pair.layer_catalog if d.eligible]
    return torch.optim.AdamW([params[n] for n in names], lr=lr, weight_decay=weight_decay, betas=tuple(betas))


def selective_update(
    pair: EncoderPair, ranking: LayerRanking, optimizer: torch.optim.Optimizer, gradients: dict[str, torch.Tensor]
) -> EncoderPair:
    """One optimizer step restricted to the selected layers.

    Unselected parameters carry no gradient, so the optimizer skips them
    entirely (no update, no weight decay, no state change).
    """
    selected = set(ranking.selected)
    for name, p in pair.layer_params().items():
        p.grad = gradients[name].detach().clone() if name in selected else None
    if selected:
        optimizer.step()
    for p in pair.parameters():
        p.grad = None
    return pair
