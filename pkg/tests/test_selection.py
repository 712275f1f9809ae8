import pytest
import torch
from torch import nn

import oracles
from zsforget.encoders import TEXTUAL, VISUAL, EncoderPair, build_toy_pair
from zsforget.selection import (
    LayerRanking,
    MissingGradientError,
    layer_gradients,
    make_optimizer,
    rank_layers_by_gradient,
    selective_update,
)


class _Branch(nn.Module):
    def __init__(self, sizes):
        super().__init__()
        self.layers = nn.ParameterList(nn.Parameter(torch.zeros(n)) for n in sizes)
        self.input_shape = (1, 1, 1)


def _pair(visual_sizes=(2, 2), textual_sizes=(2,)):
    pair = EncoderPair(_Branch(visual_sizes), _Branch(textual_sizes), 2)
    pair.set_eligibility("all")
    return pair


def _scores(pair, grads):
    return [(d.name, d.branch, float(grads[d.name].abs().mean()), d.eligible) for d in pair.layer_catalog]


def test_higher_mean_abs_gradient_wins():
    pair = _pair()
    a, b = [d.name for d in pair.layer_catalog if d.branch == VISUAL]
    grads = {a: torch.tensor([1.0, -1.0]), b: torch.tensor([0.5, 0.5]), "textual.layers.0": torch.zeros(2)}
    ranking = rank_layers_by_gradient(pair, grads, 1, 0)
    assert ranking.selected_visual == [a]
    assert ranking.scores[a] == 1.0 and ranking.scores[b] == 0.5


def test_zero_gradients_fall_back_to_catalog_order():
    pair = build_toy_pair()
    grads = {d.name: torch.zeros(d.param_count) for d in pair.layer_catalog}
    ranking = rank_layers_by_gradient(pair, grads, 2, 3)
    order = {b: [d.name for d in pair.layer_catalog if d.eligible and d.branch == b] for b in (VISUAL, TEXTUAL)}
    assert ranking.selected_visual == order[VISUAL][:2]
    assert ranking.selected_textual == order[TEXTUAL][:3]
    assert all(v == 0 for v in ranking.scores.values())


def test_ranking_matches_sort_oracle():
    pair = build_toy_pair()
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        grads = {n: torch.randn(p.shape, generator=g) for n, p in pair.named_parameters()}
        v, t = int(torch.randint(0, 6, (1,), generator=g)), int(torch.randint(0, 10, (1,), generator=g))
        ranking = rank_layers_by_gradient(pair, grads, v, t)
        assert (ranking.selected_visual, ranking.selected_textual) == oracles.select_top(_scores(pair, grads), v, t)


def test_ineligible_layers_never_selected():
    pair = build_toy_pair()
    grads = {n: torch.full(p.shape, 10.0 if ".conv" in n else 1.0) for n, p in pair.named_parameters()}
    ranking = rank_layers_by_gradient(pair, grads, 100, 100)
    assert not any(".conv" in n for n in ranking.selected)
    assert len(ranking.selected_visual) == sum(d.eligible for d in pair.layer_catalog if d.branch == VISUAL)


def test_missing_gradient():
    pair = _pair()
    with pytest.raises(MissingGradientError):
        rank_layers_by_gradient(pair, {}, 1, 1)


def test_layer_gradients_fill_unused_with_zero():
    pair = build_toy_pair()
    loss = pair.encode_text(["a photo of a red circle"]).sum()
    grads = layer_gradients(loss, pair)
    assert set(grads) == {d.name for d in pair.layer_catalog if d.eligible}
    assert all(float(g.abs().sum()) == 0 for n, g in grads.items() if n.startswith("visual."))


def _snapshot(pair):
    return {n: p.detach().clone() for n, p in pair.named_parameters()}


def _grads(pair, seed):
    g = torch.Generator().manual_seed(seed)
    return {n: torch.randn(p.shape, generator=g) for n, p in pair.named_parameters()}


def test_empty_selection_leaves_model_unchanged():
    pair = build_toy_pair()
    before = _snapshot(pair)
    opt = make_optimizer(pair, 1e-2, 0.2)
    selective_update(pair, LayerRanking({}, [], []), opt, _grads(pair, 0))
    assert all(torch.equal(before[n], p) for n, p in pair.named_parameters())


def test_full_budget_equals_plain_optimizer_step():
    a = build_toy_pair()
    b = a.clone()
    grads = _grads(a, 1)
    eligible = [d.name for d in a.layer_catalog if d.eligible]
    ranking = rank_layers_by_gradient(a, grads, 100, 100)
    selective_update(a, ranking, make_optimizer(a, 1e-2, 0.2), grads)
    params = b.layer_params()
    opt = torch.optim.AdamW([params[n] for n in eligible], lr=1e-2, weight_decay=0.2, betas=(0.9, 0.98))
    for n in eligible:
        params[n].grad = grads[n].clone()
    opt.step()
    for n, p in a.named_parameters():
        assert torch.equal(p, params[n]), n


def test_textual_only_selection_keeps_visual_bit_identical():
    pair = build_toy_pair()
    before = _snapshot(pair)
    name = next(d.name for d in pair.layer_catalog if d.branch == TEXTUAL)
    selective_update(pair, LayerRanking({}, [], [name]), make_optimizer(pair, 1e-2, 0.2), _grads(pair, 2))
    for n, p in pair.named_parameters():
        if n == name:
            assert not torch.equal(before[n], p)
        else:
            assert torch.equal(before[n], p), n


def test_unselected_layers_skip_weight_decay_and_state():
    pair = build_toy_pair()
    opt = make_optimizer(pair, 1e-2, 0.5)
    names = [d.name for d in pair.layer_catalog if d.eligible]
    grads = _grads(pair, 3)
    selective_update(pair, LayerRanking({}, [], [names[-1]]), opt, grads)
    params = pair.layer_params()
    # only the selected tensor has optimizer state
    assert [n for n in names if params[n] in opt.state] == [names[-1]]
