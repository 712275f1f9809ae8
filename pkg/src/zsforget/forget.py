"""Iterative zero-shot forgetting loop.

For every synthetic image: average the loss over N Gaussian perturbations,
update the most gradient-active layers of each branch, then re-check accuracy
on the synthetic set. Stop as soon as that accuracy drops below the goal;
otherwise grow the noise level and layer budgets (up to their caps) and go on.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import torch

from .encoders import ClassPromptSet, EncoderPair, InputError
from .lipschitz import (
    TEXT_EMBEDDING,
    PerturbationConfig,
    embedding_reg_loss,
    gaussian_noise,
    lipschitz_loss_multimodal,
    lipschitz_loss_unimodal,
    perturb_text_embedding_variant,
)
from .selection import layer_gradients, make_optimizer, rank_layers_by_gradient, selective_update
from .synth import SyntheticBatch, synthetic_accuracy

log = logging.getLogger(__name__)

LIPSCHITZ = "lipschitz"
EMBEDDING_REG = "embedding_reg"
UNIMODAL = "unimodal"
LOSS_KINDS = (LIPSCHITZ, EMBEDDING_REG, UNIMODAL)


@dataclass
class ForgetConfig:
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)
    init_visual_layers: int = 5
    init_textual_layers: int = 5
    step_sigma: float = 0.019  # 0.1 * (max_sigma - sigma0) / total_increase_steps
    step_visual: int = 1
    step_textual: int = 1
    goal_acc: float = 0.1
    total_increase_steps: int = 10
    learning_rate: float = 5e-5
    weight_decay: float = 0.2
    momentum_betas: tuple[float, float] = (0.9, 0.98)
    max_sigma: float = 2.0
    max_visual_layers: int = 8
    max_textual_layers: int = 20
    loss_kind: str = LIPSCHITZ
    emb_reg_alpha: float = 1.0
    emb_reg_difference: bool = False
    normalize_embeddings: bool = False
    check_every: int = 1
    select_layers: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.perturb, dict):
            self.perturb = PerturbationConfig(**self.perturb)
        self.momentum_betas = tuple(self.momentum_betas)
        if self.loss_kind not in LOSS_KINDS:
            raise InputError(f"loss_kind must be one of {LOSS_KINDS}")
        if not self.goal_acc > 0:
            raise InputError("goal_acc must be positive")
        if self.init_visual_layers > self.max_visual_layers or self.init_textual_layers > self.max_textual_layers:
            raise InputError("initial layer budgets exceed their maxima")
        if self.perturb.sigma > self.max_sigma:
            raise InputError("initial sigma exceeds max_sigma")
        if self.learning_rate <= 0 or self.check_every < 1 or self.total_increase_steps < 0:
            raise InputError("learning_rate, check_every and total_increase_steps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["momentum_betas"] = list(self.momentum_betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ForgetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown ForgetConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ForgetResult:
    final_pair: EncoderPair
    iterations_run: int
    final_synth_acc: float
    sigma_trace: list[float]
    budget_trace: list[tuple[int, int]]
    loss_trace: list[float]
    acc_trace: list[float]
    stopped_early: bool
    selection_counts: dict[str, int] = field(default_factory=dict)

    def traces(self) -> dict:
        return {
            "iterations_run": self.iterations_run,
            "final_synth_acc": self.final_synth_acc,
            "stopped_early": self.stopped_early,
            "sigma_trace": self.sigma_trace,
            "budget_trace": [list(b) for b in self.budget_trace],
            "loss_trace": self.loss_trace,
            "acc_trace": self.acc_trace,
            "selection_counts": self.selection_counts,
        }


def forgetting_loss(pair, image, text_prompt, cfg: ForgetConfig, sigma: float, generator) -> torch.Tensor:
    """Loss for one synthetic image under the configured loss kind."""
    noise = gaussian_noise(image.shape, cfg.perturb.n_perturbations, sigma, generator, image.dtype)
    norm = cfg.normalize_embeddings
    if cfg.loss_kind == UNIMODAL:
        return lipschitz_loss_unimodal(pair, image, noise, normalize=norm)
    if cfg.loss_kind == EMBEDDING_REG:
        return embedding_reg_loss(
            pair, image, text_prompt, noise, cfg.emb_reg_alpha, normalize=norm, difference=cfg.emb_reg_difference
        )
    if cfg.perturb.target == TEXT_EMBEDDING:
        text_noise = gaussian_noise((pair.embed_dim,), cfg.perturb.n_perturbations, sigma, generator, image.dtype)
        return perturb_text_embedding_variant(pair, image, text_prompt, noise, text_noise, normalize=norm)
    return lipschitz_loss_multimodal(pair, image, text_prompt, noise, normalize=norm)


def run_forgetting(
    pair: EncoderPair, prompts: ClassPromptSet, batch: SyntheticBatch, cfg: ForgetConfig, text_prompt: str | None = None
) -> ForgetResult:
    """Forget ``batch.target_class`` in place on ``pair``.

    ``text_prompt`` defaults to the target's entry in ``prompts``.
    """
    if not 0 <= batch.target_class < len(prompts):
        raise InputError(f"target class {batch.target_class} not in prompt set")
    if text_prompt is None:
        text_prompt = prompts.prompts[batch.target_class]
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = make_optimizer(pair, cfg.learning_rate, cfg.weight_decay, cfg.momentum_betas)
    eligible = [d.name for d in pair.layer_catalog if d.eligible]

    sigma = cfg.perturb.sigma
    vis, txt = cfg.init_visual_layers, cfg.init_textual_layers
    if not cfg.select_layers:
        vis = txt = len(pair.layer_catalog)
    if cfg.loss_kind == UNIMODAL:
        txt = 0
    sigma_trace, budget_trace = [sigma], [(vis, txt)]
    loss_trace, acc_trace = [], []
    counts: dict[str, int] = {}
    acc = synthetic_accuracy(pair, prompts, batch)
    steps = 0

    def finish(stopped: bool) -> ForgetResult:
        return ForgetResult(pair, steps, acc, sigma_trace, budget_trace, loss_trace, acc_trace, stopped, counts)

    for n in range(cfg.total_increase_steps):
        for image in batch.images:
            loss = forgetting_loss(pair, image, text_prompt, cfg, sigma, generator)
            grads = layer_gradients(loss, pair, eligible)
            ranking = rank_layers_by_gradient(pair, grads, vis, txt)
            selective_update(pair, ranking, optimizer, grads)
            for name in ranking.selected:
                counts[name] = counts.get(name, 0) + 1
            loss_trace.append(float(loss.detach()))
            steps += 1
            if steps % cfg.check_every:
                continue
            acc = synthetic_accuracy(pair, prompts, batch)
            acc_trace.append(acc)
            if acc < cfg.goal_acc:
                log.info("forgetting stopped after %d updates, synthetic acc %.3f", steps, acc)
                return finish(True)
            if cfg.select_layers:
                vis = min(vis + cfg.step_visual, cfg.max_visual_layers)
                if cfg.loss_kind != UNIMODAL:
                    txt = min(txt + cfg.step_textual, cfg.max_textual_layers)
            sigma = min(sigma + cfg.step_sigma, cfg.max_sigma)
            sigma_trace.append(sigma)
            budget_trace.append((vis, txt))
        log.debug("escalation round %d done, synthetic acc %.3f", n, acc)
    acc = synthetic_accuracy(pair, prompts, batch)
    return finish(False)
