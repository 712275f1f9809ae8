"""Synthetic forget samples by gradient ascent on a target class.

Starting from uniform noise, each image is pushed along the gradient of the
target class log-probability (softmax over the class prompts) until the
model predicts the target. Pixels are clipped to [0, 1] after every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .encoders import ClassPromptSet, EncoderPair, InputError, class_log_probs


class GenerationError(RuntimeError):
    """No sample reached the target prediction within the step budget."""


@dataclass(frozen=True)
class CalibrationTarget:
    prob_low: float = 0.4
    prob_high: float = 0.9
    max_extra_steps: int = 200

    def __post_init__(self):
        if not (0.0 <= self.prob_low <= self.prob_high <= 1.0):
            raise InputError("calibration window must satisfy 0 <= prob_low <= prob_high <= 1")


@dataclass
class SyntheticBatch:
    images: torch.Tensor
    target_class: int
    per_sample_prob: list[float]
    template_used: str
    step_size: float
    steps_taken: list[int]
    init_noise: torch.Tensor
    class_name: str = ""
    prompt: str = ""
    min_prob: float = 0.0
    flagged: list[bool] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)


def _target_probs(pair: EncoderPair, images: torch.Tensor, prompt_matrix: torch.Tensor, target: int):
    logp = class_log_probs(pair, images, prompt_matrix)
    return logp[:, target], logp.argmax(dim=1) == target


def ascent_step(
    pair: EncoderPair,
    images: torch.Tensor,
    prompt_matrix: torch.Tensor,
    target: int,
    step_size: float,
    sign: float = 1.0,
    clip: bool = True,
) -> torch.Tensor:
    """One update ``x + sign * step_size * dL/dx`` with L the target log-probability."""
    x = images.detach().clone().requires_grad_(True)
    with torch.enable_grad():  # callers may sit inside no_grad
        logp, _ = _target_probs(pair, x, prompt_matrix, target)
        (grad,) = torch.autograd.grad(logp.sum(), x)
    out = x.detach() + sign * step_size * grad
    return out.clamp(0.0, 1.0) if clip else out


def generate_synthetic_samples(
    pair: EncoderPair,
    prompts: ClassPromptSet,
    target_class: int,
    count: int = 64,
    step_size: float = 0.5,
    max_steps: int = 500,
    seed: int = 0,
    calibration: CalibrationTarget | None = None,
    sign: float = 1.0,
) -> SyntheticBatch:
    """Generate ``count`` images the pair classifies as ``target_class``.

    ``sign=-1`` descends instead (error-maximizing noise); the stop condition
    then becomes "prediction is no longer the target".
    With a ``calibration`` target, ascent continues until the target
    probability reaches ``prob_low``.
    """
    if not 0 <= target_class < len(prompts):
        raise InputError(f"target class {target_class} out of range")
    if count < 1:
        raise InputError("count must be >= 1")
    if step_size <= 0:
        raise InputError("step_size must be positive")
    min_prob = calibration.prob_low if (calibration is not None and sign > 0) else 0.0
    g = torch.Generator().manual_seed(seed)
    init = torch.rand((count, *pair.input_shape), generator=g, dtype=pair.dtype)
    images = init.clone()
    steps = torch.zeros(count, dtype=torch.long)
    with torch.no_grad():
        prompt_matrix = prompts.prompt_matrix(pair)

    def satisfied(x):
        with torch.no_grad():
            logp, is_top = _target_probs(pair, x, prompt_matrix, target_class)
        if sign < 0:
            return ~is_top
        return is_top & (logp.exp() >= min_prob)

    done = satisfied(images)
    for _ in range(max_steps):
        if bool(done.all()):
            break
        active = ~done
        images[active] = ascent_step(pair, images[active], prompt_matrix, target_class, step_size, sign)
        steps[active] += 1
        done = satisfied(images)
    if not bool(done.all()):
        raise GenerationError(
            f"{int((~done).sum())} of {count} samples for class {prompts.class_names[target_class]!r} "
            f"did not reach the stop condition within {max_steps} steps"
        )
    with torch.no_grad():
        logp, _ = _target_probs(pair, images, prompt_matrix, target_class)
    return SyntheticBatch(
        images=images.detach(),
        target_class=target_class,
        per_sample_prob=logp.exp().tolist(),
        template_used=prompts.template,
        step_size=step_size,
        steps_taken=steps.tolist(),
        init_noise=init,
        class_name=prompts.class_names[target_class],
        prompt=prompts.prompts[target_class],
        min_prob=min_prob,
        flagged=[False] * count,
        meta={"seed": seed, "max_steps": max_steps, "sign": sign},
    )


def rescore(pair: EncoderPair, prompts: ClassPromptSet, images: torch.Tensor, target_class: int) -> torch.Tensor:
    """Target-class probability for each image under the current parameters."""
    with torch.no_grad():
        logp, _ = _target_probs(pair, images, prompts.prompt_matrix(pair), target_class)
    return logp.exp()


def calibrate_batch(
    pair: EncoderPair, prompts: ClassPromptSet, batch: SyntheticBatch, calib: CalibrationTarget
) -> SyntheticBatch:
    """Move each sample's target probability into ``[prob_low, prob_high]``.

    Under-confident samples ascend further; over-confident ones are blended
    back toward their initial noise with a bisection on the mixing weight.
    Samples that cannot be brought into the window are flagged, not dropped.
    """
    target = batch.target_class
    with torch.no_grad():
        prompt_matrix = prompts.prompt_matrix(pair)
    images = batch.images.clone()
    probs = rescore(pair, prompts, images, target)
    steps = list(batch.steps_taken)
    flagged = list(batch.flagged) or [False] * len(batch)
    low, high = calib.prob_low, calib.prob_high
    changed = False
    for i in range(len(batch)):
        p = float(probs[i])
        if low <= p <= high:
            continue
        changed = True
        x = images[i : i + 1]
        if p < low:
            for _ in range(calib.max_extra_steps):
                x = ascent_step(pair, x, prompt_matrix, target, batch.step_size)
                steps[i] += 1
                p = float(rescore(pair, prompts, x, target)[0])
                if p >= low:
                    break
        if p > high:
            noise = batch.init_noise[i : i + 1]
            lo_w, hi_w = 0.0, 1.0
            best = None
            for _ in range(calib.max_extra_steps):
                w = 0.5 * (lo_w + hi_w)
                cand = noise + w * (x - noise)
                pc = float(rescore(pair, prompts, cand, target)[0])
                if low <= pc <= high:
                    best = (cand, pc)
                    break
                if pc > high:
                    hi_w = w
                else:
                    lo_w = w
            if best is not None:
                x, p = best
        images[i : i + 1] = x
        flagged[i] = not (low <= p <= high)
    if not changed:
        return batch
    final = rescore(pair, prompts, images, target)
    return replace(
        batch,
        images=images,
        per_sample_prob=final.tolist(),
        steps_taken=steps,
        flagged=flagged,
        meta={**batch.meta, "calibration": [low, high, calib.max_extra_steps]},
    )


def synthetic_accuracy(pair: EncoderPair, prompts: ClassPromptSet, batch: SyntheticBatch) -> float:
    """Fraction of samples whose zero-shot prediction is still the target class."""
    if len(batch) == 0:
        raise InputError("empty synthetic batch")
    with torch.no_grad():
        logp = class_log_probs(pair, batch.images, prompts.prompt_matrix(pair))
    return float((logp.argmax(dim=1) == batch.target_class).float().mean())


def save_batch(batch: SyntheticBatch, path) -> None:
    np.savez_compressed(
        path,
        images=batch.images.numpy(),
        init_noise=batch.init_noise.numpy(),
        per_sample_prob=np.array(batch.per_sample_prob),
        steps_taken=np.array(batch.steps_taken),
        flagged=np.array(batch.flagged, dtype=bool),
        target_class=np.array(batch.target_class),
        step_size=np.array(batch.step_size),
        min_prob=np.array(batch.min_prob),
        template_used=np.array(batch.template_used),
        class_name=np.array(batch.class_name),
        prompt=np.array(batch.prompt),
        meta=np.array(json.dumps(batch.meta, sort_keys=True)),
    )


def load_batch(path) -> SyntheticBatch:
    with np.load(path, allow_pickle=False) as d:
        return SyntheticBatch(
            images=torch.from_numpy(d["images"]),
            target_class=int(d["target_class"]),
            per_sample_prob=d["per_sample_prob"].tolist(),
            template_used=str(d["template_used"]),
            step_size=float(d["step_size"]),
            steps_taken=d["steps_taken"].tolist(),
            init_noise=torch.from_numpy(d["init_noise"]),
            class_name=str(d["class_name"]),
            prompt=str(d["prompt"]),
            min_prob=float(d["min_prob"]),
            flagged=d["flagged"].tolist(),
            meta=json.loads(str(d["meta"])),
        )
