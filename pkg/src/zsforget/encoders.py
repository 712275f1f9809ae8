"""Dual-encoder model abstraction and zero-shot classification.

An :class:`EncoderPair` bundles an image encoder and a text encoder that map
into one shared embedding space. Parameters are grouped into a *layer
catalog*: one entry per named parameter tensor, tagged with its branch and
whether forgetting runs may select it for updates.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

VISUAL = "visual"
TEXTUAL = "textual"
NORMALIZED = "normalized"
RAW = "raw"


class InputError(ValueError):
    """Raised when an operation receives malformed input."""


@dataclass(frozen=True)
class LayerDescriptor:
    name: str
    branch: str
    param_count: int
    eligible: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "branch": self.branch,
            "param_count": self.param_count,
            "eligible": self.eligible,
        }


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Lowercased whitespace tokens hashed into a fixed vocabulary."""
    words = text.lower().replace(",", " ").replace(".", " ").split()
    return [zlib.crc32(w.encode("utf-8")) % vocab_size for w in words] or [0]


# ---------------------------------------------------------------------------
# Image encoders
# ---------------------------------------------------------------------------


class LinearImageEncoder(nn.Module):
    """``f(x) = A @ flatten(x)``; used as an analytic fixture."""

    def __init__(self, input_shape: Sequence[int], embed_dim: int, matrix: torch.Tensor | None = None):
        super().__init__()
        self.input_shape = tuple(int(s) for s in input_shape)
        n_in = 1
        for s in self.input_shape:
            n_in *= s
        if matrix is None:
            matrix = torch.zeros(embed_dim, n_in)
        if tuple(matrix.shape) != (embed_dim, n_in):
            raise InputError(f"matrix shape {tuple(matrix.shape)} != {(embed_dim, n_in)}")
        self.weight = nn.Parameter(matrix.detach().clone().to(torch.float64))

    def config(self) -> dict:
        return {"input_shape": list(self.input_shape), "embed_dim": self.weight.shape[0]}

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        flat = images.reshape(images.shape[0], -1).to(self.weight.dtype)
        return flat @ self.weight.T


class SelfAttention(nn.Module):
    """Single-head self-attention over a token sequence."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)
        self.scale = dim ** -0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        att = torch.softmax(self.q(x) @ self.k(x).transpose(-1, -2) * self.scale, dim=-1)
        return self.out(att @ self.v(x))


class ToyImageEncoder(nn.Module):
    """Two conv blocks, one attention mixing layer, pooled projection.

    Inputs are ``(B, H, W, C)`` images in [0, 1].
    """

    def __init__(
        self, input_shape: Sequence[int] = (16, 16, 3), width: int = 16, embed_dim: int = 32, stem_pool: bool = False
    ):
        super().__init__()
        self.input_shape = tuple(int(s) for s in input_shape)
        channels = self.input_shape[2]
        self.width = width
        self.stem_pool = stem_pool
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.ln_pre = nn.LayerNorm(width)
        self.attn = SelfAttention(width)
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Linear(width, embed_dim, bias=False)

    def config(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "width": self.width,
            "embed_dim": self.proj.out_features,
            "stem_pool": self.stem_pool,
        }

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images.permute(0, 3, 1, 2)
        if self.stem_pool:
            x = F.avg_pool2d(x, 2)
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.relu(self.conv2(x)) if self.stem_pool else F.max_pool2d(F.relu(self.conv2(x)), 2)
        tokens = self.ln_pre(x.flatten(2).transpose(1, 2))
        tokens = tokens + self.attn(tokens)
        return self.proj(self.ln_post(tokens.mean(dim=1)))


# ---------------------------------------------------------------------------
# Text encoders
# ---------------------------------------------------------------------------


class ResidualMLP(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.ln = nn.LayerNorm(width, bias=False)
        self.fc1 = nn.Linear(width, 2 * width)
        self.fc2 = nn.Linear(2 * width, width, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.fc2(F.gelu(self.fc1(self.ln(h))))


class BagOfTokensTextEncoder(nn.Module):
    """Token embeddings, mean pooling, a stack of residual MLP blocks and a projection."""

    def __init__(self, vocab_size: int = 512, width: int = 32, embed_dim: int = 32, depth: int = 1):
        super().__init__()
        self.vocab_size = vocab_size
        self.width = width
        self.token_embedding = nn.Embedding(vocab_size, width)
        self.blocks = nn.ModuleList(ResidualMLP(width) for _ in range(depth))
        self.ln_final = nn.LayerNorm(width, bias=False)
        self.proj = nn.Linear(width, embed_dim, bias=False)

    def config(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "width": self.width,
            "embed_dim": self.proj.out_features,
            "depth": len(self.blocks),
        }

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        ids = [torch.tensor(tokenize(p, self.vocab_size)) for p in prompts]
        h = torch.stack([self.token_embedding(t).mean(dim=0) for t in ids])
        for block in self.blocks:
            h = block(h)
        return self.proj(self.ln_final(h))


class LookupTextEncoder(nn.Module):
    """Maps each known prompt to a stored vector; used as a fixture."""

    def __init__(self, prompts: Sequence[str], vectors: torch.Tensor):
        super().__init__()
        self.prompts = list(prompts)
        self.index = {p: i for i, p in enumerate(self.prompts)}
        self.table = nn.Parameter(vectors.detach().clone().to(torch.float64))

    def config(self) -> dict:
        return {"prompts": self.prompts, "embed_dim": self.table.shape[1]}

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        try:
            rows = [self.index[p] for p in prompts]
        except KeyError as exc:
            raise InputError(f"unknown prompt {exc.args[0]!r}") from None
        return self.table[rows]


ENCODER_TYPES = {
    cls.__name__: cls
    for cls in (LinearImageEncoder, ToyImageEncoder, BagOfTokensTextEncoder, LookupTextEncoder)
}


def build_encoder(kind: str, config: dict) -> nn.Module:
    if kind not in ENCODER_TYPES:
        raise InputError(f"unknown encoder type {kind!r}")
    cls = ENCODER_TYPES[kind]
    if cls is LookupTextEncoder:
        return cls(config["prompts"], torch.zeros(len(config["prompts"]), config["embed_dim"]))
    return cls(**config)


# ---------------------------------------------------------------------------
# EncoderPair
# ---------------------------------------------------------------------------


def default_eligibility(name: str, branch: str) -> bool:
    """Visual branch: attention parameters only. Textual branch: everything."""
    if branch == TEXTUAL:
        return True
    return ".attn." in f".{name}"


class EncoderPair(nn.Module):
    """Image encoder (``visual``) and text encoder (``textual``) sharing ``embed_dim``."""

    def __init__(
        self,
        visual: nn.Module,
        textual: nn.Module,
        embed_dim: int,
        normalization_mode: str = NORMALIZED,
        logit_scale: float = 10.0,
        eligible: dict[str, bool] | None = None,
    ):
        super().__init__()
        if normalization_mode not in (NORMALIZED, RAW):
            raise InputError(f"normalization_mode must be {NORMALIZED!r} or {RAW!r}")
        self.visual = visual
        self.textual = textual
        self.embed_dim = int(embed_dim)
        self.normalization_mode = normalization_mode
        self.logit_scale = float(logit_scale)
        self.layer_catalog = self._build_catalog(eligible)

    def _build_catalog(self, eligible: dict[str, bool] | None) -> list[LayerDescriptor]:
        catalog = []
        for full_name, p in self.named_parameters():
            branch, _, name = full_name.partition(".")
            flag = default_eligibility(name, branch)
            if eligible is not None and full_name in eligible:
                flag = bool(eligible[full_name])
            catalog.append(LayerDescriptor(full_name, branch, p.numel(), flag))
        return catalog

    def set_eligibility(self, eligible: dict[str, bool] | str) -> None:
        """Replace eligibility flags. ``"all"`` marks every layer eligible."""
        if eligible == "all":
            eligible = {d.name: True for d in self.layer_catalog}
        self.layer_catalog = [
            LayerDescriptor(d.name, d.branch, d.param_count, bool(eligible.get(d.name, d.eligible)))
            for d in self.layer_catalog
        ]

    def layer_params(self) -> dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.visual.input_shape)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.visual.parameters()).dtype

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """Batched image encoding; ``images`` is ``(B, H, W, C)``."""
        if tuple(images.shape[1:]) != self.input_shape:
            raise InputError(f"image shape {tuple(images.shape[1:])} does not match {self.input_shape}")
        return self.visual(images.to(self.dtype))

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        if isinstance(prompts, str):
            prompts = [prompts]
        if len(prompts) == 0:
            raise InputError("prompt list is empty")
        return self.textual(list(prompts))

    def clone(self) -> "EncoderPair":
        import copy

        return copy.deepcopy(self)


def encode_image(pair: EncoderPair, image: torch.Tensor) -> torch.Tensor:
    """Embed a single ``(H, W, C)`` image; returns a length-``d`` vector."""
    if tuple(image.shape) != pair.input_shape:
        raise InputError(f"image shape {tuple(image.shape)} does not match {pair.input_shape}")
    return pair.encode_images(image.unsqueeze(0))[0]


def encode_text(pair: EncoderPair, prompts: Sequence[str]) -> torch.Tensor:
    return pair.encode_text(prompts)


def build_toy_pair(
    input_shape: Sequence[int] = (16, 16, 3),
    embed_dim: int = 32,
    vocab_size: int = 512,
    seed: int = 0,
    logit_scale: float = 10.0,
    visual_width: int = 16,
    text_width: int = 32,
    stem_pool: bool = False,
    text_depth: int = 1,
) -> EncoderPair:
    torch.manual_seed(seed)
    visual = ToyImageEncoder(input_shape, width=visual_width, embed_dim=embed_dim, stem_pool=stem_pool)
    textual = BagOfTokensTextEncoder(vocab_size, width=text_width, embed_dim=embed_dim, depth=text_depth)
    return EncoderPair(visual, textual, embed_dim, logit_scale=logit_scale)


# ---------------------------------------------------------------------------
# Prompts and zero-shot logits
# ---------------------------------------------------------------------------


class ClassPromptSet:
    """Class names wrapped in a template; the prompt matrix is computed lazily."""

    def __init__(self, class_names: Sequence[str], template: str, prompts: Sequence[str] | None = None):
        self.class_names = list(class_names)
        self.template = template
        self.prompts = list(prompts) if prompts is not None else [template.format(c) for c in self.class_names]
        self._matrix: torch.Tensor | None = None
        self._matrix_owner: int | None = None

    def __len__(self) -> int:
        return len(self.class_names)

    def index(self, class_name: str) -> int:
        try:
            return self.class_names.index(class_name)
        except ValueError:
            raise InputError(f"unknown class {class_name!r}") from None

    def prompt_matrix(self, pair: EncoderPair, cache: bool = False) -> torch.Tensor:
        """Rows are text embeddings of the prompts, in class order.

        Caching is opt-in: forgetting mutates the text encoder, so callers that
        evaluate a changing model must recompute.
        """
        if cache and self._matrix is not None and self._matrix_owner == id(pair):
            return self._matrix
        matrix = pair.encode_text(self.prompts)
        if cache:
            self._matrix, self._matrix_owner = matrix.detach(), id(pair)
        return matrix


def _count_placeholders(template: str) -> int:
    import string

    return sum(1 for _, field, _, _ in string.Formatter().parse(template) if field is not None)


def build_class_prompts(
    class_names: Sequence[str],
    template: str,
    descriptions: dict[str, Sequence[str]] | None = None,
    seed: int | None = None,
) -> ClassPromptSet:
    """Wrap each class name in ``template`` (one ``{}`` placeholder).

    With ``descriptions``, each class instead gets one description drawn at
    random from its list (free-form class descriptions in place of a template).
    """
    if _count_placeholders(template) != 1:
        raise InputError(f"template must contain exactly one placeholder: {template!r}")
    if descriptions is None:
        return ClassPromptSet(class_names, template)
    import random

    rng = random.Random(seed)
    prompts = []
    for name in class_names:
        options = list(descriptions.get(name) or [])
        prompts.append(rng.choice(options) if options else template.format(name))
    return ClassPromptSet(class_names, template, prompts)


def zero_shot_logits(image_emb: torch.Tensor, prompt_matrix: torch.Tensor, mode: str = NORMALIZED) -> torch.Tensor:
    """Class logits for one embedding ``(d,)`` or a batch ``(B, d)``.

    ``raw`` is the plain product ``T W^T``; ``normalized`` L2-normalizes both
    operands first (cosine similarity).
    """
    if image_emb.shape[-1] != prompt_matrix.shape[-1]:
        raise InputError(f"embedding dim {image_emb.shape[-1]} != prompt dim {prompt_matrix.shape[-1]}")
    if mode == NORMALIZED:
        image_emb = F.normalize(image_emb, dim=-1)
        prompt_matrix = F.normalize(prompt_matrix, dim=-1)
    elif mode != RAW:
        raise InputError(f"unknown normalization mode {mode!r}")
    return image_emb @ prompt_matrix.T.to(image_emb.dtype)


def class_logits(pair: EncoderPair, images: torch.Tensor, prompt_matrix: torch.Tensor) -> torch.Tensor:
    """Zero-shot logits for a batch of images under the pair's normalization mode."""
    return zero_shot_logits(pair.encode_images(images), prompt_matrix, pair.normalization_mode)


def class_log_probs(pair: EncoderPair, images: torch.Tensor, prompt_matrix: torch.Tensor) -> torch.Tensor:
    """Log-softmax over classes with the pair's fixed logit scale."""
    return torch.log_softmax(pair.logit_scale * class_logits(pair, images, prompt_matrix), dim=-1)
