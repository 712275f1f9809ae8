from __future__ import annotations

import json
from types import SimpleNamespace

import pytest
import torch

from zsforget.config import ExperimentConfig
from zsforget.encoders import EncoderPair, LinearImageEncoder, LookupTextEncoder, build_class_prompts
from zsforget.experiment import RunManifest, build_model, prepare_data, run_experiment
from zsforget.report import load_report

# The class forgotten in the seeded end-to-end runs.
ACCEPTANCE_TARGET = "gray stripe"


def linear_pair(matrix, input_shape, prompts=("t",), vectors=None) -> EncoderPair:
    """``f(x) = A x`` image encoder plus a lookup table for text, in float64."""
    matrix = torch.as_tensor(matrix, dtype=torch.float64)
    d = matrix.shape[0]
    if vectors is None:
        vectors = torch.zeros(len(prompts), d, dtype=torch.float64)
    visual = LinearImageEncoder(input_shape, d, matrix)
    textual = LookupTextEncoder(list(prompts), torch.as_tensor(vectors, dtype=torch.float64))
    return EncoderPair(visual, textual, d)


def acceptance_config(method: str = "lip", **overrides) -> ExperimentConfig:
    overrides.setdefault("target_classes", [ACCEPTANCE_TARGET])
    return ExperimentConfig(method=method, **overrides)


@pytest.fixture(scope="session")
def toy():
    """The seeded toy model, its data splits and the shapes prompt set."""
    cfg = acceptance_config()
    train, test = prepare_data(cfg)
    pair = build_model(cfg, train)
    prompts = build_class_prompts(test["shapes"].class_names, cfg.eval.template)
    return SimpleNamespace(cfg=cfg, pair=pair, train=train, test=test, prompts=prompts)


def _load_run(manifest: RunManifest) -> SimpleNamespace:
    rows, extra = load_report(manifest.path("report"))
    traces = json.loads(manifest.path("traces").read_text())
    return SimpleNamespace(manifest=manifest, rows=rows, row=rows[0], extra=extra, traces=traces[ACCEPTANCE_TARGET])


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Seeded end-to-end runs shared by the experiment and acceptance tests.

    ``lip`` runs twice into separate directories for the reproducibility check.
    """
    root = tmp_path_factory.mktemp("runs")
    out = {}
    methods = [("lip", "lip"), ("lip_repeat", "lip"), ("ulip", "ulip"), ("all_params", "all_params")]
    methods += [(m, m) for m in ("amns", "amns_retain", "emmn")]
    for key, method in methods:
        out[key] = _load_run(run_experiment(acceptance_config(method), root / key))
    return out


@pytest.fixture(scope="session")
def batch(toy):
    """64 synthetic images of the acceptance target on the seeded toy model."""
    from zsforget.synth import generate_synthetic_samples

    return generate_synthetic_samples(toy.pair, toy.prompts, toy.prompts.index(ACCEPTANCE_TARGET), 64, 0.5, 3000, seed=0)
