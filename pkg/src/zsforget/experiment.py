"""End-to-end forgetting runs: data, model, synthetic samples, method, evaluation, artifacts."""

from __future__ import annotations

import json
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .baselines import AMNS, AMNS_RETAIN, EMMN, BaselineConfig, amnesiac_forget, amnesiac_retain_forget, emmn_forget
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config
from .encoders import EncoderPair, InputError, build_class_prompts
from .evaluation import (
    VerificationThresholds,
    before_after_report,
    predict,
    verify_forgetting,
)
from .forget import run_forgetting
from .rankshift import rank_shift_analysis
from .retrieval import build_retrieval_index, retrieval_scores
from .synth import CalibrationTarget, calibrate_batch, generate_synthetic_samples, rescore, synthetic_accuracy
from .toydata import LabeledImageSet, make_toy_dataset, merge_datasets, train_test_split
from .training import train_toy_pair

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ZSFORGET_OUTPUT_ROOT"
RUN_FILES = {
    "config": "config.yaml",
    "effective_config": "config.effective.yaml",
    "bf_checkpoint": "bf.safetensors",
    "af_checkpoint": "af.safetensors",
    "report": "report.json",
    "report_text": "report.txt",
    "traces": "traces.json",
    "manifest": "manifest.json",
}


class RunFailure(RuntimeError):
    """A run stage raised; the manifest in ``run_dir`` records which one."""

    def __init__(self, stage: str, run_dir: Path, cause: BaseException):
        super().__init__(f"run failed during {stage}: {cause}")
        self.stage = stage
        self.run_dir = run_dir


@dataclass
class RunManifest:
    run_dir: str
    config_hash: str
    eval_signature: str
    method: str
    status: str
    started: float
    finished: float
    files: dict = field(default_factory=dict)
    version: str = __version__
    failure: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def path(self, key: str) -> Path:
        return Path(self.run_dir) / self.files[key]

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / RUN_FILES["manifest"]
        if not path.is_file():
            raise InputError(f"no manifest at {path}")
        data = json.loads(path.read_text())
        data["run_dir"] = str(path.parent)
        return cls(**data)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


def default_run_dir(cfg: ExperimentConfig, root=None) -> Path:
    return (Path(root) if root else output_root(cfg)) / f"{cfg.name or cfg.method}-{cfg.config_hash()[:12]}"


def prepare_data(cfg: ExperimentConfig) -> tuple[dict[str, LabeledImageSet], dict[str, LabeledImageSet]]:
    """Train and held-out splits for every configured toy dataset kind."""
    train, test = {}, {}
    for i, kind in enumerate(cfg.data.kinds):
        ds = make_toy_dataset(kind, cfg.data.per_class, seed=cfg.data.seed + i, size=cfg.data.image_size)
        train[kind], test[kind] = train_test_split(ds, cfg.data.test_fraction, seed=cfg.data.seed + i)
    return train, test


def build_model(cfg: ExperimentConfig, train: dict[str, LabeledImageSet]) -> EncoderPair:
    m = cfg.model
    if m.source == "checkpoint":
        return load_checkpoint(m.checkpoint)
    return train_toy_pair(
        merge_datasets(list(train.values())),
        seed=m.seed,
        epochs=m.epochs,
        lr=m.learning_rate,
        embed_dim=m.embed_dim,
        norm_weight=m.norm_weight,
        logit_scale=m.logit_scale,
    )


def make_batch(pair, prompts, target: int, cfg: ExperimentConfig, offset: int = 0):
    s = cfg.synth
    calib = CalibrationTarget(**asdict(s.calibration)) if s.calibration else None
    batch = generate_synthetic_samples(
        pair, prompts, target, s.count, s.step_size, s.max_steps, seed=s.seed + offset, calibration=calib
    )
    if calib is not None:
        batch = calibrate_batch(pair, prompts, batch, calib)
    return batch


def _retain_set(train: LabeledImageSet, target: int, per_class: int) -> LabeledImageSet:
    keep = torch.zeros(len(train), dtype=torch.bool)
    for c in range(len(train.class_names)):
        if c == target:
            continue
        idx = (train.labels == c).nonzero().flatten()[:per_class]
        keep[idx] = True
    return train.subset(keep)


def apply_method(pair, prompts, batch, cfg: ExperimentConfig, train: LabeledImageSet) -> dict:
    """Forget ``batch.target_class`` in place with the configured method; returns traces."""
    method = cfg.method
    if method in ("lip", "emb", "ulip", "all_params"):
        saved = {d.name: d.eligible for d in pair.layer_catalog}
        if method == "all_params":
            pair.set_eligibility("all")
        result = run_forgetting(pair, prompts, batch, cfg.forget)
        pair.set_eligibility(saved)
        return result.traces()
    b = cfg.baseline
    common = dict(epochs=b.epochs, learning_rate=b.learning_rate, label_remap_seed=b.label_remap_seed, batch_size=b.batch_size)
    target = batch.target_class
    if method == "amns":
        amnesiac_forget(pair, prompts, batch, BaselineConfig(method=AMNS, **common))
    elif method == "amns_retain":
        retain = _retain_set(train, target, b.retain_per_class)
        bcfg = BaselineConfig(method=AMNS_RETAIN, retain_set=retain, **common)
        forget_real = train.images[train.labels == target]  # real forget data: this baseline is not zero-shot
        amnesiac_retain_forget(pair, prompts, forget_real, target, retain, bcfg)
    elif method == "emmn":
        others = [n for i, n in enumerate(prompts.class_names) if i != target]
        bcfg = BaselineConfig(
            method=EMMN,
            emmn_retain_classes=others,
            emmn_samples_per_class=b.emmn_samples_per_class,
            emmn_step_size=cfg.synth.step_size,
            emmn_max_steps=cfg.synth.max_steps,
            **common,
        )
        emmn_forget(pair, prompts, target, bcfg, seed=cfg.synth.seed)
    else:
        raise InputError(f"unknown method {method!r}")
    return {"final_synth_acc": synthetic_accuracy(pair, prompts, batch)}


def rank_shift_by_dataset(bf, af, test: dict[str, LabeledImageSet], template: str, skip: dict[str, list[str]]) -> dict:
    """Rank-shift statistics per dataset, leaving out images of forgotten classes."""
    out = {}
    for name, ds in test.items():
        prompts = build_class_prompts(ds.class_names, template)
        drop = [ds.class_names.index(c) for c in skip.get(name, [])]
        keep = torch.ones(len(ds), dtype=torch.bool)
        for c in drop:
            keep &= ds.labels != c
        sub = ds.subset(keep)
        out[name] = rank_shift_analysis(predict(bf, sub.images, prompts), predict(af, sub.images, prompts), sub.labels).to_dict()
    return out


def evaluate_run(bf, af, batches, cfg: ExperimentConfig, test: dict[str, LabeledImageSet]):
    """One EvalReport per target class, plus dataset-level rank-shift statistics."""
    template = cfg.eval.template
    home = test[cfg.target_dataset]
    prompts = build_class_prompts(home.class_names, template)
    thresholds = VerificationThresholds(goal_acc=cfg.forget.goal_acc)
    ks = [k for k in cfg.eval.retrieval_ks if k <= sum(len(d) for d in test.values()) - 1]
    index_bf = build_retrieval_index(bf, test, "bf")
    index_af = build_retrieval_index(af, test, "af")
    rows = []
    for name, batch in zip(cfg.target_classes, batches):
        target = prompts.index(name)
        real = home.of_class(target).images
        synth_acc = synthetic_accuracy(af, prompts, batch)
        stats = {
            "synth_prob": float(rescore(af, prompts, batch.images, target).mean()),
            "real_prob": float(rescore(af, prompts, real, target).mean()) if len(real) else 0.0,
        }
        row = before_after_report(
            bf,
            af,
            test,
            cfg.target_dataset,
            name,
            method=cfg.method_label,
            forgetting_type=cfg.forgetting_type,
            template=template,
            weighting=cfg.eval.weighting,
        )
        row.synth_train_acc = synth_acc
        row.real_valid_acc = row.target_acc_af
        row.verdicts = [verify_forgetting(synth_acc, row.target_acc_af, stats, thresholds)]
        row.retrieval = {
            "bf": retrieval_scores(bf, test, cfg.target_dataset, name, template, ks, index_bf),
            "af": retrieval_scores(af, test, cfg.target_dataset, name, template, ks, index_af),
        }
        row.extras = {"synth_prob_stats": stats, "flagged_samples": int(sum(batch.flagged))}
        rows.append(row)
    extra = {}
    if cfg.eval.rank_shift:
        extra["rank_shift"] = rank_shift_by_dataset(bf, af, test, template, {cfg.target_dataset: cfg.target_classes})
    return rows, extra


def run_experiment(cfg: ExperimentConfig, run_dir=None, config_text: str | None = None) -> RunManifest:
    """Execute one configured run and write its artifacts; deterministic given the config."""
    from .report import format_json, format_text

    run_dir = Path(run_dir) if run_dir is not None else default_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    files = dict(RUN_FILES)
    manifest = RunManifest(
        run_dir=str(run_dir),
        config_hash=cfg.config_hash(),
        eval_signature=cfg.eval_signature(),
        method=cfg.method,
        status="running",
        started=time.time(),
        finished=0.0,
        files=files,
    )
    effective = dump_config(cfg)
    (run_dir / files["config"]).write_text(config_text if config_text is not None else effective, encoding="utf-8")
    (run_dir / files["effective_config"]).write_text(effective, encoding="utf-8")

    stage = "setup"
    try:
        torch.manual_seed(cfg.model.seed)
        stage = "data"
        train, test = prepare_data(cfg)
        home = train[cfg.target_dataset]
        for name in cfg.target_classes:
            if name not in home.class_names:
                raise InputError(f"target class {name!r} not in dataset {cfg.target_dataset!r}")
        stage = "model"
        pair = build_model(cfg, train)
        save_checkpoint(pair, run_dir / files["bf_checkpoint"])
        bf = pair.clone()
        prompts = build_class_prompts(home.class_names, cfg.eval.template)
        batches, traces = [], {}
        for i, name in enumerate(cfg.target_classes):
            stage = f"synth:{name}"
            batch = make_batch(pair, prompts, prompts.index(name), cfg, offset=i)
            batches.append(batch)
            stage = f"forget:{name}"
            traces[name] = apply_method(pair, prompts, batch, cfg, home)
        save_checkpoint(pair, run_dir / files["af_checkpoint"])
        _write_atomic(run_dir / files["traces"], json.dumps(traces, indent=2, sort_keys=True) + "\n")
        stage = "evaluate"
        rows, extra = evaluate_run(bf, pair, batches, cfg, test)
        _write_atomic(run_dir / files["report"], format_json(rows, config_hash=manifest.config_hash, **extra))
        _write_atomic(run_dir / files["report_text"], format_text(rows))
    except Exception as exc:
        manifest.status = "failed"
        manifest.finished = time.time()
        manifest.failure = {"stage": stage, "error": repr(exc), "traceback": traceback.format_exc()}
        _write_atomic(run_dir / files["manifest"], json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
        raise RunFailure(stage, run_dir, exc) from exc
    manifest.status = "ok"
    manifest.finished = time.time()
    _write_atomic(run_dir / files["manifest"], json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("run written to %s", run_dir)
    return manifest


def compare_runs(manifests) -> list:
    """Report rows of several runs, in the given order, for side-by-side rendering.

    All runs must share the evaluation setup (model, data, eval settings).
    """
    from .report import load_report

    manifests = [m if isinstance(m, RunManifest) else RunManifest.load(m) for m in manifests]
    if len(manifests) < 2:
        raise InputError("compare needs at least two runs")
    for m in manifests:
        if m.status != "ok":
            raise InputError(f"run {m.run_dir} did not finish ({m.status})")
    sigs = {m.eval_signature for m in manifests}
    if len(sigs) != 1:
        raise InputError("runs were evaluated under different setups")
    rows = []
    for m in manifests:
        rows += load_report(m.path("report"))[0]
    return rows
