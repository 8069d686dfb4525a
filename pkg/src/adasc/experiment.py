"""Run configuration (TOML) and the end-to-end pretrain / adapt / evaluate pipeline."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from . import data as D
from . import features as F
from . import nn
from .adapt import AdaptConfig, DivergenceError, PretrainConfig, adapt, pretrain, sub_seed
from .autodiff import ContractError
from .checkpoint import (CheckpointError, atomic_write, load_checkpoint, read_container, save_checkpoint,
                         save_dataset, write_container)
from .nn import Model, ModelSpec
from .report import EvaluationReport, accuracy_table, evaluate, render_confusion, write_confusion_csv

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "ADASC_OUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ModelsConfig:
    mapper: str = "mlp"
    classifier: str = "mlp"
    discriminator: str = "mlp"
    mapper_widths: list[int] = field(default_factory=lambda: [32, 32])
    mapper_head: str = "linear"
    classifier_hidden: list[int] = field(default_factory=list)
    discriminator_widths: list[int] = field(default_factory=lambda: [64, 64])
    kaggle_pool: list[int] = field(default_factory=lambda: [2, 2])


@dataclass
class SyntheticConfig:
    n_classes: int = 3
    samples_per_class: int = 500
    class_means: list[list[float]] = field(default_factory=lambda: [list(m) for m in D._default_means()])
    class_std: float = 0.8
    rotation_deg: float = 35.0
    translation: list[float] = field(default_factory=lambda: [2.0, -1.0])
    gain: list[float] = field(default_factory=lambda: [1.4, 0.8])
    noise: float = 0.2

    def shift_config(self, seed: int) -> D.SyntheticShiftConfig:
        return D.SyntheticShiftConfig(self.n_classes, self.samples_per_class,
                                      tuple(tuple(m) for m in self.class_means), self.class_std,
                                      self.rotation_deg, tuple(self.translation), tuple(self.gain), self.noise, seed)


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "dcase"
    manifest: str = ""
    features: str = ""
    audio_root: str = ""
    source_device: str = "A"
    target_devices: list[str] = field(default_factory=lambda: ["B", "C"])
    split_seed: int = 0
    sample_rate: int = F.SAMPLE_RATE


@dataclass
class PretrainSection:
    batch_size: int = 38
    epochs: int = 30
    lr: float = 1e-3


@dataclass
class AdaptSection:
    n_source: int = 10
    n_target: int = 6
    epochs: int = 30
    lr: float = 3e-4
    d_every: int = 10
    d_accumulate: bool = False


@dataclass
class RunConfig:
    mode: str = "synth"
    seed: int = 0
    out: str = ""
    precision: str = "f32"
    strict: bool = False
    checkpoint: str = ""
    models: ModelsConfig = field(default_factory=ModelsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)

    MODES = ("pretrain", "adapt", "evaluate", "synth", "features")

    def validate(self) -> "RunConfig":
        if self.mode not in self.MODES:
            raise ConfigError(f"mode must be one of {', '.join(self.MODES)}, got {self.mode!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        for name in (self.models.mapper, self.models.classifier, self.models.discriminator):
            if name not in nn.PRESETS:
                raise ConfigError(f"unknown model preset {name!r}")
        if self.data.source not in ("synthetic", "dcase"):
            raise ConfigError("data.source must be 'synthetic' or 'dcase'")
        if self.mode == "features" or self.data.source == "dcase":
            if not self.data.manifest:
                raise ConfigError("data.manifest is required for corpus runs")
        try:
            PretrainConfig(self.pretrain.batch_size, self.pretrain.epochs, self.pretrain.lr)
            AdaptConfig(self.adapt.n_source, self.adapt.n_target, self.adapt.epochs, self.adapt.lr,
                        self.adapt.d_every)
            if self.data.source == "synthetic":
                self.synthetic.shift_config(self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        return _build(cls, d, "")


def _build(cls, d: Mapping[str, Any], where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(where + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{where}{name}] must be a table")
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        else:
            if isinstance(current, bool) and not isinstance(value, bool):
                raise ConfigError(f"{where}{name} must be true or false")
            if isinstance(current, (int, float)) and not isinstance(current, bool):
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(f"{where}{name} must be a number")
                value = type(current)(value) if isinstance(current, float) else value
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    import tomli

    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------- orchestration


def build_specs(cfg: RunConfig, input_shape: tuple[int, ...], n_classes: int) -> tuple[ModelSpec, ModelSpec, ModelSpec]:
    mc = cfg.models
    if mc.mapper == "mlp":
        spec_m = nn.mlp(input_shape, mc.mapper_widths, head=mc.mapper_head or None, name="mapper")
    elif mc.mapper == "kaggle_m":
        spec_m = nn.kaggle_m(input_shape, tuple(mc.kaggle_pool))
    else:
        spec_m = nn.preset(mc.mapper, input_shape)
    feat = spec_m.output_shape
    if mc.classifier == "mlp":
        spec_c = nn.mlp(feat, list(mc.classifier_hidden) + [n_classes], head="softmax", name="classifier")
    elif mc.classifier_hidden:
        spec_c = nn.preset(mc.classifier, feat, n_classes, tuple(mc.classifier_hidden))
    else:
        spec_c = nn.preset(mc.classifier, feat, n_classes)
    if mc.discriminator == "mlp":
        spec_d = nn.mlp(feat, list(mc.discriminator_widths) + [1], head="sigmoid", name="discriminator")
    else:
        spec_d = nn.preset(mc.discriminator, feat)
    return spec_m, spec_c, spec_d


@dataclass
class Corpus:
    """Train / validation / test sets for one run, source and per-device targets."""

    source_train: D.DomainDataset
    source_val: D.DomainDataset | None
    source_test: D.DomainDataset
    target_train: list[D.DomainDataset]
    target_test: D.DomainDataset


def synthetic_corpus(cfg: RunConfig) -> Corpus:
    dtype = ad.get_dtype()
    src, tgt = D.synth_domain_pair(cfg.synthetic.shift_config(cfg.seed), dtype)
    src_te, tgt_te = D.synth_domain_pair(cfg.synthetic.shift_config(sub_seed(cfg.seed, "synthetic-test")), dtype)
    return Corpus(src, None, src_te, [tgt], tgt_te)


def dcase_corpus(cfg: RunConfig) -> Corpus:
    rows = D.read_manifest(cfg.data.manifest)
    train, val, test = D.split_dataset(rows, D.SplitPlan(seed=cfg.data.split_seed))
    feats, _ = read_container(cfg.data.features) if cfg.data.features else ({}, {})

    def pick(part, devices, role):
        chosen = [r for r in part if r.device in devices]
        return D.rows_to_dataset(chosen, feats, role)

    src_dev = [cfg.data.source_device]
    return Corpus(
        pick(train, src_dev, "source"),
        pick(val, src_dev, "source"),
        pick(test, src_dev, "source"),
        [pick(train, [dev], "target") for dev in cfg.data.target_devices],
        pick(test, cfg.data.target_devices, "target"),
    )


def load_corpus(cfg: RunConfig) -> Corpus:
    return synthetic_corpus(cfg) if cfg.data.source == "synthetic" else dcase_corpus(cfg)


def _write_json(path: Path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _provenance(cfg: RunConfig, step: str) -> dict:
    return {"config_digest": cfg.digest(), "seed": cfg.seed, "step": step, "precision": cfg.precision}


def output_dir(cfg: RunConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"{cfg.mode}-{cfg.digest()[:10]}"


def run_pretrain(cfg: RunConfig, corpus: Corpus, out: Path):
    n_classes = corpus.source_train.n_classes
    spec_m, spec_c, _ = build_specs(cfg, corpus.source_train.features.shape[1:], n_classes)
    pc = PretrainConfig(cfg.pretrain.batch_size, cfg.pretrain.epochs, cfg.pretrain.lr, cfg.seed)
    m_s, c, trace = pretrain(spec_m, spec_c, corpus.source_train, corpus.source_val, pc)
    trace.to_csv(out / "pretrain_trace.csv")
    save_checkpoint({"source_mapper": m_s, "classifier": c}, out / "pretrain.ckpt",
                    metadata=_provenance(cfg, "pretrain"))
    return m_s, c


def run_adapt(cfg: RunConfig, corpus: Corpus, out: Path, m_s: Model, c: Model):
    n_classes = corpus.source_train.n_classes
    _, _, spec_d = build_specs(cfg, corpus.source_train.features.shape[1:], n_classes)
    ac = AdaptConfig(cfg.adapt.n_source, cfg.adapt.n_target, cfg.adapt.epochs, cfg.adapt.lr, cfg.adapt.d_every,
                     cfg.adapt.d_accumulate, cfg.seed)
    outcome = adapt(m_s, c, spec_d, corpus.source_train, corpus.target_train, ac)
    outcome.trace.to_csv(out / "adapt_trace.csv")
    save_checkpoint({"target_mapper": outcome.target_mapper, "discriminator": outcome.discriminator},
                    out / "adapted.ckpt", metadata=_provenance(cfg, "adapt"))
    return outcome


def run_evaluate(cfg: RunConfig, corpus: Corpus, out: Path, c: Model, mappers: Mapping[str, Model]) -> list[EvaluationReport]:
    reports = []
    meta = {"config_digest": cfg.digest(), "seed": cfg.seed}
    for identity, m in mappers.items():
        for ds in (corpus.source_test, corpus.target_test):
            r = evaluate(m, c, ds, identity, meta)
            reports.append(r)
            stem = f"confusion_{ds.role}_{identity}"
            write_confusion_csv(r.confusion, out / f"{stem}.csv")
            write_confusion_csv(r.confusion, out / f"{stem}_normalized.csv", normalized=True)
    _write_json(out / "report.json", {
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "accuracy": {f"{r.domain}/{r.model}": r.accuracy for r in reports},
        "reports": [r.to_dict() for r in reports],
    })
    text = [accuracy_table(reports), ""]
    for r in reports:
        text += [f"{r.domain} / {r.model} (row-normalized)", render_confusion(r.confusion), ""]
    with atomic_write(out / "report.txt", "w") as fh:
        fh.write("\n".join(text))
    return reports


def run_features(cfg: RunConfig, out: Path) -> Path:
    rows = D.read_manifest(cfg.data.manifest)
    root = Path(cfg.data.audio_root) if cfg.data.audio_root else Path(cfg.data.manifest).parent
    feats = {}
    for r in rows:
        clip = F.read_wav(root / r.path, r.clip_id)
        if clip.sample_rate != cfg.data.sample_rate:
            raise ContractError(f"{r.path}: sample rate {clip.sample_rate}, expected {cfg.data.sample_rate}")
        feats[r.clip_id] = F.log_mel(clip, device=r.device).values.astype(np.float32)
    target = Path(cfg.data.features) if cfg.data.features else out / "features.adda"
    write_container(target, feats, {"devices": {r.clip_id: r.device for r in rows}})
    return target


def checkpoint_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else out


def run_experiment(cfg: RunConfig) -> int:
    """Execute ``cfg.mode``; returns a process exit status."""
    try:
        cfg.validate()
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return 2
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with ad.precision(cfg.precision), ad.strict(cfg.strict):
        try:
            if cfg.mode == "features":
                run_features(cfg, out)
                return 0
            corpus = load_corpus(cfg)
            if cfg.mode == "synth":
                if cfg.data.source == "synthetic":
                    save_dataset(corpus.source_train, out / "datasets" / "source_train.adda")
                    save_dataset(corpus.target_train[0], out / "datasets" / "target_train.adda")
                m_s, c = run_pretrain(cfg, corpus, out)
                outcome = run_adapt(cfg, corpus, out, m_s, c)
                run_evaluate(cfg, corpus, out, c, {"non-adapted": m_s, "adapted": outcome.target_mapper})
            elif cfg.mode == "pretrain":
                run_pretrain(cfg, corpus, out)
            elif cfg.mode == "adapt":
                ck = load_checkpoint(checkpoint_dir(cfg, out) / "pretrain.ckpt")
                run_adapt(cfg, corpus, out, ck["source_mapper"].eval(), ck["classifier"].eval())
            elif cfg.mode == "evaluate":
                ck = load_checkpoint(checkpoint_dir(cfg, out) / "pretrain.ckpt")
                mappers = {"non-adapted": ck["source_mapper"].eval()}
                adapted = checkpoint_dir(cfg, out) / "adapted.ckpt"
                if adapted.exists():
                    mappers["adapted"] = load_checkpoint(adapted)["target_mapper"].eval()
                run_evaluate(cfg, corpus, out, ck["classifier"].eval(), mappers)
        except DivergenceError as exc:
            exc.trace.to_csv(out / "diverged_trace.csv")
            log.error("training diverged: %s (trace kept in %s)", exc, out)
            return 4
        except (ContractError, CheckpointError, D.AllocationError, ValueError, OSError, KeyError) as exc:
            log.error("%s: %s", type(exc).__name__, exc)
            return 3
    return 0


@dataclass
class TrialResult:
    seed: int
    source_before: float
    source_after: float
    target_before: float
    target_after: float
    discriminator_accuracy: float


def synthetic_trial(cfg: RunConfig, seed: int) -> TrialResult:
    """Pretrain + adapt on one synthetic pair; accuracies are measured on held-out pairs."""
    from .adapt import accuracy, discriminator_accuracy

    cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed})
    with ad.precision(cfg.precision):
        corpus = synthetic_corpus(cfg)
        spec_m, spec_c, spec_d = build_specs(cfg, corpus.source_train.features.shape[1:], corpus.source_train.n_classes)
        m_s, c, _ = pretrain(spec_m, spec_c, corpus.source_train, None,
                             PretrainConfig(cfg.pretrain.batch_size, cfg.pretrain.epochs, cfg.pretrain.lr, seed))
        outcome = adapt(m_s, c, spec_d, corpus.source_train, corpus.target_train,
                        AdaptConfig(cfg.adapt.n_source, cfg.adapt.n_target, cfg.adapt.epochs, cfg.adapt.lr,
                                    cfg.adapt.d_every, cfg.adapt.d_accumulate, seed))
        m_t = outcome.target_mapper
        return TrialResult(
            seed,
            accuracy(m_s, c, corpus.source_test),
            accuracy(m_t, c, corpus.source_test),
            accuracy(m_s, c, corpus.target_test),
            accuracy(m_t, c, corpus.target_test),
            discriminator_accuracy(outcome, corpus.source_test.features, corpus.target_test.features),
        )


def unshifted(cfg: RunConfig) -> RunConfig:
    """Copy of ``cfg`` whose synthetic target domain equals the source domain."""
    d = cfg.to_dict()
    d["synthetic"].update(rotation_deg=0.0, translation=[0.0] * len(d["synthetic"]["translation"]),
                          gain=[1.0] * len(d["synthetic"]["gain"]), noise=0.0)
    return RunConfig.from_dict(d)
