"""Source pretraining, adversarial adaptation of an untied target mapper, and Adam.

The adaptation loop follows the GAN reading of the method: the frozen source
mapper supplies "real" features, the target mapper is the generator, and the
discriminator is refreshed only every ``d_every`` iterations. The frozen label
classifier adds a cross-entropy term on source examples pushed through the
target mapper, which keeps the adapted features usable by that classifier.
"""
from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ComputationRecord, ContractError, Tensor
from .data import DomainDataset, compose_adapt_batches, compose_pretrain_batches, oversample_target
from .nn import Model, ModelSpec, build_model

log = logging.getLogger(__name__)

PROB_EPS = 1e-10
D_CLAMP = 1e-7


class DivergenceError(RuntimeError):
    """A loss became non-finite; the partial trace is attached."""

    def __init__(self, message: str, trace: "Trace"):
        super().__init__(message)
        self.trace = trace


def sub_seed(seed: int, *keys) -> int:
    """Independent, reproducible child seed for a named stream."""
    words = [seed] + [k if isinstance(k, int) else zlib.crc32(k.encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ---------------------------------------------------------------- losses


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=ad.get_dtype()))


def loss_source(probs, labels) -> Tensor:
    """Batch-mean cross-entropy of class probabilities against one-hot labels."""
    probs = _t(probs)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if probs.shape != labels.shape or probs.data.ndim != 2:
        raise ContractError(f"probabilities {probs.shape} and one-hot labels {labels.shape} differ")
    if probs.shape[0] == 0:
        raise ContractError("empty batch")
    # Flooring rather than adding the epsilon leaves in-range probabilities unbiased.
    ll = ad.sum(ad.mul(ad.log(ad.clip(probs, PROB_EPS, 1.0)), labels.astype(probs.data.dtype)), axis=1)
    return ad.neg(ad.mean(ll))


def _mean_log(d: Tensor, complement: bool) -> Tensor:
    d = _t(d)
    if d.size == 0:
        raise ContractError("empty discriminator batch")
    d = ad.clip(d, D_CLAMP, 1 - D_CLAMP)
    if complement:
        d = ad.add(ad.neg(d), 1.0)
    return ad.mean(ad.log(d))


def loss_discriminator(d_source, d_target) -> Tensor:
    """-[mean log D(source features) + mean log(1 - D(target features))]."""
    return ad.neg(ad.add(_mean_log(d_source, False), _mean_log(d_target, True)))


def loss_mapper(d_target, probs_source, labels_source) -> Tensor:
    """-mean log D(target features) plus the source cross-entropy through the target mapper."""
    return ad.add(ad.neg(_mean_log(d_target, False)), loss_source(probs_source, labels_source))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params``."""
    missing = set(params) - set(grads)
    if missing:
        raise ContractError(f"no gradient for {sorted(missing)}")
    state.step += 1
    c1 = 1 - beta1**state.step
    c2 = 1 - beta2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------- traces


@dataclass
class Trace:
    rows: list[tuple[int, int, str, float]] = field(default_factory=list)

    def add(self, epoch: int, iteration: int, name: str, value: float) -> None:
        self.rows.append((epoch, iteration, name, float(value)))

    def values(self, name: str) -> list[float]:
        return [r[3] for r in self.rows if r[2] == name]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "iteration", "loss", "value"])
            for epoch, it, name, value in self.rows:
                w.writerow([epoch, it, name, repr(value)])


def _check_finite(loss: Tensor, name: str, trace: Trace) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(f"{name} became non-finite", trace)
    return value


# ---------------------------------------------------------------- step 1: pretraining


@dataclass
class PretrainConfig:
    batch_size: int = 38
    epochs: int = 350
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch size and learning rate must be positive, epochs non-negative")


def predict_proba(mapper: Model, classifier: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [classifier(mapper(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, classifier.spec.output_shape[0]))


def accuracy(mapper: Model, classifier: Model, ds: DomainDataset) -> float:
    pred = predict_proba(mapper, classifier, ds.features).argmax(axis=1)
    return float(np.mean(pred == ds.evaluation_labels()))


def pretrain(spec_m: ModelSpec, spec_c: ModelSpec, train: DomainDataset, validation: DomainDataset | None = None,
             config: PretrainConfig | None = None) -> tuple[Model, Model, Trace]:
    """Jointly fit source mapper and label classifier on labeled source data."""
    config = config or PretrainConfig()
    if train.labels is None:
        raise ContractError("pretraining needs labeled source data")
    m = build_model(spec_m, sub_seed(config.seed, "mapper"))
    c = build_model(spec_c, sub_seed(config.seed, "classifier"))
    m.train()
    c.train()
    params = {**{f"m.{k}": t for k, t in m.params.items()}, **{f"c.{k}": t for k, t in c.params.items()}}
    state = AdamState()
    trace = Trace()
    it = 0
    for epoch in range(config.epochs):
        losses = []
        for idx in compose_pretrain_batches(len(train), config.batch_size, sub_seed(config.seed, "pretrain", epoch)):
            with ComputationRecord(params):
                loss = loss_source(c(m(train.features[idx])), train.one_hot(idx))
            losses.append(_check_finite(loss, "L_S", trace))
            adam_step(params, ad.backward(loss), state, config.lr)
            it += 1
        trace.add(epoch, it, "L_S", np.mean(losses))
        if validation is not None and len(validation):
            m.eval(), c.eval()
            trace.add(epoch, it, "val_acc", accuracy(m, c, validation))
            m.train(), c.train()
    m.eval()
    c.eval()
    return m, c, trace


# ---------------------------------------------------------------- step 2: adaptation


@dataclass
class AdaptConfig:
    n_source: int = 10
    n_target: int = 6
    epochs: int = 300
    lr: float = 1e-4
    d_every: int = 10
    d_accumulate: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d_every < 1 or self.n_source < 1 or self.n_target < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("invalid adaptation configuration")


@dataclass
class AdaptationOutcome:
    target_mapper: Model
    source_mapper: Model
    classifier: Model
    discriminator: Model
    trace: Trace
    iterations: int = 0
    d_updates: int = 0


def adapt(m_s: Model, c: Model, spec_d: ModelSpec, source: DomainDataset, targets: Sequence[DomainDataset],
          config: AdaptConfig | None = None,
          on_discriminator_update: Callable[[int], None] | None = None) -> AdaptationOutcome:
    """Adversarially adapt a copy of ``m_s`` to the unlabeled ``targets``.

    ``targets`` holds one dataset per target device; the batch's target slots
    are shared evenly between them and each is oversampled to an equal share
    of the source size. ``m_s`` and ``c`` are never modified.
    """
    config = config or AdaptConfig()
    if tuple(spec_d.input_shape) != tuple(m_s.spec.output_shape):
        raise ContractError(f"discriminator expects {spec_d.input_shape}, mapper produces {m_s.spec.output_shape}")
    if source.labels is None:
        raise ContractError("adaptation needs labeled source data")
    if not targets:
        raise ContractError("at least one target set is required")
    m_s.eval()
    c.eval()
    m_t = m_s.clone().train()
    d = build_model(spec_d, sub_seed(config.seed, "discriminator")).train()
    share = max(len(source) // len(targets), 1)
    pools = [oversample_target(t, share, sub_seed(config.seed, "oversample", k)) for k, t in enumerate(targets)]
    mt_state, d_state = AdamState(), AdamState()
    trace = Trace()
    it = d_updates = 0
    pending: dict[str, np.ndarray] | None = None
    for epoch in range(config.epochs):
        batches = compose_adapt_batches(len(source), [len(p) for p in pools], sub_seed(config.seed, "adapt", epoch),
                                        config.n_source, config.n_target)
        mt_losses, d_losses = [], []
        for b in batches:
            it += 1
            xs = source.features[b.source]
            xt = np.concatenate([p.features[i] for p, i in zip(pools, b.targets)])
            ys = source.one_hot(b.source)
            with ComputationRecord(m_t.params):
                feats = m_t(np.concatenate([xs, xt]))
                fs = ad.take_rows(feats, 0, len(xs))
                ft = ad.take_rows(feats, len(xs), len(xs) + len(xt))
                l_mt = loss_mapper(d(ft), c(fs), ys)
            mt_losses.append(_check_finite(l_mt, "L_MT", trace))
            mt_grads = ad.backward(l_mt)

            d_due = it % config.d_every == 0
            if d_due or config.d_accumulate:
                with ComputationRecord(d.params):
                    l_d = loss_discriminator(d(m_s(xs)), d(Tensor(ft.data)))
                d_losses.append(_check_finite(l_d, "L_D", trace))
                d_grads = ad.backward(l_d)
                if config.d_accumulate:
                    pending = d_grads if pending is None else {k: pending[k] + d_grads[k] for k in d_grads}
                if d_due:
                    if config.d_accumulate:
                        d_grads = {k: g / config.d_every for k, g in pending.items()}
                        pending = None
                    adam_step(d.params, d_grads, d_state, config.lr)
                    d_updates += 1
                    if on_discriminator_update is not None:
                        on_discriminator_update(it)
            adam_step(m_t.params, mt_grads, mt_state, config.lr)
        trace.add(epoch, it, "L_MT", np.mean(mt_losses) if mt_losses else np.nan)
        if d_losses:
            trace.add(epoch, it, "L_D", np.mean(d_losses))
        log.debug("adapt epoch %d: L_MT=%.4f", epoch, trace.rows[-1][3])
    m_t.eval()
    d.eval()
    return AdaptationOutcome(m_t, m_s, c, d, trace, it, d_updates)


def discriminator_accuracy(outcome: AdaptationOutcome, source_x: np.ndarray, target_x: np.ndarray) -> float:
    """Fraction of held-out features D assigns to the right domain (threshold 0.5)."""
    ds = outcome.discriminator(outcome.source_mapper(source_x)).data.reshape(-1)
    dt = outcome.discriminator(outcome.target_mapper(target_x)).data.reshape(-1)
    return float((np.sum(ds >= 0.5) + np.sum(dt < 0.5)) / (len(ds) + len(dt)))
