"""Losses, caption-balanced batching and the adversarial training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .annotate import PAD, VOCAB_SIZE
from .dataio import PredictionExample
from .diffcore import Tensor, TrainingDivergenceError
from .model import Batch, ConfigError, TrajectoryModel, discriminator_params, generator_params, make_batch

log = logging.getLogger(__name__)

TEACHER_FORCING_MODES = ("target", "none")
MON_AGENTS = ("target", "all")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    n_samples: int = 6
    lambda1: float = 1.0
    lambda2: float = 1.0
    rebalance_ratio: float = 0.5
    seed: int = 0
    clip_norm: float = 5.0
    adv_weight: float = 0.0
    lang_include_pad: bool = True
    mon_agents: str = "target"
    caption_teacher_forcing: str = "target"
    max_steps: int = 0
    time_budget: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr must be positive", "lr")
        for name in ("batch_size", "epochs", "n_samples"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer", name)
        for name in ("lambda1", "lambda2", "clip_norm", "adv_weight", "time_budget"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", name)
        if not 0.0 <= self.rebalance_ratio <= 1.0:
            raise ConfigError("rebalance_ratio must lie in [0, 1]", "rebalance_ratio")
        if self.mon_agents not in MON_AGENTS:
            raise ConfigError(f"mon_agents must be one of {MON_AGENTS}", "mon_agents")
        if self.caption_teacher_forcing not in TEACHER_FORCING_MODES:
            raise ConfigError(f"caption_teacher_forcing must be one of {TEACHER_FORCING_MODES}", "caption_teacher_forcing")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("max_steps and checkpoint_every must be non-negative", "max_steps")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown train config key {k!r}", k)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    mon: float
    lang: float
    generator_total: float
    discriminator: float
    lambda1: float
    lambda2: float
    adv: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses -----------------------------------------------------------------------


def loss_mon(samples, gt, valid: Optional[np.ndarray] = None) -> Tensor:
    """Minimum over samples of the mean per-step Euclidean error.

    ``samples`` is ``(..., N, T, 2)`` and ``gt`` ``(..., T, 2)``; the result
    is averaged over any leading dimensions.  ``valid`` (``(..., T)``)
    restricts the mean to observed steps.
    """
    samples = dc.as_tensor(samples)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=float)
    if samples.ndim < 3 or samples.shape[-1] != 2:
        raise ValueError(f"samples must be (..., N, T, 2), got {samples.shape}")
    if samples.shape[-2] != gt.shape[-2] or samples.shape[:-3] != gt.shape[:-2]:
        raise ValueError(f"samples {samples.shape} and ground truth {gt.shape} do not match")
    if samples.shape[-3] < 1:
        raise ValueError("need at least one sample")
    err = dc.safe_norm(samples - gt[..., None, :, :], axis=-1)  # (..., N, T)
    if valid is None:
        ade = dc.tmean(err, axis=-1)
    else:
        v = np.asarray(valid, float)[..., None, :]
        cnt = np.maximum(v.sum(-1), 1.0)
        ade = dc.tsum(err * v, axis=-1) * (1.0 / cnt)
    return dc.tmean(dc.tmin(ade, axis=-1))


def loss_lang(logits, gt_tokens, include_pad: bool = True) -> Tensor:
    """Mean token cross-entropy over caption positions (and leading dims).

    With ``include_pad=False`` the mean runs over non-``<pad>`` positions only.
    """
    logits = dc.as_tensor(logits)
    gt = np.asarray(gt_tokens)
    if gt.size and (not np.issubdtype(gt.dtype, np.integer) or gt.min() < 0 or gt.max() >= logits.shape[-1]):
        raise ValueError("caption token id out of vocabulary")
    ce = dc.cross_entropy_from_logits(logits, gt)  # (..., M)
    if include_pad:
        return dc.tmean(ce)
    w = (gt != PAD).astype(float)
    return dc.tsum(ce * w) * (1.0 / max(w.sum(), 1.0))


# -- batching ---------------------------------------------------------------------


def rebalance(
    has_caption: Sequence[bool],
    batch_size: int,
    ratio: float,
    rng: np.random.Generator,
) -> Iterator[np.ndarray]:
    """Index batches for one epoch with ``round(ratio * batch_size)``
    captioned examples each.

    Each pool is drawn as a fresh permutation and re-permuted when it runs
    out, so a minority pool repeats across the epoch.  The epoch has
    ``ceil(len(dataset) / batch_size)`` batches.  ``ratio == 0`` yields plain
    shuffled batches.
    """
    has = np.asarray(has_caption, bool)
    n = len(has)
    if n == 0:
        return
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("rebalance ratio must lie in [0, 1]", "rebalance_ratio")
    n_batches = max(1, math.ceil(n / batch_size))
    if ratio == 0.0:
        perm = rng.permutation(n)
        if n < batch_size:
            perm = np.concatenate([perm] + [rng.permutation(n) for _ in range(batch_size // n)])[:batch_size]
        for i in range(n_batches):
            yield perm[i * batch_size: (i + 1) * batch_size]
        return
    cap = np.where(has)[0]
    unc = np.where(~has)[0]
    k = int(round(ratio * batch_size))
    if k > 0 and len(cap) == 0:
        raise ConfigError("rebalance needs captioned examples when ratio > 0", "rebalance_ratio")
    if batch_size - k > 0 and len(unc) == 0:
        raise ConfigError("rebalance needs uncaptioned examples when ratio < 1", "rebalance_ratio")

    def stream(pool):
        while True:
            yield from pool[rng.permutation(len(pool))]

    cs, us = stream(cap), stream(unc)
    for _ in range(n_batches):
        idx = [next(cs) for _ in range(k)] + [next(us) for _ in range(batch_size - k)]
        yield np.asarray(idx, dtype=np.int64)


# -- training ---------------------------------------------------------------------


def future_displacements(batch: Batch) -> np.ndarray:
    """Ground-truth per-step displacements ``(B, A, T, 2)`` starting from t = 0."""
    prev = np.concatenate([batch.origin[:, :, None], batch.future[:, :, :-1]], axis=2)
    return batch.future - prev


@dataclass
class Optimizers:
    gen: dc.AdamState
    disc: dc.AdamState

    def merged(self) -> dc.AdamState:
        st = dc.AdamState(self.gen.lr, self.gen.beta1, self.gen.beta2, self.gen.eps, self.gen.step)
        st.m = {**self.gen.m, **self.disc.m}
        st.v = {**self.gen.v, **self.disc.v}
        return st

    @classmethod
    def split(cls, st: dc.AdamState) -> "Optimizers":
        g = dc.AdamState(st.lr, st.beta1, st.beta2, st.eps, st.step)
        d = dc.AdamState(st.lr, st.beta1, st.beta2, st.eps, st.step)
        for k in st.m:
            tgt = d if k.startswith("disc.") else g
            tgt.m[k], tgt.v[k] = st.m[k], st.v[k]
        return cls(g, d)


def make_optimizers(cfg: TrainConfig) -> Optimizers:
    return Optimizers(dc.AdamState(lr=cfg.lr), dc.AdamState(lr=cfg.lr))


def _zero_grads(params):
    for p in params.values():
        p.grad = None


def caption_override(batch: Batch, cfg: TrainConfig):
    """Ground-truth captions to feed the decoder for captioned target agents."""
    if cfg.caption_teacher_forcing == "none" or not batch.has_caption.any():
        return None, None
    B, a_max = batch.agent_mask.shape
    ov = np.full((B, a_max, batch.captions.shape[1]), PAD, dtype=np.int64)
    ov[:, 0] = batch.captions
    mask = np.zeros((B, a_max), bool)
    mask[:, 0] = batch.has_caption
    return ov, mask


def compute_losses(model: TrajectoryModel, batch: Batch, cfg: TrainConfig, rng: np.random.Generator,
                   training: bool = True, result=None):
    """Forward pass shared by the training step and the tests.

    Returns ``(mon, lang, rollout)`` with ``mon``/``lang`` as scalar Tensors.
    """
    if result is None:
        ov, om = caption_override(batch, cfg)
        result = model.rollout(batch, cfg.n_samples, rng, training=training, caption_override=ov, override_mask=om)
    pos = result.positions  # (B, N, A, T, 2)
    if cfg.mon_agents == "target":
        mon = loss_mon(pos[:, :, 0], batch.future[:, 0], batch.future_valid[:, 0])
    else:
        full = batch.agent_mask & batch.future_valid.all(-1)
        per = []
        for a in range(pos.shape[2]):
            rows = np.where(full[:, a])[0]
            if len(rows):
                per.append(loss_mon(pos[rows, :, a], batch.future[rows, a]) * (len(rows) / full.sum()))
        mon = per[0]
        for p in per[1:]:
            mon = mon + p
    cap_rows = np.where(batch.has_caption)[0]
    if len(cap_rows):
        h0t = result.encoder.h0[cap_rows, 0]
        zt = result.z[cap_rows, 0, 0]
        logits = model.teacher_logits(h0t, zt, batch.captions[cap_rows])
        lang = loss_lang(logits, batch.captions[cap_rows], cfg.lang_include_pad)
    else:
        lang = Tensor(0.0)
    return mon, lang, result


def train_step(
    model: TrajectoryModel,
    batch: Batch,
    opt: Optimizers,
    cfg: TrainConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> LossBreakdown:
    """One discriminator update followed by one generator update."""
    gparams = generator_params(model.params)
    dparams = discriminator_params(model.params)
    _zero_grads(model.params)
    mon, lang, res = compute_losses(model, batch, cfg, rng)

    # discriminator: real futures vs. the first sample of each example
    full = batch.agent_mask & batch.future_valid.all(-1)
    real = future_displacements(batch)[full]
    fake_all = res.displacements.data[:, 0]
    h0 = res.encoder.h0.data[full]
    valid = np.ones(real.shape[:2], bool)
    if len(real):
        lr_ = model.discriminate_logits(Tensor(real), valid, Tensor(h0))
        lf_ = model.discriminate_logits(Tensor(fake_all[full]), valid, Tensor(h0))
        dloss = (dc.tmean(dc.bce_with_logits(lr_, np.ones(len(real)))) + dc.tmean(dc.bce_with_logits(lf_, np.zeros(len(real))))) * 0.5
        dval = dloss.item()
        if not np.isfinite(dval):
            raise TrainingDivergenceError(f"step {step}: non-finite discriminator loss (examples {batch.ids})")
        dloss.backward()
        dc.clip_grad_norm(dparams.values(), cfg.clip_norm)
        dc.adam_step(dparams, opt.disc)
    else:
        dval = float("nan")

    adv_val = 0.0
    total = mon * cfg.lambda1 + lang * cfg.lambda2
    if cfg.adv_weight > 0 and len(real):
        fake = res.displacements[:, 0][full]
        adv = dc.tmean(dc.bce_with_logits(model.discriminate_logits(fake, valid, Tensor(h0)), np.ones(len(real))))
        adv_val = adv.item()
        total = total + adv * cfg.adv_weight
    mon_v, lang_v = mon.item(), lang.item()
    gen_total = cfg.lambda1 * mon_v + cfg.lambda2 * lang_v + cfg.adv_weight * adv_val
    if not np.isfinite(gen_total):
        raise TrainingDivergenceError(f"step {step}: non-finite generator loss (examples {batch.ids})")
    for p in model.params.values():
        p.grad = None
    total.backward()
    dc.clip_grad_norm(gparams.values(), cfg.clip_norm)
    try:
        dc.adam_step(gparams, opt.gen)
    except TrainingDivergenceError as e:
        raise TrainingDivergenceError(f"step {step}: {e} (examples {batch.ids})") from e
    return LossBreakdown(mon_v, lang_v, gen_total, dval, cfg.lambda1, cfg.lambda2, adv_val)


def train(
    model: TrajectoryModel,
    examples: Sequence[PredictionExample],
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    opt: Optional[Optimizers] = None,
    callback=None,
) -> List[dict]:
    """Train for ``cfg.epochs`` (bounded by ``max_steps``/``time_budget``).

    Writes ``train_log.ndjson`` and checkpoints to ``out_dir`` when given and
    returns the list of logged records.  The log is appended to only when
    resuming (``opt`` given).  A ``time_budget`` makes the step count depend
    on machine speed; use ``max_steps`` for reproducible runs.
    """
    resuming = opt is not None
    rng = np.random.default_rng(cfg.seed)
    opt = opt or make_optimizers(cfg)
    has = [ex.caption is not None for ex in examples]
    ratio = cfg.rebalance_ratio
    if ratio > 0 and not any(has):
        raise ConfigError("rebalance needs captioned examples when ratio > 0", "rebalance_ratio")
    if all(has) or not any(has):
        ratio = 1.0 if all(has) and ratio > 0 else 0.0
    log_f = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "train_log.ndjson"), "a" if resuming else "w", encoding="utf-8")
    records = []
    step = opt.gen.step if resuming else 0
    start = time.monotonic()
    try:
        for epoch in range(cfg.epochs):
            for idx in rebalance(has, cfg.batch_size, ratio, rng):
                batch = make_batch([examples[i] for i in idx], model.cfg)
                lb = train_step(model, batch, opt, cfg, rng, step)
                step += 1
                rec = {"step": step, "mon": lb.mon, "lang": lb.lang, "gen_total": lb.generator_total,
                       "disc": lb.discriminator, "lr": cfg.lr, "seed": cfg.seed}
                records.append(rec)
                if log_f:
                    log_f.write(json.dumps(rec) + "\n")
                if callback:
                    callback(step, lb)
                if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    model.save(os.path.join(out_dir, f"step{step:06d}.ckpt"), opt.merged(), {"step": step})
                if (cfg.max_steps and step >= cfg.max_steps) or (cfg.time_budget and time.monotonic() - start > cfg.time_budget):
                    raise StopIteration
            log.info("epoch %d done, step %d, mon %.3f", epoch, step, records[-1]["mon"])
    except StopIteration:
        pass
    finally:
        if log_f:
            log_f.close()
    if out_dir:
        model.save(os.path.join(out_dir, "model.ckpt"), opt.merged(), {"step": step, "train_config": cfg.to_dict()})
    return records
