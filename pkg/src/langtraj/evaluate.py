"""Evaluation metrics and reports.

Displacement errors, caption recall, KDE entropy of sampled futures,
information gain of captions, token histograms and attention traces.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .annotate import (
    AGENT_TOKENS,
    CONTENT_TOKENS,
    EOS,
    PAD,
    TOKEN_ID,
    VOCAB,
    VOCAB_SIZE,
    Caption,
    content_tokens,
    empty_caption,
    example_rng,
    multiset_recall,
)
from .dataio import PredictionExample
from .model import DecoderTrace, TrajectoryModel, make_batch

BANDWIDTH_FLOOR = 1e-3
# entropy of N coincident samples: every kernel sits at the floor bandwidth
ENTROPY_FLOOR = float(np.log(2.0 * np.pi * BANDWIDTH_FLOOR ** 2))

FIGURE_CATEGORIES = (
    "MoveFast", "MoveSlow", "SpeedUp", "SlowDown", "TurnLeft", "TurnRight",
    "LaneChangeLeft", "LaneChangeRight", "LaneKeep", "Agent#k", "Follow", "Yield",
)
TRACE_STEPS = (0, 15, 29)


# -- displacement ----------------------------------------------------------------


def horizon_steps(horizon: float, dt: float) -> int:
    return int(round(horizon / dt))


def displacement_metrics(samples, gt, horizons: Sequence[float] = (1.0, 3.0), dt: float = 0.1) -> Dict[float, Dict[str, float]]:
    """minADE / minFDE of ``samples`` (``(N, T, 2)``) against ``gt`` (``(T, 2)``).

    For a horizon of ``h`` seconds, ADE averages the first ``h / dt`` steps
    and FDE is the error at that step.  The two minima over samples are
    taken independently.
    """
    samples = np.asarray(samples, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise ValueError("samples must be (N >= 1, T, 2)")
    if samples.shape[1:] != gt.shape:
        raise ValueError(f"samples {samples.shape} do not match ground truth {gt.shape}")
    err = np.linalg.norm(samples - gt[None], axis=-1)  # (N, T)
    out = {}
    for h in horizons:
        k = horizon_steps(h, dt)
        if k < 1 or k > gt.shape[0]:
            raise ValueError(f"horizon {h} s ({k} steps) outside the {gt.shape[0]}-step trajectory")
        out[h] = {"minADE": float(err[:, :k].mean(axis=1).min()), "minFDE": float(err[:, k - 1].min())}
    return out


# -- captions --------------------------------------------------------------------


def _ids(c) -> List[int]:
    if isinstance(c, Caption):
        return list(c.tokens)
    return [TOKEN_ID[t] if isinstance(t, str) else int(t) for t in c]


def token_recall(predicted, gt) -> Optional[float]:
    """Share of the ground-truth content tokens (as a multiset) found in the
    prediction; ``None`` when the ground truth has no content to recall."""
    g = content_tokens(_ids(gt))
    if not g:
        return None
    return multiset_recall(g, content_tokens(_ids(predicted)))


def teacher_forced_tokens(logits: np.ndarray, gt: Sequence[int]) -> List[int]:
    """Greedy token at every position of ``gt``'s body under teacher forcing."""
    gt = list(gt)
    e = gt.index(EOS) if EOS in gt else len(gt)
    return [int(t) for t in np.argmax(logits[1:e], axis=-1)]


# -- entropy ---------------------------------------------------------------------


def kde_entropy(samples, floor: float = BANDWIDTH_FLOOR) -> float:
    """Leave-one-out Gaussian-KDE entropy estimate, averaged over steps.

    ``samples`` is ``(N, T, 2)`` (or ``(N, 2)`` for one step).  Each step
    uses a diagonal bandwidth from Scott's rule, ``std * N^(-1/6)``, floored
    at ``floor`` metres; the estimate is the mean of ``-log p_{-i}(x_i)``.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        x = x[:, None, :]
    N = x.shape[0]
    if N < 2:
        raise ValueError("kde_entropy needs at least 2 samples")
    x = np.moveaxis(x, 0, 1)  # (T, N, 2)
    h = np.maximum(x.std(axis=1, ddof=1) * N ** (-1.0 / 6.0), floor)  # (T, 2)
    diff = (x[:, :, None, :] - x[:, None, :, :]) / h[:, None, None, :]
    logk = -0.5 * np.sum(diff ** 2, axis=-1) - np.log(2.0 * np.pi) - np.log(h).sum(-1)[:, None, None]
    idx = np.arange(N)
    logk[:, idx, idx] = -np.inf
    logp = logsumexp(logk, axis=2) - np.log(N - 1)
    return float(-logp.mean())


# -- sampling helpers --------------------------------------------------------------


def example_noise(model: TrajectoryModel, examples: Sequence[PredictionExample], n: int, seed: int,
                  n_agents: Optional[int] = None):
    """Per-example noise ``z`` and Gumbel draws, independent of batching.

    Draws are made for ``a_max`` agent slots and cut to ``n_agents``.
    """
    cfg = model.cfg
    zs, gs = [], []
    for ex in examples:
        r = example_rng(ex.example_id, seed)
        zs.append(r.normal(size=(n, cfg.a_max, cfg.noise_dim)))
        gs.append(dc.gumbel_noise((n, cfg.a_max, cfg.max_len, VOCAB_SIZE), r))
    A = n_agents or cfg.a_max
    return np.stack(zs)[:, :, :A], np.stack(gs)[:, :, :A]


def sample_futures(model: TrajectoryModel, examples: Sequence[PredictionExample], n: int, seed: int = 0,
                   caption_override=None, override_mask=None):
    batch = make_batch(examples, model.cfg)
    z, g = example_noise(model, examples, n, seed, batch.agent_mask.shape[1])
    with dc.no_grad():
        res = model.rollout(batch, n, z=z, gumbel_noise=g, caption_override=caption_override, override_mask=override_mask)
    return batch, res


def best_caption_index(res, b: int, n: int) -> int:
    """Sample index of the target caption with the highest log-likelihood."""
    ll = res.captions.log_likelihood.reshape(-1, n, res.captions.tokens.shape[1])[b, :, 0]
    return int(np.argmax(ll))


def information_gain(model: TrajectoryModel, example: PredictionExample, n: int = 6, seed: int = 0) -> float:
    """``H(futures | empty caption) - H(futures | generated caption)`` in nats.

    The noise ``z_1..z_n`` (and every other agent's caption draw) is shared
    across conditions.  Each generated target caption is held fixed while
    the ``n`` noise vectors are decoded, and the conditional entropies are
    averaged over the ``n`` generated captions.  Positive means captions
    narrow the predicted distribution.
    """
    return information_gain_details(model, example, n, seed)["gain"]


def information_gain_details(model: TrajectoryModel, example: PredictionExample, n: int = 6, seed: int = 0) -> dict:
    cfg = model.cfg
    batch, res = sample_futures(model, [example], n, seed)
    if res.tokens is None:  # baselines ignore captions
        h = kde_entropy(res.positions.data[0, :, 0])
        return {"gain": 0.0, "h_pad": h, "h_caption": h, "captions": []}
    caps = [tuple(res.tokens[0, k, 0]) for k in range(n)]
    A = batch.agent_mask.shape[1]
    z, g = example_noise(model, [example], n, seed, A)

    def entropy_with(tokens):
        ov = np.full((1, A, cfg.max_len), PAD, dtype=np.int64)
        ov[0, 0] = tokens
        om = np.zeros((1, A), bool)
        om[0, 0] = True
        with dc.no_grad():
            r = model.rollout(batch, n, z=z, gumbel_noise=g, caption_override=ov, override_mask=om)
        return kde_entropy(r.positions.data[0, :, 0])

    cache = {}
    for c in caps:
        if c not in cache:
            cache[c] = entropy_with(list(c))
    h_cap = float(np.mean([cache[c] for c in caps]))
    h_pad = entropy_with(empty_caption(cfg.max_len).tokens)
    return {"gain": h_pad - h_cap, "h_pad": h_pad, "h_caption": h_cap, "captions": [list(c) for c in caps]}


# -- histograms --------------------------------------------------------------------


def _category(tok: int) -> Optional[str]:
    if tok in AGENT_TOKENS:
        return "Agent#k"
    name = VOCAB[tok]
    return name if name in FIGURE_CATEGORIES else None


def token_distribution(gt_captions: Sequence, pred_captions: Sequence) -> dict:
    """Normalised frequencies over the twelve display categories.

    ``Agent#1..4`` share one bin; ``Stop`` and the specials are not shown.
    A series without any countable token is all zeros and flagged empty.
    """
    out = {"categories": list(FIGURE_CATEGORIES)}
    for key, caps in (("gt", gt_captions), ("predicted", pred_captions)):
        counts = np.zeros(len(FIGURE_CATEGORIES))
        for c in caps:
            if c is None:
                continue
            for t in _ids(c):
                cat = _category(t)
                if cat is not None:
                    counts[FIGURE_CATEGORIES.index(cat)] += 1
        total = counts.sum()
        out[key] = (counts / total if total else counts).tolist()
        out[f"{key}_empty"] = bool(total == 0)
    return out


# -- attention traces ----------------------------------------------------------------


def attention_trace_report(traces: Sequence[dict]) -> List[dict]:
    """Summarise token-attention traces.

    Each input is ``{"example_id", "tokens": [M ids], "token_weights": T x M or None}``.
    Per example the report lists the top-attended token at every step, the
    steps where that argmax changes, the same two items restricted to
    content-token positions, and the weight of each token at t = 0, 15, 29.
    """
    report = []
    for tr in traces:
        w = tr.get("token_weights")
        rec = {"example_id": tr.get("example_id")}
        if w is None:
            rec.update({"empty": True, "reason": "token attention disabled"})
            report.append(rec)
            continue
        w = np.asarray(w, dtype=float)
        tokens = list(tr["tokens"])
        names = [VOCAB[t] for t in tokens]
        top = np.argmax(w, axis=1)
        content = np.array([t < len(CONTENT_TOKENS) for t in tokens])
        rec.update({
            "empty": False,
            "tokens": names,
            "top_position": top.tolist(),
            "top_token": [names[i] for i in top],
            "transitions": [int(t) for t in np.nonzero(np.diff(top))[0] + 1],
        })
        if content.any():
            wc = np.where(content[None, :], w, -np.inf)
            ctop = np.argmax(wc, axis=1)
            rec["content_top_position"] = ctop.tolist()
            rec["content_top_token"] = [names[i] for i in ctop]
            rec["content_transitions"] = [int(t) for t in np.nonzero(np.diff(ctop))[0] + 1]
        else:
            rec["content_top_position"] = []
            rec["content_top_token"] = []
            rec["content_transitions"] = []
        rec["weights_at"] = {
            int(t): {f"{m}:{names[m]}": float(w[t, m]) for m in range(len(tokens)) if tokens[m] != PAD}
            for t in TRACE_STEPS if t < len(w)
        }
        report.append(rec)
    return report


def traces_for(examples: Sequence[PredictionExample], res, trace: DecoderTrace, n: int, sample: int = 0,
               samples: Optional[Sequence[int]] = None) -> List[dict]:
    """Target-agent trace records of one sample per example.

    ``samples`` picks a sample index per example and overrides ``sample``.
    """
    out = []
    for b, ex in enumerate(examples):
        row = b * n + (samples[b] if samples is not None else sample)
        out.append({
            "example_id": ex.example_id,
            "tokens": trace.tokens[row, 0].tolist() if trace.tokens is not None else [],
            "token_weights": None if trace.token_weights is None else trace.token_weights[row, 0],
        })
    return out


# -- reports -------------------------------------------------------------------------


@dataclass
class EvalReport:
    records: List[dict]
    aggregate: dict
    histogram: dict
    attention: List[dict] = field(default_factory=list)

    def write(self, out_dir: str) -> List[str]:
        """Write ``report.ndjson``, ``summary.json`` and plot-ready CSVs."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        p = os.path.join(out_dir, "report.ndjson")
        with open(p, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        paths.append(p)
        p = os.path.join(out_dir, "summary.json")
        with open(p, "w", encoding="utf-8") as f:
            json.dump(self.aggregate, f, indent=2, sort_keys=True)
            f.write("\n")
        paths.append(p)
        paths.append(write_histogram_csv(self.histogram, os.path.join(out_dir, "token_histogram.csv")))
        if self.attention:
            paths.append(write_attention_csv(self.attention, os.path.join(out_dir, "attention.csv")))
        return paths


def write_histogram_csv(hist: dict, path: str) -> str:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["category", "gt", "predicted"])
        for i, c in enumerate(hist["categories"]):
            w.writerow([c, repr(hist["gt"][i]), repr(hist["predicted"][i])])
    return path


def write_attention_csv(report: Sequence[dict], path: str) -> str:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["example_id", "step", "token", "weight"])
        for rec in report:
            for t, row in rec.get("weights_at", {}).items():
                for tok, val in row.items():
                    w.writerow([rec["example_id"], t, tok, repr(val)])
    return path


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(
    model: TrajectoryModel,
    examples: Sequence[PredictionExample],
    n_samples: int = 6,
    seed: int = 0,
    horizons: Sequence[float] = (1.0, 3.0),
    batch_size: int = 32,
    with_info_gain: bool = False,
) -> EvalReport:
    """Evaluate the target agent of every example.

    Records are produced in input order; every random draw is keyed by the
    example id, so results do not depend on batching.
    """
    records, gt_caps, pred_caps, attention = [], [], [], []
    for s in range(0, len(examples), batch_size):
        chunk = list(examples[s: s + batch_size])
        batch, res = sample_futures(model, chunk, n_samples, seed)
        pos = res.positions.data  # (B, N, A, T, 2)
        if res.tokens is not None:
            attention.extend(attention_trace_report(traces_for(chunk, res, res.trace, n_samples)))
        for b, ex in enumerate(chunk):
            dm = displacement_metrics(pos[b, :, 0], batch.future[b, 0], horizons, ex.dt)
            rec = {"example_id": ex.example_id, "entropy": kde_entropy(pos[b, :, 0])}
            for h, v in dm.items():
                rec[f"minADE@{h:g}s"] = v["minADE"]
                rec[f"minFDE@{h:g}s"] = v["minFDE"]
            if res.tokens is not None:
                k = best_caption_index(res, b, n_samples)
                pred = res.captions.tokens.reshape(len(chunk), n_samples, -1, model.cfg.max_len)[b, k, 0].tolist()
                rec["predicted_caption"] = [VOCAB[t] for t in pred]
                pred_caps.append(pred)
            else:
                pred = None
            if ex.caption is not None:
                gt_caps.append(ex.caption)
                rec["gt_caption"] = [VOCAB[t] for t in ex.caption]
                rec["recall"] = token_recall(pred, ex.caption) if pred is not None else None
            else:
                rec["recall"] = None
            if with_info_gain:
                rec["info_gain"] = information_gain(model, ex, n_samples, seed)
            records.append(rec)
    agg = _aggregate(records, n_samples, seed, horizons, with_info_gain)
    return EvalReport(records, agg, token_distribution(gt_caps, pred_caps), attention)


def _aggregate(records, n_samples, seed, horizons, with_info_gain) -> dict:
    keys = ([k for k in records[0] if k.startswith("min")] + ["entropy", "recall"]) if records else []
    if with_info_gain:
        keys.append("info_gain")
    agg = {f"mean_{k}": _mean([r.get(k) for r in records]) for k in keys}
    agg["n_examples"] = len(records)
    agg["n_recall"] = sum(r.get("recall") is not None for r in records)
    agg["n_samples"] = n_samples
    agg["seed"] = seed
    agg["horizons_s"] = list(horizons)
    return agg


def merge_reports(parts: Sequence[EvalReport], n_samples: int, seed: int, horizons: Sequence[float],
                  with_info_gain: bool = False) -> EvalReport:
    """Concatenate reports of consecutive example chunks, in order."""
    records = [r for p in parts for r in p.records]
    attention = [a for p in parts for a in p.attention]
    gt = [[TOKEN_ID[t] for t in r["gt_caption"]] for r in records if "gt_caption" in r]
    pred = [[TOKEN_ID[t] for t in r["predicted_caption"]] for r in records if "predicted_caption" in r]
    agg = _aggregate(records, n_samples, seed, horizons, with_info_gain)
    return EvalReport(records, agg, token_distribution(gt, pred), attention)


def net_lateral_displacement(origin, last_disp, positions) -> float:
    """Signed lateral offset (m, left positive) of the final position.

    The frame is the agent's heading at the last observed step, taken from
    its last displacement ``last_disp``; ``origin`` is its last observed
    position and ``positions`` its predicted (T, 2) future.
    """
    d = np.asarray(last_disp, dtype=float)
    nrm = np.linalg.norm(d)
    heading = d / nrm if nrm > 1e-9 else np.array([1.0, 0.0])
    off = np.asarray(positions, dtype=float)[-1] - np.asarray(origin, dtype=float)
    return float(heading[0] * off[1] - heading[1] * off[0])


def teacher_forced_recall(model: TrajectoryModel, examples: Sequence[PredictionExample], seed: int = 0) -> float:
    """Mean recall of greedy teacher-forced caption tokens over captioned examples."""
    caps = [ex for ex in examples if ex.caption is not None and content_tokens(ex.caption)]
    if not caps:
        raise ValueError("no captioned examples")
    batch = make_batch(caps, model.cfg)
    z, _ = example_noise(model, caps, 1, seed, batch.agent_mask.shape[1])
    with dc.no_grad():
        enc = model.encode(batch)
        logits = model.teacher_logits(enc.h0[:, 0], z[:, 0, 0], batch.captions).data
    rec = []
    for i, ex in enumerate(caps):
        pred = teacher_forced_tokens(logits[i], ex.caption)
        rec.append(multiset_recall(content_tokens(ex.caption), content_tokens(pred)))
    return float(np.mean(rec))
