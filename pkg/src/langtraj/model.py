"""Language-conditioned multi-agent trajectory model.

The network is split the way data flows through it:

* a map encoder (per-segment MLP, max over segments, one self-attention
  round over centerlines) and a recurrent agent encoder followed by one
  message-passing round produce a hidden state ``h0`` per agent;
* a small recurrent caption generator rolls out ``M`` tokens from
  ``(h0, z)``;
* the trajectory decoder re-reads the caption at every step through agent
  attention (for ``Agent#k`` tokens) and token attention, and emits one
  displacement per step.

Arrays are batched as ``(rows, agents, ...)`` where a row is one
(example, sample) pair.  Shapes in comments use B = examples, N = samples,
R = B * N, A = agents, M = caption length, T = future steps, H = hidden.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .annotate import AGENT_TOKENS, BOS, EOS, PAD, REFERRING_TOKENS, VOCAB_SIZE
from .dataio import PredictionExample
from .diffcore import Tensor

DECODER_KINDS = ("ours", "vanilla", "multihead")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


@dataclass
class ModelConfig:
    hidden: int = 32
    token_dim: int = 4
    gen_hidden: int = 4
    att_hidden: int = 4
    map_dim: int = 16
    dropout: float = 0.2
    noise_dim: int = 8
    a_max: int = 5
    max_len: int = 8
    n_samples: int = 6
    past_len: int = 20
    future_len: int = 30
    no_attention: bool = False
    no_agent_attention: bool = False
    decoder: str = "ours"
    heads: int = 6
    head_dim: int = 10
    max_lanes: int = 8
    max_segments: int = 12
    map_radius: float = 40.0
    pos_scale: float = 0.1
    gumbel_tau: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("hidden", "token_dim", "gen_hidden", "att_hidden", "map_dim", "noise_dim", "a_max",
                     "n_samples", "past_len", "future_len", "heads", "head_dim", "max_lanes", "max_segments"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}", name)
        if self.max_len < 3:
            raise ConfigError("max_len must be >= 3", "max_len")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)", "dropout")
        if not self.gumbel_tau > 0:
            raise ConfigError("gumbel_tau must be positive", "gumbel_tau")
        if not self.map_radius > 0 or not self.pos_scale > 0:
            raise ConfigError("map_radius and pos_scale must be positive", "map_radius")
        if self.decoder not in DECODER_KINDS:
            raise ConfigError(f"decoder must be one of {DECODER_KINDS}", "decoder")
        if self.decoder != "ours" and (self.no_attention or self.no_agent_attention):
            raise ConfigError("ablation flags only apply to decoder 'ours'", "no_attention")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown model config key {k!r}", k)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- batching -------------------------------------------------------------------


def _lane_window(poly: np.ndarray, center: np.ndarray, radius: float, max_segments: int) -> Optional[np.ndarray]:
    """The contiguous stretch of ``poly`` within ``radius`` of ``center``,
    resampled to at most ``max_segments`` equal-length segments."""
    seg = np.diff(poly, axis=0)
    length = np.hypot(seg[:, 0], seg[:, 1])
    arc = np.concatenate([[0.0], np.cumsum(length)])
    n_dense = max(2, int(np.ceil(arc[-1] / 1.0)) + 1)
    s = np.linspace(0.0, arc[-1], n_dense)
    dense = np.column_stack([np.interp(s, arc, poly[:, 0]), np.interp(s, arc, poly[:, 1])])
    d = np.hypot(*(dense - center).T)
    inside = d <= radius
    if not inside.any():
        return None
    k = int(np.argmin(d))
    lo = k
    while lo > 0 and inside[lo - 1]:
        lo -= 1
    hi = k
    while hi < len(dense) - 1 and inside[hi + 1]:
        hi += 1
    if hi == lo:
        lo, hi = max(0, lo - 1), min(len(dense) - 1, hi + 1)
    sub_s = np.linspace(s[lo], s[hi], min(max_segments, hi - lo) + 1)
    return np.column_stack([np.interp(sub_s, arc, poly[:, 0]), np.interp(sub_s, arc, poly[:, 1])])


@dataclass
class Batch:
    """Dense, padded arrays for a list of examples (all numpy, no gradients)."""

    ids: List[str]
    origin: np.ndarray  # (B, A, 2) position at t = 0
    past_rel: np.ndarray  # (B, A, P, 2)
    past_delta: np.ndarray  # (B, A, P, 2)
    past_valid: np.ndarray  # (B, A, P)
    agent_mask: np.ndarray  # (B, A)
    last_disp: np.ndarray  # (B, A, 2)
    future: np.ndarray  # (B, A, T, 2) absolute
    future_valid: np.ndarray  # (B, A, T)
    lanes: np.ndarray  # (B, L, S + 1, 2) absolute lane vertices
    seg_mask: np.ndarray  # (B, L, S)
    lane_mask: np.ndarray  # (B, L)
    captions: np.ndarray  # (B, M), rows of PAD where absent
    has_caption: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(examples: Sequence[PredictionExample], cfg: ModelConfig) -> Batch:
    B, P, T, M = len(examples), cfg.past_len, cfg.future_len, cfg.max_len
    # agent slots: the largest scene in the batch, capped at a_max
    A = max(1, min(cfg.a_max, max((ex.num_agents for ex in examples), default=1)))
    L, S = cfg.max_lanes, cfg.max_segments
    origin = np.zeros((B, A, 2))
    past_rel = np.zeros((B, A, P, 2))
    past_delta = np.zeros((B, A, P, 2))
    past_valid = np.zeros((B, A, P), bool)
    agent_mask = np.zeros((B, A), bool)
    last_disp = np.zeros((B, A, 2))
    future = np.zeros((B, A, T, 2))
    future_valid = np.zeros((B, A, T), bool)
    lanes = np.zeros((B, L, S + 1, 2))
    seg_mask = np.zeros((B, L, S), bool)
    lane_mask = np.zeros((B, L), bool)
    captions = np.full((B, M), PAD, dtype=np.int64)
    has_caption = np.zeros(B, bool)
    for b, ex in enumerate(examples):
        if ex.past_len != P or ex.positions.shape[1] != P + T:
            raise ValueError(f"{ex.example_id}: window does not match the model's past/future lengths")
        n = min(ex.num_agents, A)
        pos = ex.positions[:n]
        val = ex.valid[:n]
        o = pos[:, P - 1]
        origin[b, :n] = o
        agent_mask[b, :n] = val[:, P - 1]
        pv = val[:, :P]
        past_valid[b, :n] = pv
        past_rel[b, :n] = np.where(pv[..., None], pos[:, :P] - o[:, None], 0.0)
        dv = pv[:, 1:] & pv[:, :-1]
        past_delta[b, :n, 1:] = np.where(dv[..., None], np.diff(pos[:, :P], axis=1), 0.0)
        last_disp[b, :n] = past_delta[b, :n, -1]
        future[b, :n] = pos[:, P:]
        future_valid[b, :n] = val[:, P:]
        # map: nearest lanes to the target
        tgt = o[0]
        windows = []
        for lane in ex.map.centerlines:
            w = _lane_window(lane.polyline, tgt, cfg.map_radius, S)
            if w is not None:
                windows.append((float(np.min(np.hypot(*(w - tgt).T))), lane.id, w))
        windows.sort(key=lambda x: (x[0], x[1]))
        for li, (_, _, w) in enumerate(windows[:L]):
            k = len(w) - 1
            lanes[b, li, : k + 1] = w
            seg_mask[b, li, :k] = True
            lane_mask[b, li] = True
        if ex.caption is not None:
            cap = list(ex.caption)
            if len(cap) != M:
                raise ValueError(f"{ex.example_id}: caption length {len(cap)} != {M}")
            captions[b] = cap
            has_caption[b] = True
    return Batch(
        ids=[ex.example_id for ex in examples],
        origin=origin,
        past_rel=past_rel,
        past_delta=past_delta,
        past_valid=past_valid,
        agent_mask=agent_mask,
        last_disp=last_disp,
        future=future,
        future_valid=future_valid,
        lanes=lanes,
        seg_mask=seg_mask,
        lane_mask=lane_mask,
        captions=captions,
        has_caption=has_caption,
    )


def _segment_features(batch: Batch, cfg: ModelConfig) -> np.ndarray:
    """(B, A, L, S, 6): segment endpoints relative to each agent's t = 0
    position (scaled) and the unit direction of the segment."""
    p0 = batch.lanes[:, :, :-1]
    p1 = batch.lanes[:, :, 1:]
    d = p1 - p0
    n = np.hypot(d[..., 0], d[..., 1])[..., None]
    unit = np.where(n > 0, d / np.where(n > 0, n, 1.0), 0.0)
    o = batch.origin[:, :, None, None, :]
    rel0 = (p0[:, None] - o) * cfg.pos_scale
    rel1 = (p1[:, None] - o) * cfg.pos_scale
    A = batch.origin.shape[1]
    feats = np.concatenate([rel0, rel1, np.broadcast_to(unit[:, None], rel0.shape)], axis=-1)
    return feats * batch.seg_mask[:, None, :, :, None].repeat(A, axis=1)


# -- outputs --------------------------------------------------------------------


@dataclass
class EncoderOutput:
    h0: Tensor  # (B, A, H)
    map_emb: Tensor  # (B, A, D)
    mask: np.ndarray  # (B, A)


@dataclass
class CaptionRollout:
    logits: Tensor  # (..., M, V)
    tokens: np.ndarray  # (..., M)
    onehot: Tensor  # (..., M, V)
    z: np.ndarray
    log_likelihood: np.ndarray  # (...)


@dataclass
class DecoderTrace:
    token_weights: Optional[np.ndarray]  # (R, A, T, M) or None when attention is ablated
    agent_weights: Optional[np.ndarray]  # (R, A, M, A) rows meaningful at Agent#k positions
    agent_positions: Optional[np.ndarray]  # (R, A, M) bool
    hidden: np.ndarray  # (R, A, T, H)
    tokens: Optional[np.ndarray]  # (R, A, M)


@dataclass
class RolloutResult:
    positions: Tensor  # (B, N, A, T, 2) absolute
    displacements: Tensor  # (B, N, A, T, 2)
    captions: Optional[CaptionRollout]  # tokens (B*N, A, M)
    tokens: Optional[np.ndarray]  # caption actually fed to the decoder, (B, N, A, M)
    trace: DecoderTrace
    z: np.ndarray  # (B, N, A, Dz)
    encoder: EncoderOutput


# -- parameters -----------------------------------------------------------------


def _glorot(rng, shape):
    lim = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-lim, lim, size=shape)


def _lstm_params(prefix, rng, n_in, n_h):
    b = np.zeros(4 * n_h)
    b[n_h:2 * n_h] = 1.0  # forget-gate bias
    return {
        f"{prefix}.Wx": _glorot(rng, (n_in, 4 * n_h)),
        f"{prefix}.Wh": _glorot(rng, (n_h, 4 * n_h)),
        f"{prefix}.b": b,
    }


def _linear_params(prefix, rng, n_in, n_out, bias=True, zero=False):
    W = np.zeros((n_in, n_out)) if zero else _glorot(rng, (n_in, n_out))
    out = {f"{prefix}.W": W}
    if bias:
        out[f"{prefix}.b"] = np.zeros(n_out)
    return out


def init_params(cfg: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Deterministic parameter initialisation for every decoder kind."""
    rng = np.random.default_rng(seed)
    H, E, G, D, Z, V = cfg.hidden, cfg.token_dim, cfg.gen_hidden, cfg.map_dim, cfg.noise_dim, VOCAB_SIZE
    p: Dict[str, np.ndarray] = {}
    # map encoder
    p.update(_linear_params("map.seg1", rng, 6, D))
    p.update(_linear_params("map.seg2", rng, D, D))
    p["map.att.W"] = _glorot(rng, (D, D))
    p["map.null"] = np.zeros(D)
    # agent encoder: relative position, step displacement, offset to target, map
    p.update(_lstm_params("enc.lstm", rng, 6 + D, H))
    p.update(_linear_params("social.self", rng, H, H))
    p.update(_linear_params("social.msg", rng, H, H, bias=False))
    # caption generator
    p["tok.emb"] = rng.normal(0.0, 0.5, size=(V, E))
    p.update(_linear_params("gen.init", rng, H + Z, G))
    p.update(_lstm_params("gen.lstm", rng, E, G))
    p.update(_linear_params("gen.out", rng, G, V))
    # trajectory decoder
    if cfg.decoder == "ours":
        p.update(_linear_params("agatt.mlp", rng, E, cfg.a_max))
        p.update(_linear_params("agatt.proj", rng, H, E))
        p.update(_lstm_params("tokenc.lstm", rng, E, E))
        p.update(_linear_params("tokatt.query", rng, E + H, cfg.att_hidden))
        p["tokatt.W"] = _glorot(rng, (cfg.att_hidden, E))
        ctx = E
    elif cfg.decoder == "multihead":
        hd = cfg.head_dim
        for k in range(cfg.heads):
            p.update(_linear_params(f"mh{k}.q", rng, H, hd, bias=False))
            p.update(_linear_params(f"mh{k}.k", rng, H, hd, bias=False))
            p.update(_linear_params(f"mh{k}.v", rng, H, hd, bias=False))
            p[f"mh{k}.W"] = np.eye(hd)
        ctx = cfg.heads * hd
    else:
        ctx = 0
    p.update(_lstm_params("dec.lstm", rng, 2 + ctx + Z, H))
    p.update(_linear_params("dec.out", rng, H, 2))
    # discriminator
    p.update(_lstm_params("disc.lstm", rng, 2, H))
    p.update(_linear_params("disc.out", rng, H, 1))
    return {k: dc.parameter(v, name=k) for k, v in sorted(p.items())}


GENERATOR_PREFIXES = ("map.", "enc.", "social.", "tok.", "gen.", "agatt.", "tokenc.", "tokatt.", "mh", "dec.")


def generator_params(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {k: v for k, v in params.items() if k.startswith(GENERATOR_PREFIXES)}


def discriminator_params(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {k: v for k, v in params.items() if k.startswith("disc.")}


# -- the model ------------------------------------------------------------------


def _masked_mean_matrix(mask: np.ndarray, exclude_self: bool) -> np.ndarray:
    """(B, A, A) matrix averaging over valid agents (optionally excluding self)."""
    m = mask.astype(float)
    w = np.broadcast_to(m[:, None, :], m.shape + (m.shape[-1],)).copy()
    if exclude_self:
        idx = np.arange(m.shape[-1])
        w[:, idx, idx] = 0.0
    cnt = w.sum(-1, keepdims=True)
    return w / np.where(cnt > 0, cnt, 1.0)


class TrajectoryModel:
    """Parameters plus the forward computations of every model component."""

    def __init__(self, cfg: Optional[ModelConfig] = None, seed: int = 0, params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_(self) -> "TrajectoryModel":
        """Set every parameter to zero (used by contract tests)."""
        for p in self.params.values():
            p.data = np.zeros_like(p.data)
        return self

    def _lstm(self, prefix, x, h, c, mask=None):
        P = self.params
        return dc.lstm_cell_step(x, h, c, P[f"{prefix}.Wx"], P[f"{prefix}.Wh"], P[f"{prefix}.b"], mask=mask)

    def _lin(self, prefix, x):
        P = self.params
        return dc.linear(x, P[f"{prefix}.W"], P.get(f"{prefix}.b"))

    # -- encoders ---------------------------------------------------------------

    def encode_map_features(self, feats: np.ndarray, seg_mask: np.ndarray, lane_mask: np.ndarray) -> Tensor:
        """Map embedding from segment features.

        ``feats`` is ``(..., L, S, 6)``, ``seg_mask`` ``(..., L, S)`` and
        ``lane_mask`` ``(..., L)``; returns ``(..., D)``.
        """
        P = self.params
        e = dc.relu(self._lin("map.seg1", Tensor(feats)))
        e = self._lin("map.seg2", e)
        lane = dc.masked_max(e, seg_mask[..., None], axis=-2)  # (..., L, D)
        L = lane.shape[-2]
        keys = dc.expand(lane, -3, L)  # (..., L, L, D)
        att_mask = np.broadcast_to(lane_mask[..., None, :], lane_mask.shape + (L,))
        w = dc.scaled_general_attention(lane, keys, P["map.att.W"], att_mask)  # (..., L, L)
        mixed = dc.matmul(w, lane)  # (..., L, D)
        lm = lane_mask.astype(float)
        cnt = lm.sum(-1, keepdims=True)
        has = (cnt > 0).astype(float)
        wmean = (lm / np.where(cnt > 0, cnt, 1.0))[..., None, :]  # (..., 1, L)
        pooled = dc.matmul(Tensor(wmean), mixed).reshape(mixed.shape[:-2] + (mixed.shape[-1],))
        return pooled * has + dc.mul(P["map.null"], 1.0 - has)

    def encode_map(self, map_graph, origin=(0.0, 0.0)) -> Tensor:
        """Embedding (D,) of a single map seen from ``origin``; empty maps give the null embedding."""
        from .dataio import PredictionExample as _PE  # local: only for the window logic

        cfg = self.cfg
        ex = _PE(
            example_id="map",
            positions=np.tile(np.asarray(origin, float), (1, cfg.past_len + cfg.future_len, 1)),
            valid=np.ones((1, cfg.past_len + cfg.future_len), bool),
            neighbor_order=["map"],
            map=map_graph,
            past_len=cfg.past_len,
        )
        b = make_batch([ex], cfg)
        feats = _segment_features(b, cfg)
        return self.encode_map_features(feats[0, 0], b.seg_mask[0], b.lane_mask[0])

    def social_round(self, h: Tensor, mask: np.ndarray) -> Tensor:
        """One message-passing round: ``tanh(W_s h_i + W_m mean_{j != i} h_j + b)``.

        Masked agents neither send messages nor keep a state (their output is 0).
        """
        agg = Tensor(_masked_mean_matrix(mask, exclude_self=True))
        msg = dc.matmul(agg, h)
        out = dc.tanh(self._lin("social.self", h) + self._lin("social.msg", msg))
        return out * mask[..., None].astype(float)

    def encode_agents(self, batch: Batch, map_emb: Optional[Tensor] = None) -> EncoderOutput:
        cfg = self.cfg
        if map_emb is None:
            map_emb = self.encode_map_features(_segment_features(batch, cfg), batch.seg_mask[:, None], batch.lane_mask[:, None])
        B, A, P = batch.past_valid.shape
        offset = (batch.origin - batch.origin[:, :1]) * cfg.pos_scale
        h = Tensor(np.zeros((B, A, cfg.hidden)))
        c = Tensor(np.zeros((B, A, cfg.hidden)))
        for t in range(P):
            x = np.concatenate([batch.past_rel[:, :, t] * cfg.pos_scale, batch.past_delta[:, :, t], offset], axis=-1)
            h, c = self._lstm("enc.lstm", dc.concat([Tensor(x), map_emb], -1), h, c, mask=batch.past_valid[:, :, t])
        h0 = self.social_round(h, batch.agent_mask)
        return EncoderOutput(h0=h0, map_emb=map_emb, mask=batch.agent_mask)

    def encode(self, batch: Batch) -> EncoderOutput:
        return self.encode_agents(batch)

    # -- caption generator -------------------------------------------------------

    def _sampling_mask(self, m: int, prev: np.ndarray) -> np.ndarray:
        """Additive logit mask keeping sampled captions well formed."""
        M = self.cfg.max_len
        mask = np.zeros(prev.shape + (VOCAB_SIZE,))
        mask[..., BOS] = -1e9
        mask[..., PAD] = -1e9
        if m >= M - 2:
            mask[..., list(REFERRING_TOKENS)] = -1e9
        after_ref = np.isin(prev, REFERRING_TOKENS)
        if after_ref.any():
            non_agent = [i for i in range(VOCAB_SIZE) if i not in AGENT_TOKENS]
            sub = mask[after_ref]
            sub[:, non_agent] = -1e9
            mask[after_ref] = sub
        return mask

    def generate_caption(
        self,
        h0: Tensor,
        z: np.ndarray,
        mode: str = "sample",
        tokens: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
        hard: bool = True,
        noise: Optional[np.ndarray] = None,
    ) -> CaptionRollout:
        """Roll out ``M`` caption tokens from ``(h0, z)``.

        ``mode='teacher'`` feeds ``tokens`` (shape ``(..., M)``) as previous
        tokens and returns their one-hots; ``mode='sample'`` draws each token
        with straight-through Gumbel-softmax (``noise``, shape ``(..., M, V)``,
        freezes the draw).  Position 0 is always ``<bos>``, everything after
        ``<eos>`` is ``<pad>`` and the last position is ``<eos>`` when no
        earlier one was drawn.
        """
        cfg = self.cfg
        P = self.params
        M, V = cfg.max_len, VOCAB_SIZE
        lead = h0.shape[:-1]
        if mode not in ("sample", "teacher"):
            raise ValueError(f"unknown caption mode {mode!r}")
        if mode == "teacher":
            tokens = np.asarray(tokens, dtype=np.int64)
            if tokens.shape != lead + (M,):
                raise ValueError(f"teacher tokens must have shape {lead + (M,)}, got {tokens.shape}")
        elif noise is None and rng is None:
            raise ValueError("sample mode needs an rng or frozen noise")
        h = dc.tanh(self._lin("gen.init", dc.concat([h0, Tensor(z)], -1)))
        c = Tensor(np.zeros(lead + (cfg.gen_hidden,)))
        x = Tensor(np.zeros(lead + (cfg.token_dim,)))
        logits_all, onehots = [], []
        ids = np.full(lead + (M,), PAD, dtype=np.int64)
        done = np.zeros(lead, bool)
        for m in range(M):
            h, c = self._lstm("gen.lstm", x, h, c)
            logits = self._lin("gen.out", h)
            logits_all.append(logits)
            if mode == "teacher":
                tok = tokens[..., m]
                oh = Tensor(np.eye(V)[tok])
            else:
                forced = np.full(lead, -1, dtype=np.int64)
                if m == 0:
                    forced[...] = BOS
                else:
                    forced[done] = PAD
                    if m == M - 1:
                        forced[~done] = EOS
                if (forced >= 0).all():
                    tok = forced
                    oh = Tensor(np.eye(V)[tok])
                else:
                    masked = logits + self._sampling_mask(m, ids[..., m - 1])
                    g = dc.gumbel_softmax_sample(
                        masked, cfg.gumbel_tau, rng, hard=hard, noise=None if noise is None else noise[..., m, :]
                    )
                    f = (forced >= 0).astype(float)[..., None]
                    tok = np.where(forced >= 0, forced, g.ids)
                    oh = g.onehot * (1.0 - f) + Tensor(np.eye(V)[np.maximum(forced, 0)] * f)
                done = done | (tok == EOS)
            ids[..., m] = tok
            onehots.append(oh)
            x = dc.matmul(oh.reshape((-1, V)), P["tok.emb"]).reshape(lead + (cfg.token_dim,))
        logits = dc.stack(logits_all, axis=-2)
        onehot = dc.stack(onehots, axis=-2)
        return CaptionRollout(logits, ids, onehot, np.asarray(z), caption_log_likelihood(logits.data, ids))

    # -- attention ------------------------------------------------------------------

    def agent_attention_weights(self, Y: Tensor, agent_mask: np.ndarray) -> Tensor:
        """Softmax over agents of a one-layer MLP of each token embedding.

        ``Y`` is ``(R, A, M, E)``, ``agent_mask`` ``(R, A)`` with ``A <= a_max``;
        returns ``(R, A, M, A)``.
        """
        A = agent_mask.shape[-1]
        logits = self._lin("agatt.mlp", Y)
        if A < self.cfg.a_max:
            logits = logits[..., :A]
        return dc.softmax(logits, axis=-1, mask=agent_mask[:, None, None, :])

    def agent_attend(self, Y: Tensor, tokens: np.ndarray, hiddens: Tensor, agent_mask: np.ndarray,
                     weights: Optional[Tensor] = None) -> Tensor:
        """Replace the embedding at every ``Agent#k`` position by the projection
        of the attention-pooled agent hidden states ``h_{t-1}``; other tokens
        pass through unchanged, as does everything in a scene with no valid agent."""
        if weights is None:
            weights = self.agent_attention_weights(Y, agent_mask)
        sel = np.isin(tokens, AGENT_TOKENS) & agent_mask.any(-1)[:, None, None]
        if not sel.any():
            return Y
        pooled = dc.matmul(weights, dc.expand(hiddens, 1, 1))  # (R, A, M, H)
        proj = self._lin("agatt.proj", pooled)
        s = sel[..., None].astype(float)
        return Y * (1.0 - s) + proj * s

    def token_encode(self, Yp: Tensor, tokens: np.ndarray):
        """Masked recurrent pass over caption positions.

        Returns ``(c_t, encodings)`` with ``c_t`` the state after the last
        non-pad token and ``encodings`` ``(..., M, E)``.
        """
        E = self.cfg.token_dim
        lead = Yp.shape[:-2]
        h = Tensor(np.zeros(lead + (E,)))
        c = Tensor(np.zeros(lead + (E,)))
        enc = []
        valid = tokens != PAD
        for m in range(Yp.shape[-2]):
            h, c = self._lstm("tokenc.lstm", Yp[..., m, :], h, c, mask=valid[..., m])
            enc.append(h)
        return h, dc.stack(enc, axis=-2)

    def token_attend(self, Yp: Tensor, enc: Tensor, c_t: Tensor, h_prev: Tensor, tokens: np.ndarray):
        """Context ``c'_t = sum_m w_m Y'_m`` and weights ``w`` (``<pad>`` masked)."""
        q = dc.tanh(self._lin("tokatt.query", dc.concat([c_t, h_prev], -1)))
        w = dc.scaled_general_attention(q, enc, self.params["tokatt.W"], tokens != PAD)
        ctx = dc.matmul(dc.expand(w, -2, 1), Yp)  # (..., 1, E)
        return ctx.reshape(ctx.shape[:-2] + (ctx.shape[-1],)), w

    def multihead_context(self, h_prev: Tensor, agent_mask: np.ndarray) -> Tensor:
        """Six-head attention of each agent over the *other* agents' states."""
        A = agent_mask.shape[-1]
        m = np.broadcast_to(agent_mask[:, None, :], agent_mask.shape + (A,)).copy()
        m[:, np.arange(A), np.arange(A)] = False
        heads = []
        for k in range(self.cfg.heads):
            q = self._lin(f"mh{k}.q", h_prev)
            keys = dc.expand(self._lin(f"mh{k}.k", h_prev), 1, A)
            vals = self._lin(f"mh{k}.v", h_prev)
            w = dc.scaled_general_attention(q, keys, self.params[f"mh{k}.W"], m)  # (R, A, A)
            heads.append(dc.matmul(w, vals))
        return dc.concat(heads, -1)

    # -- decoder -----------------------------------------------------------------

    def decode_step(self, prev_disp: Tensor, h: Tensor, c: Tensor, context: Optional[Tensor], z: Tensor,
                    training: bool = False, rng: Optional[np.random.Generator] = None):
        """One recurrent step; returns ``(displacement, h, c)``."""
        parts = [prev_disp] + ([context] if context is not None else []) + [z]
        h, c = self._lstm("dec.lstm", dc.concat(parts, -1), h, c)
        hd = dc.dropout(h, self.cfg.dropout, rng, training)
        disp = self._lin("dec.out", hd)
        if not np.all(np.isfinite(disp.data)):
            raise dc.TrainingDivergenceError("decoder produced a non-finite displacement")
        return disp, h, c

    def decode(
        self,
        h0: Tensor,
        z: np.ndarray,
        last_disp: np.ndarray,
        agent_mask: np.ndarray,
        tokens: Optional[np.ndarray] = None,
        onehot: Optional[Tensor] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        """Decode ``T`` displacements for every row and agent.

        Returns ``(displacements (R, A, T, 2), DecoderTrace)``.
        """
        cfg = self.cfg
        T = cfg.future_len
        zt = Tensor(z)
        h, c = h0, Tensor(np.zeros(h0.shape))
        prev = Tensor(last_disp)
        disps, hiddens, tok_rows = [], [], []
        ag_w = Yp = enc = c_t = None
        rows = None
        if cfg.decoder == "ours":
            R, A, M = tokens.shape
            Y = dc.matmul(onehot, self.params["tok.emb"])  # (R, A, M, E)
            Yp = Y
            c_t, enc = self.token_encode(Y, tokens)
            if not cfg.no_agent_attention:
                # only rows whose caption names an agent change from step to step
                sel = np.isin(tokens, AGENT_TOKENS) & agent_mask.any(-1)[:, None, None]
                rows = np.nonzero(sel.any(-1).reshape(-1))[0]
                if len(rows):
                    ag_w = self.agent_attention_weights(Y, agent_mask)
                    E = cfg.token_dim
                    Yf = Y.reshape((R * A, M, E))
                    Ysub = Yf[rows]
                    wsub = ag_w.reshape((R * A, M, A))[rows]
                    ssub = sel.reshape(R * A, M)[rows][..., None].astype(float)
                    tsub = tokens.reshape(R * A, M)[rows]
                    enc_f = enc.reshape((R * A, M, E))
                    ct_f = c_t.reshape((R * A, E))
                else:
                    rows = None
        for t in range(T):
            ctx = None
            if cfg.decoder == "ours":
                if rows is not None:
                    hsub = h[rows // A]  # (S, A, H) states of every agent in the row's scene
                    proj = self._lin("agatt.proj", dc.matmul(wsub, hsub))
                    ysub = Ysub * (1.0 - ssub) + proj * ssub
                    csub, esub = self.token_encode(ysub, tsub)
                    Yp = dc.index_update(Yf, rows, ysub).reshape((R, A, M, E))
                    enc = dc.index_update(enc_f, rows, esub).reshape((R, A, M, E))
                    c_t = dc.index_update(ct_f, rows, csub).reshape((R, A, E))
                if cfg.no_attention:
                    ctx = c_t
                else:
                    ctx, w = self.token_attend(Yp, enc, c_t, h, tokens)
                    tok_rows.append(w.data)
            elif cfg.decoder == "multihead":
                ctx = self.multihead_context(h, agent_mask)
            disp, h, c = self.decode_step(prev, h, c, ctx, zt, training, rng)
            disps.append(disp)
            hiddens.append(h.data)
            prev = disp
        D = dc.stack(disps, axis=2)
        trace = DecoderTrace(
            token_weights=np.stack(tok_rows, axis=2) if tok_rows else None,
            agent_weights=None if ag_w is None else ag_w.data,
            agent_positions=None if tokens is None else np.isin(tokens, AGENT_TOKENS),
            hidden=np.stack(hiddens, axis=2),
            tokens=tokens,
        )
        return D, trace

    # -- full rollout -----------------------------------------------------------------

    def rollout(
        self,
        batch: Batch,
        n_samples: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        training: bool = False,
        z: Optional[np.ndarray] = None,
        caption_override: Optional[np.ndarray] = None,
        override_mask: Optional[np.ndarray] = None,
        gumbel_noise: Optional[np.ndarray] = None,
        hard: bool = True,
        encoder: Optional[EncoderOutput] = None,
    ) -> RolloutResult:
        """Sample ``N`` futures per example.

        One noise vector ``z`` per (sample, agent) drives both the caption
        generator and the decoder.  ``caption_override`` (``(B, A, M)``)
        replaces the generated caption wherever ``override_mask``
        (``(B, A)``) is set; this is how edited or ground-truth captions
        are decoded.
        """
        cfg = self.cfg
        N = n_samples or cfg.n_samples
        B, A = batch.agent_mask.shape
        R = B * N
        if rng is None:
            rng = np.random.default_rng(0)
        if z is None:
            z = rng.normal(size=(B, N, A, cfg.noise_dim))
        enc = encoder or self.encode(batch)
        h0 = dc.expand(enc.h0, 1, N).reshape((R, A, cfg.hidden))
        zr = z.reshape(R, A, cfg.noise_dim)
        mask_r = np.repeat(batch.agent_mask, N, axis=0)
        last = np.repeat(batch.last_disp, N, axis=0)
        cap = None
        tokens = onehot = None
        if cfg.decoder == "ours":
            noise = None if gumbel_noise is None else gumbel_noise.reshape((R, A) + gumbel_noise.shape[-2:])
            cap = self.generate_caption(h0, zr, "sample", rng=rng, hard=hard, noise=noise)
            tokens, onehot = cap.tokens, cap.onehot
            if caption_override is not None:
                om = np.ones((B, A), bool) if override_mask is None else np.asarray(override_mask, bool)
                om_r = np.repeat(om, N, axis=0)
                ov = np.repeat(np.asarray(caption_override, np.int64), N, axis=0)
                tokens = np.where(om_r[..., None], ov, tokens)
                f = om_r[..., None, None].astype(float)
                onehot = onehot * (1.0 - f) + Tensor(np.eye(VOCAB_SIZE)[ov] * f)
        D, trace = self.decode(h0, zr, last, mask_r, tokens, onehot, training, rng)
        T = cfg.future_len
        cums = dc.matmul(Tensor(np.tril(np.ones((T, T)))), D)
        origin = np.repeat(batch.origin, N, axis=0)[:, :, None, :]
        pos = cums + origin
        return RolloutResult(
            positions=pos.reshape((B, N, A, T, 2)),
            displacements=D.reshape((B, N, A, T, 2)),
            captions=cap,
            tokens=None if tokens is None else tokens.reshape(B, N, A, -1),
            trace=trace,
            z=z,
            encoder=enc,
        )

    def teacher_logits(self, h0_target: Tensor, z_target: np.ndarray, tokens: np.ndarray) -> Tensor:
        """Teacher-forced caption logits ``(B, M, V)`` for the target agents."""
        return self.generate_caption(h0_target, z_target, "teacher", tokens=tokens).logits

    # -- discriminator ---------------------------------------------------------------

    def discriminate_logits(self, future_disp: Tensor, valid: np.ndarray, h0: Tensor) -> Tensor:
        """Logit that ``future_disp`` (``(..., T, 2)``) is real, given a detached ``h0``."""
        h = h0.detach()
        c = Tensor(np.zeros(h.shape))
        for t in range(future_disp.shape[-2]):
            h, c = self._lstm("disc.lstm", future_disp[..., t, :], h, c, mask=valid[..., t])
        return self._lin("disc.out", h).reshape(h.shape[:-1])

    def discriminate(self, future_disp, valid, h0) -> np.ndarray:
        with dc.no_grad():
            return dc._sigmoid(self.discriminate_logits(dc.as_tensor(future_disp), valid, dc.as_tensor(h0)).data)

    # -- persistence -------------------------------------------------------------------

    def save(self, path: str, opt=None, meta: Optional[dict] = None) -> None:
        m = {"model_config": self.cfg.to_dict()}
        m.update(meta or {})
        dc.save_checkpoint(path, self.params, opt, m)

    @classmethod
    def load(cls, path: str):
        arrays, meta, opt = dc.load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta["model_config"])
        params = {k: dc.parameter(arrays[k], name=k) for k in sorted(arrays)}
        return cls(cfg, params=params), meta, opt


def caption_log_likelihood(logits: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Log-probability of each caption up to and including its ``<eos>``
    (position 0 is the fixed ``<bos>`` and is not scored)."""
    ls = dc.log_softmax_np(logits)
    lp = np.take_along_axis(ls, tokens[..., None], axis=-1)[..., 0]
    eos_seen = np.cumsum(tokens == EOS, axis=-1)
    scored = (eos_seen == 0) | ((tokens == EOS) & (eos_seen == 1))
    scored[..., 0] = False
    return np.sum(lp * scored, axis=-1)


def trace_record(trace: DecoderTrace, row: int, agent: int = 0) -> dict:
    """Structured, JSON-ready view of one decoder trace."""
    rec = {"tokens": None if trace.tokens is None else trace.tokens[row, agent].tolist()}
    if trace.token_weights is not None:
        rec["token_weights"] = trace.token_weights[row, agent].tolist()
    if trace.agent_weights is not None:
        pos = np.where(trace.agent_positions[row, agent])[0]
        rec["agent_weights"] = {int(m): trace.agent_weights[row, agent, m].tolist() for m in pos}
    return rec
