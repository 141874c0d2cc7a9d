"""Three-tier conditional SampleRNN.

Tier 3 runs a GRU over non-overlapping FS3-sample frames, tier 2 over
FS2-sample subframes, and tier 1 is an MLP predicting one mu-law code from the
previous FS2 codes. Every tier adds a learned projection of the conditioning
context L_t to its input. Upper tiers hand down one learned linear map per
sub-position.

Teacher-forced scoring records on the active tape; ``InferenceSession`` is the
tape-free step-by-step path used for generation.
"""
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .audiocodec import DECODE_TABLE, SILENCE_CODE
from .condnet import glorot, gru_step, recurrent_init
from .errors import DimensionError


@dataclass
class TierState:
    top: np.ndarray  # [B, H3]
    mid: np.ndarray  # [B, H2]
    history: np.ndarray  # [B, FS3] last codes, oldest first

    def copy(self):
        return TierState(self.top.copy(), self.mid.copy(), self.history.copy())


@dataclass
class TierCounters:
    top: int = 0
    mid: int = 0
    mlp: int = 0


class _Linear:
    def __init__(self, store, name, n_in, n_out, bias=True):
        self.w = store.create(f"{name}.w", np.zeros((n_in, n_out)))
        self.b = store.create(f"{name}.b", np.zeros(n_out)) if bias else None

    def init(self, rng, zero=False):
        if not zero:
            self.w.data = glorot(rng, *self.w.shape, self.w.dtype)

    def __call__(self, x):
        y = nc.matmul(x, self.w)
        return nc.add(y, self.b) if self.b is not None else y


class _FrameTier:
    """Frame-level GRU tier: input = frame proj + upper cond + context proj."""

    def __init__(self, store, prefix, frame_size, cond_dim, hidden, n_sub, out_dim):
        self.frame_size = frame_size
        self.hidden = hidden
        self.n_sub = n_sub
        self.out_dim = out_dim
        self.frame_in = _Linear(store, f"{prefix}.frame_in", frame_size, hidden)
        self.cond_in = _Linear(store, f"{prefix}.cond_in", cond_dim, hidden, bias=False)
        self.w_x = store.create(f"{prefix}.gru.w_x", np.zeros((hidden, 3 * hidden)))
        self.b_x = store.create(f"{prefix}.gru.b", np.zeros(3 * hidden))
        self.w_zr = store.create(f"{prefix}.gru.w_zr", np.zeros((hidden, 2 * hidden)))
        self.w_n = store.create(f"{prefix}.gru.w_n", np.zeros((hidden, hidden)))
        self.up = _Linear(store, f"{prefix}.up", hidden, n_sub * out_dim)

    def init(self, rng):
        dt = self.w_x.dtype
        self.frame_in.init(rng)
        self.cond_in.init(rng)
        self.w_x.data = glorot(rng, self.hidden, 3 * self.hidden, dt)
        self.w_zr.data = recurrent_init(rng, self.hidden, 2 * self.hidden, dt)
        self.w_n.data = recurrent_init(rng, self.hidden, self.hidden, dt)
        self.up.init(rng)

    def forward(self, frames, cond, h0, upper=None):
        """frames [B, N, fs], cond [B, N, hidden] (already projected), upper [B, N, hidden]."""
        x = nc.add(self.frame_in(frames), cond)
        if upper is not None:
            x = nc.add(x, upper)
        gx = nc.add(nc.matmul(x, self.w_x), self.b_x)
        hs = nc.gru_sequence(gx, h0, self.w_zr, self.w_n)
        B, N = hs.shape[:2]
        out = nc.reshape(self.up(hs), (B, N * self.n_sub, self.out_dim))
        return out, hs


class SampleRNN:
    def __init__(self, store, cfg, prefix="srnn"):
        self.cfg = cfg
        t = cfg.tiers
        H3, H2 = t.rnn_hidden
        W1, W2, W3 = t.mlp_widths
        self.fs3, self.fs2 = t.frame_sizes
        self.r3 = t.ratio_top
        self.top = _FrameTier(store, f"{prefix}.top", self.fs3, cfg.cond_dim, H3, self.r3, H2)
        self.mid = _FrameTier(store, f"{prefix}.mid", self.fs2, cfg.cond_dim, H2, self.fs2, W1)
        self.embed = store.create(f"{prefix}.mlp.embed", np.zeros((cfg.levels, cfg.sample_embed_dim)))
        self.mlp_in = _Linear(store, f"{prefix}.mlp.in", self.fs2 * cfg.sample_embed_dim, W1)
        self.mlp_cond = _Linear(store, f"{prefix}.mlp.cond_in", cfg.cond_dim, W1, bias=False)
        self.fc2 = _Linear(store, f"{prefix}.mlp.fc2", W1, W2)
        self.fc3 = _Linear(store, f"{prefix}.mlp.fc3", W2, W3)
        self.out = _Linear(store, f"{prefix}.mlp.out", W3, cfg.levels)

    def init(self, rng, zero_output=True):
        """Random weights; with ``zero_output`` the logit layer starts at zero
        so the untrained model predicts the uniform distribution."""
        self.top.init(rng)
        self.mid.init(rng)
        self.embed.data = rng.normal(0.0, 1.0, size=self.embed.shape).astype(self.embed.dtype)
        self.mlp_in.init(rng)
        self.mlp_cond.init(rng)
        self.fc2.init(rng)
        self.fc3.init(rng)
        self.out.init(rng, zero=zero_output)

    def initial_state(self, batch):
        dt = self.embed.dtype
        H3, H2 = self.cfg.tiers.rnn_hidden
        return TierState(
            np.zeros((batch, H3), dt),
            np.zeros((batch, H2), dt),
            np.full((batch, self.fs3), SILENCE_CODE, dtype=np.int64),
        )

    def logits(self, codes, context, state):
        """Teacher-forced logits [B, T, Q] for ``codes`` [B, T].

        ``context`` holds one L_t row per top-tier frame of the chunk. Position
        t is predicted from ``state.history`` followed by codes[:, :t].
        """
        codes = np.asarray(codes, dtype=np.int64)
        B, T = codes.shape
        fs3, fs2 = self.fs3, self.fs2
        if T % fs3:
            raise DimensionError(f"chunk length {T} is not a multiple of the top frame size {fs3}")
        n3, n2 = T // fs3, T // fs2
        L = context.frames
        if L.shape[:2] != (B, n3):
            raise DimensionError(f"context has {L.shape[:2]} (batch, frames), chunk needs {(B, n3)}")
        full = np.concatenate([state.history, codes], axis=1)
        x = DECODE_TABLE[full].astype(self.embed.dtype)
        top_frames = x[:, :n3 * fs3].reshape(B, n3, fs3)
        mid_frames = x[:, fs3 - fs2:fs3 - fs2 + n2 * fs2].reshape(B, n2, fs2)
        ctx = np.lib.stride_tricks.sliding_window_view(full, fs2, axis=1)[:, fs3 - fs2:fs3 - fs2 + T]

        upper, h3 = self.top.forward(top_frames, self.top.cond_in(L), nc.Tensor(state.top))
        mid_cond = nc.repeat(self.mid.cond_in(L), self.r3, axis=1)
        sub, h2 = self.mid.forward(mid_frames, mid_cond, nc.Tensor(state.mid), upper)

        emb = nc.embedding_lookup(self.embed, ctx)
        emb = nc.reshape(emb, (B, T, fs2 * self.cfg.sample_embed_dim))
        a1 = nc.add(nc.add(self.mlp_in(emb), sub), nc.repeat(self.mlp_cond(L), fs3, axis=1))
        h = nc.relu(a1)
        h = nc.relu(self.fc2(h))
        h = nc.relu(self.fc3(h))
        logits = self.out(h)
        new_state = TierState(h3.data[:, -1].copy(), h2.data[:, -1].copy(), full[:, -fs3:].copy())
        return logits, new_state

    def teacher_forced_forward(self, codes, context, state, mask=None, normalizer=None):
        """Loss in bits per predicted sample, and the carried-over state."""
        logits, new_state = self.logits(codes, context, state)
        bits = nc.softmax_cross_entropy(logits, codes, mask=mask, normalizer=normalizer, base=2)
        return bits, new_state


class InferenceSession:
    """Step-by-step evaluation for a batch of utterances without a tape.

    ``context`` is a numpy array [B, F, cond_dim] covering the whole
    utterance. Top-tier output is reused for FS3 samples and mid-tier output
    for FS2 samples.
    """

    def __init__(self, model, context, state=None):
        self.model = m = model
        L = np.asarray(context, dtype=m.embed.dtype)
        self.B, self.n_frames = L.shape[:2]
        self.state = state.copy() if state is not None else m.initial_state(self.B)
        d = lambda t: t.data  # noqa: E731
        self.top_cond = L @ d(m.top.cond_in.w)
        self.mid_cond = L @ d(m.mid.cond_in.w)
        self.mlp_cond = L @ d(m.mlp_cond.w)
        e = m.cfg.sample_embed_dim
        w_in = d(m.mlp_in.w).reshape(m.fs2, e, -1)
        self.code_proj = np.stack([d(m.embed) @ w_in[p] for p in range(m.fs2)])  # [fs2, Q, W1]
        self.counters = TierCounters()
        self.position = 0
        self._upper = None
        self._sub = None

    def _frame_step(self, tier, frames, cond, h, upper=None):
        x = frames @ tier.frame_in.w.data + tier.frame_in.b.data + cond
        if upper is not None:
            x = x + upper
        gx = x @ tier.w_x.data + tier.b_x.data
        h = gru_step(gx, h, tier.w_zr.data, tier.w_n.data)
        out = (h @ tier.up.w.data + tier.up.b.data).reshape(self.B, tier.n_sub, tier.out_dim)
        return out, h

    def next_logits(self):
        m, i = self.model, self.position
        j = i // m.fs3
        if j >= self.n_frames:
            raise DimensionError(f"sample {i} lies beyond the {self.n_frames} conditioning frames")
        hist = self.state.history
        if i % m.fs3 == 0:
            frames = DECODE_TABLE[hist].astype(m.embed.dtype)
            self._upper, self.state.top = self._frame_step(m.top, frames, self.top_cond[:, j], self.state.top)
            self.counters.top += 1
        if i % m.fs2 == 0:
            frames = DECODE_TABLE[hist[:, -m.fs2:]].astype(m.embed.dtype)
            upper = self._upper[:, (i // m.fs2) % m.r3]
            self._sub, self.state.mid = self._frame_step(m.mid, frames, self.mid_cond[:, j], self.state.mid, upper)
            self.counters.mid += 1
        ctx = hist[:, -m.fs2:]
        a = self._sub[:, i % m.fs2] + m.mlp_in.b.data + self.mlp_cond[:, j]
        for p in range(m.fs2):
            a = a + self.code_proj[p][ctx[:, p]]
        h = np.maximum(a, 0)
        h = np.maximum(h @ m.fc2.w.data + m.fc2.b.data, 0)
        h = np.maximum(h @ m.fc3.w.data + m.fc3.b.data, 0)
        self.counters.mlp += 1
        return h @ m.out.w.data + m.out.b.data

    def push(self, codes):
        codes = np.asarray(codes, dtype=np.int64).reshape(self.B)
        hist = self.state.history
        hist[:, :-1] = hist[:, 1:]
        hist[:, -1] = codes
        self.position += 1
