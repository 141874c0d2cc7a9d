"""Conditioning network: speaker embedding, bidirectional GRU, linear projection,
and repetition upsampling of its per-frame output to each tier's rate."""
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError

PER_GRADIENT_STEP = "per_gradient_step"
PER_UTTERANCE = "per_utterance"


def glorot(rng, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


def recurrent_init(rng, hidden, width, dtype):
    a = 1.0 / np.sqrt(hidden)
    return rng.uniform(-a, a, size=(hidden, width)).astype(dtype)


class GruCell:
    """Parameter bundle for one GRU direction.

    Input weights map [x] to the stacked (update, reset, candidate)
    pre-activations; the recurrent part is split into the gate block and the
    candidate block so the candidate can see ``r * h``.
    """

    def __init__(self, store, prefix, input_size, hidden_size):
        self.prefix = prefix
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        self.w_x = store.create(f"{prefix}.w_x", np.zeros((input_size, 3 * H)))
        self.b = store.create(f"{prefix}.b", np.zeros(3 * H))
        self.w_zr = store.create(f"{prefix}.w_zr", np.zeros((H, 2 * H)))
        self.w_n = store.create(f"{prefix}.w_n", np.zeros((H, H)))

    def init(self, rng):
        dt = self.w_x.dtype
        self.w_x.data = glorot(rng, self.input_size, 3 * self.hidden_size, dt)
        self.w_zr.data = recurrent_init(rng, self.hidden_size, 2 * self.hidden_size, dt)
        self.w_n.data = recurrent_init(rng, self.hidden_size, self.hidden_size, dt)

    def run(self, x, h0, reverse=False):
        gx = nc.add(nc.matmul(x, self.w_x), self.b)
        return nc.gru_sequence(gx, h0, self.w_zr, self.w_n, reverse=reverse)

    def step(self, x, h):
        """Single numpy step, no tape; mirrors ``gru_sequence``."""
        return gru_step(x @ self.w_x.data + self.b.data, h, self.w_zr.data, self.w_n.data)


def gru_step(gx, h, w_zr, w_n):
    H = h.shape[-1]
    zr = nc._stable_sigmoid(gx[..., : 2 * H] + h @ w_zr)
    z, r = zr[..., :H], zr[..., H:]
    n = np.tanh(gx[..., 2 * H:] + (r * h) @ w_n)
    return (1 - z) * h + z * n


@dataclass
class ConditioningState:
    """Recurrent state of the bidirectional layer for a batch of utterances."""

    forward: np.ndarray
    backward: np.ndarray
    backward_resets: int = 0
    utterance_resets: int = 0

    @classmethod
    def zeros(cls, batch, hidden, dtype=np.float32):
        return cls(np.zeros((batch, hidden), dtype), np.zeros((batch, hidden), dtype))


def reset_backward_state(state, mode):
    """Zero recurrent state according to the reset policy.

    ``per_gradient_step`` (training) zeroes only the backward direction and is
    called before every optimizer step; the forward direction carries over
    between chunks of a clip. ``per_utterance`` (generation) zeroes every
    state once at the start of an utterance.
    """
    if mode == PER_GRADIENT_STEP:
        state.backward = np.zeros_like(state.backward)
        state.backward_resets += 1
    elif mode == PER_UTTERANCE:
        state.backward = np.zeros_like(state.backward)
        state.forward = np.zeros_like(state.forward)
        state.backward_resets += 1
        state.utterance_resets += 1
    else:
        raise ValueError(f"unknown reset mode {mode!r}")
    return state


@dataclass
class ConditioningContext:
    """Per-frame context vectors L_t, shaped [batch, frames, cond_dim]."""

    frames: nc.Tensor
    views: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.frames.shape[1]

    def at_rate(self, factor):
        if factor not in self.views:
            self.views[factor] = upsample_repeat(self.frames, factor)
        return self.views[factor]


def repetition_factor(cond_frame_samples, tier_frame_samples):
    """How many tier steps fall inside one conditioning frame."""
    if tier_frame_samples <= 0 or cond_frame_samples % tier_frame_samples:
        raise ConfigError(
            f"conditioning frame of {cond_frame_samples} samples is not a whole number "
            f"of {tier_frame_samples}-sample tier frames"
        )
    return cond_frame_samples // tier_frame_samples


def upsample_repeat(frames, factor, axis=1):
    """Copy each frame ``factor`` times contiguously along time."""
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"repetition factor must be a positive integer, got {factor}")
    if isinstance(frames, nc.Tensor):
        return nc.repeat(frames, int(factor), axis)
    return np.repeat(frames, int(factor), axis=axis)


class CondNet:
    def __init__(self, store, cfg, prefix="condnet"):
        self.cfg = cfg
        in_dim = cfg.feature_dim + cfg.speaker_dim
        self.input_dim = in_dim
        self.speaker_table = store.create(f"{prefix}.speaker_embedding", np.zeros((cfg.n_speakers, cfg.speaker_dim)))
        self.fwd = GruCell(store, f"{prefix}.fwd", in_dim, cfg.cond_hidden)
        self.bwd = GruCell(store, f"{prefix}.bwd", in_dim, cfg.cond_hidden)
        self.proj_w = store.create(f"{prefix}.proj.w", np.zeros((2 * cfg.cond_hidden, cfg.cond_dim)))
        self.proj_b = store.create(f"{prefix}.proj.b", np.zeros(cfg.cond_dim))

    def init(self, rng):
        dt = self.proj_w.dtype
        self.speaker_table.data = rng.uniform(-1, 1, size=self.speaker_table.shape).astype(dt)
        self.fwd.init(rng)
        self.bwd.init(rng)
        self.proj_w.data = glorot(rng, *self.proj_w.shape, dt)

    def initial_state(self, batch):
        return ConditioningState.zeros(batch, self.cfg.cond_hidden, self.proj_w.dtype)

    def forward(self, features, speaker_ids, state=None):
        """Run the conditioning network over ``features`` [B, F, 5P+2].

        The forward direction starts from ``state.forward``, the backward
        direction from ``state.backward``. Returns the context and a new state
        whose forward part is the final forward hidden vector (detached).
        """
        features = np.asarray(features)
        B, F, D = features.shape
        if D != self.cfg.feature_dim:
            raise ValueError(f"conditioning features have dim {D}, expected {self.cfg.feature_dim}")
        ids = np.asarray(speaker_ids, dtype=np.int64).reshape(B)
        if state is None:
            state = self.initial_state(B)
        spk = nc.embedding_lookup(self.speaker_table, np.repeat(ids[:, None], F, axis=1))
        x = nc.concat([nc.Tensor(features.astype(self.proj_w.dtype)), spk], axis=2)
        hf = self.fwd.run(x, nc.Tensor(state.forward))
        hb = self.bwd.run(x, nc.Tensor(state.backward), reverse=True)
        out = nc.add(nc.matmul(nc.concat([hf, hb], axis=2), self.proj_w), self.proj_b)
        new_state = ConditioningState(
            hf.data[:, -1].copy() if F else state.forward.copy(),
            state.backward.copy(),
            state.backward_resets,
            state.utterance_resets,
        )
        return ConditioningContext(out), new_state

    def context(self, cond_seq, speaker_id):
        """Whole-utterance context for a single ConditioningSequence."""
        if not 0 <= int(speaker_id) < self.cfg.n_speakers:
            raise IndexError(f"speaker id {speaker_id} outside [0, {self.cfg.n_speakers})")
        state = reset_backward_state(self.initial_state(1), PER_UTTERANCE)
        ctx, _ = self.forward(cond_seq.frames[None], [int(speaker_id)], state)
        return ctx
