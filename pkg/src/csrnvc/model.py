"""The conditioning network and the SampleRNN tiers sharing one parameter store."""
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .condnet import PER_GRADIENT_STEP, CondNet, ConditioningState, reset_backward_state
from .srnn import SampleRNN, TierState


@dataclass
class StreamState:
    """Everything carried from one TBPTT chunk of a clip to the next."""

    cond: ConditioningState
    tiers: TierState

    def copy(self):
        c = self.cond
        return StreamState(
            ConditioningState(c.forward.copy(), c.backward.copy(), c.backward_resets, c.utterance_resets),
            self.tiers.copy(),
        )


class VoiceModel:
    def __init__(self, cfg, dtype=np.float32):
        self.cfg = cfg.validate()
        self.store = nc.ParameterStore(dtype)
        self.condnet = CondNet(self.store, cfg)
        self.srnn = SampleRNN(self.store, cfg)

    @property
    def dtype(self):
        return self.store.dtype

    def init(self, rng, zero_output=True):
        self.condnet.init(rng)
        self.srnn.init(rng, zero_output=zero_output)
        return self

    def initial_state(self, batch):
        return StreamState(self.condnet.initial_state(batch), self.srnn.initial_state(batch))

    def chunk_loss(self, features, speaker_ids, codes, state, mask=None, normalizer=None):
        """Bits/sample on one TBPTT chunk.

        The backward conditioning direction is reset before the chunk (one
        reset per gradient step); forward conditioning and tier states carry
        over through the returned state.
        """
        cond_state = reset_backward_state(state.cond, PER_GRADIENT_STEP)
        ctx, cond_state = self.condnet.forward(features, speaker_ids, cond_state)
        loss, tiers = self.srnn.teacher_forced_forward(codes, ctx, state.tiers, mask, normalizer)
        return loss, StreamState(cond_state, tiers)

    def converted(self, dtype):
        """Copy of this model with parameters cast to ``dtype``."""
        other = VoiceModel(self.cfg, dtype)
        for name, p in self.store.items():
            other.store.set_data(name, p.data)
        return other
