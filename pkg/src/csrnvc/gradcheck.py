"""Full-model finite-difference check on a micro configuration in float64."""
import time

import numpy as np

from . import numcore as nc
from .config import MICRO_MODEL
from .model import VoiceModel

MICRO_SAMPLES = 32


def micro_problem(seed=0, cfg=MICRO_MODEL, n_samples=MICRO_SAMPLES, batch=2):
    """A float64 micro model with random (non-zero) output layer plus random data."""
    rng = np.random.default_rng(seed)
    model = VoiceModel(cfg, np.float64).init(rng, zero_output=False)
    # zero biases can leave ReLU inputs exactly on the kink, where central
    # differences are meaningless
    for name, p in model.store.items():
        if name.endswith(".b"):
            p.data = rng.normal(scale=0.1, size=p.shape)
    n_frames = n_samples // cfg.tiers.top_frame
    feats = rng.normal(size=(batch, n_frames, cfg.feature_dim))
    speakers = np.arange(batch) % cfg.n_speakers
    codes = rng.integers(0, cfg.levels, size=(batch, n_samples))
    state = model.initial_state(batch)
    state.cond.forward[:] = rng.normal(scale=0.5, size=state.cond.forward.shape)
    state.tiers.top[:] = rng.normal(scale=0.5, size=state.tiers.top.shape)
    state.tiers.mid[:] = rng.normal(scale=0.5, size=state.tiers.mid.shape)
    state.tiers.history[:] = rng.integers(0, cfg.levels, size=state.tiers.history.shape)

    def loss():
        return model.chunk_loss(feats, speakers, codes, state)[0]

    return model, loss


def run_gradcheck(seed=0, tolerance=1e-4, h=1e-5):
    """Returns ``(GradCheckReport, seconds)`` covering every parameter."""
    t0 = time.perf_counter()
    model, loss = micro_problem(seed)
    report = nc.finite_diff_check(loss, model.store, h=h, tolerance=tolerance)
    return report, time.perf_counter() - t0
