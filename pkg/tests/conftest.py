import numpy as np
import pytest

from csrnvc.config import MICRO_MODEL, ModelConfig, TierConfig, TrainConfig
from csrnvc.model import VoiceModel


@pytest.fixture
def micro_cfg():
    return MICRO_MODEL


def make_model(cfg=MICRO_MODEL, seed=0, dtype=np.float64, zero_output=False):
    return VoiceModel(cfg, dtype).init(np.random.default_rng(seed), zero_output=zero_output)


def random_batch(cfg, n_frames, batch=1, seed=1):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(batch, n_frames, cfg.feature_dim))
    codes = rng.integers(0, cfg.levels, size=(batch, n_frames * cfg.tiers.top_frame))
    speakers = np.arange(batch) % cfg.n_speakers
    return feats, speakers, codes


SMALL_MODEL = ModelConfig(
    tiers=TierConfig(frame_sizes=(80, 8), rnn_hidden=(16, 16), mlp_widths=(16, 16, 16)),
    sample_embed_dim=8,
    cond_hidden=16,
    cond_dim=16,
)


@pytest.fixture(scope="session")
def small_trained(tmp_path_factory):
    """Tiny synthetic corpus plus a desk-rate model trained briefly on it."""
    from csrnvc.dataset import compute_all_stats, load_items, read_manifest, speaker_index
    from csrnvc.synthcorpus import default_inventory, synth_corpus
    from csrnvc.trainer import Trainer, save_checkpoint

    root = tmp_path_factory.mktemp("small")
    entries = read_manifest(synth_corpus(root / "corpus", clips_per_speaker=2, clip_seconds=0.4, seed=2))
    inv = default_inventory()
    stats = compute_all_stats(entries, SMALL_MODEL.frame_period)
    cfg = SMALL_MODEL
    items = load_items(entries, inv, stats, cfg)
    tr = Trainer(cfg, TrainConfig(steps=150, seed=0, learning_rate=0.005), items,
                 meta={"inventory": list(inv.symbols), "speakers": list(speaker_index(entries))})
    tr.run()
    save_checkpoint(root / "small.csrn", tr)
    return dict(root=root, entries=entries, inventory=inv, stats=stats, model=tr.model,
                checkpoint=root / "small.csrn")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
