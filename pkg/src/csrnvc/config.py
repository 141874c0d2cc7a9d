"""Model/training configuration, named profiles and the run-config schema."""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class TierConfig:
    """Three tiers: frame RNN (FS3), subframe RNN (FS2), sample MLP (FS1 = 1).

    The MLP sees the previous FS2 codes.
    """

    frame_sizes: tuple = (80, 8)
    rnn_hidden: tuple = (64, 64)
    mlp_widths: tuple = (64, 64, 64)

    @property
    def top_frame(self):
        return self.frame_sizes[0]

    @property
    def mid_frame(self):
        return self.frame_sizes[1]

    @property
    def ratio_top(self):
        return self.frame_sizes[0] // self.frame_sizes[1]

    @property
    def ratio_mid(self):
        return self.frame_sizes[1]

    def validate(self):
        fs3, fs2 = self.frame_sizes
        if fs2 < 1 or fs3 % fs2:
            raise ConfigError(f"frame size {fs3} is not a multiple of {fs2}")
        if len(self.rnn_hidden) != 2 or len(self.mlp_widths) != 3:
            raise ConfigError("need two RNN hidden sizes and three MLP widths")
        if min(self.rnn_hidden + self.mlp_widths) < 1:
            raise ConfigError("layer sizes must be positive")


@dataclass(frozen=True)
class ModelConfig:
    tiers: TierConfig = field(default_factory=TierConfig)
    levels: int = 256
    sample_embed_dim: int = 16
    cond_hidden: int = 64
    cond_dim: int = 64
    speaker_dim: int = 16
    n_speakers: int = 4
    n_phonemes: int = 10
    sample_rate_hz: int = 4000

    @property
    def feature_dim(self):
        return 5 * self.n_phonemes + 2

    @property
    def frame_period(self):
        return self.tiers.top_frame / self.sample_rate_hz

    def validate(self):
        self.tiers.validate()
        if self.levels != 256:
            raise ConfigError(f"levels must be 256, got {self.levels}")
        if self.speaker_dim != 16:
            raise ConfigError("speaker embedding dimension is fixed at 16")
        if self.sample_rate_hz % self.tiers.top_frame:
            raise ConfigError(f"sample rate {self.sample_rate_hz} not divisible by {self.tiers.top_frame}")
        for name in ("sample_embed_dim", "cond_hidden", "cond_dim", "n_speakers", "n_phonemes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        d["tiers"] = {k: list(v) for k, v in d["tiers"].items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        _reject_unknown(cls, d, "model")
        tiers = d.pop("tiers", {})
        _reject_unknown(TierConfig, tiers, "model.tiers")
        t = TierConfig(**{k: tuple(v) for k, v in tiers.items()})
        return cls(tiers=t, **d).validate()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 4
    tbptt_len: int = 2000
    clip_seconds: float = 1.0
    steps: int = 2000
    epochs: int = 0
    seed: int = 0
    profile: str = "desk"
    grad_clip: float = 1.0  # 0 disables
    jobs: int = 1
    checkpoint_every: int = 0
    timing: bool = False  # real wall_ms in metrics; off keeps metrics byte-reproducible

    def validate(self, model_cfg=None):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.jobs < 1:
            raise ConfigError("batch_size and jobs must be >= 1")
        if model_cfg is not None and self.tbptt_len % model_cfg.tiers.top_frame:
            raise ConfigError(f"tbptt_len {self.tbptt_len} not divisible by {model_cfg.tiers.top_frame}")
        if self.steps < 0 or self.epochs < 0 or self.grad_clip < 0:
            raise ConfigError("steps, epochs and grad_clip must be non-negative")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d, "train")
        return cls(**d)


def _reject_unknown(cls, d, where):
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"unknown {where} keys: {', '.join(extra)}")


PROFILES = {
    "desk": (
        ModelConfig(),
        TrainConfig(),
    ),
    "paper": (
        ModelConfig(
            tiers=TierConfig(frame_sizes=(80, 8), rnn_hidden=(1024, 1024), mlp_widths=(1024, 1024, 256)),
            sample_embed_dim=256,
            cond_hidden=1024,
            cond_dim=256,
            n_phonemes=44,
            sample_rate_hz=16000,
        ),
        TrainConfig(batch_size=32, tbptt_len=8000, clip_seconds=4.0, profile="paper"),
    ),
}

MICRO_MODEL = ModelConfig(
    tiers=TierConfig(frame_sizes=(4, 2), rnn_hidden=(8, 8), mlp_widths=(8, 8, 8)),
    sample_embed_dim=4,
    cond_hidden=8,
    cond_dim=8,
    n_speakers=2,
    n_phonemes=4,
    sample_rate_hz=400,
)


def profile(name):
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}") from None


RUN_KEYS = {"profile", "seed", "model", "train", "paths"}
PATH_KEYS = {"corpus", "out", "checkpoint", "stats", "inventory", "metrics"}


def load_run_config(path):
    """Parse and validate a run-config JSON document.

    Returns ``(model_cfg, train_cfg, paths)``; the profile supplies defaults
    that the document's ``model`` and ``train`` sections override.
    """
    return run_config_from_dict(read_run_config(path))


def read_run_config(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    return doc


def run_config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    extra = sorted(set(doc) - RUN_KEYS)
    if extra:
        raise ConfigError(f"unknown config keys: {', '.join(extra)}")
    prof = doc.get("profile", "desk")
    model_cfg, train_cfg = profile(prof)
    model_doc = doc.get("model", {})
    if not isinstance(model_doc, dict):
        raise ConfigError("'model' must be an object")
    merged = model_cfg.to_dict()
    tiers = dict(merged["tiers"], **model_doc.get("tiers", {}))
    merged.update({k: v for k, v in model_doc.items() if k != "tiers"})
    merged["tiers"] = tiers
    try:
        model_cfg = ModelConfig.from_dict(merged)
        train_doc = dict(train_cfg.to_dict(), profile=prof, **doc.get("train", {}))
        if "seed" in doc:
            train_doc["seed"] = doc["seed"]
        train_cfg = TrainConfig.from_dict(train_doc).validate(model_cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    paths = doc.get("paths", {})
    bad = sorted(set(paths) - PATH_KEYS)
    if bad:
        raise ConfigError(f"unknown paths keys: {', '.join(bad)}")
    return model_cfg, train_cfg, dict(paths)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
