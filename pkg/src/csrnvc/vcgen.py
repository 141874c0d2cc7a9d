"""Voice conversion: source content + target speaker embedding -> waveform."""
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audiocodec import AudioClip, mulaw_decode, wav_write
from .errors import CsrnvcError, DimensionError, NumericError
from .featurizer import build_conditioning, normalize_f0, parse_alignment_file, parse_f0_file
from .srnn import InferenceSession

log = logging.getLogger(__name__)

STATS_HEADER = ["clip", "samples", "wall_ms", "samples_per_sec", "entropy_bits"]


@dataclass
class ConversionRequest:
    align_path: Path
    f0_path: Path
    source_stats: object  # SpeakerStats of the source speaker
    target_speaker: int
    out_path: Path = None
    seed: int = 0
    temperature: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not self.name:
            self.name = Path(self.out_path or self.align_path).stem


@dataclass
class Generated:
    name: str
    codes: np.ndarray
    clip: AudioClip
    entropy_bits: float
    wall_ms: float = 0.0
    counters: object = None


@dataclass
class BatchResult:
    outputs: list = field(default_factory=list)
    errors: list = field(default_factory=list)  # (name, message)


def extract_content(alignment, f0, source_stats, inventory):
    """Conditioning features for a source utterance, normalized with the source stats.

    Same path as training featurization, so a training clip with its own
    speaker's stats reproduces its training features exactly.
    """
    return build_conditioning(alignment, normalize_f0(f0, source_stats.check()), inventory)


def load_content(request, inventory, frame_period):
    alignment = parse_alignment_file(request.align_path, inventory)
    contour = parse_f0_file(request.f0_path, frame_period)
    return extract_content(alignment, contour, request.source_stats, inventory)


def _sample(logits, temperature, rngs):
    """One code per row: inverse-CDF categorical draw, exact argmax at temperature 0."""
    z = logits.astype(np.float64)
    if temperature == 0:
        codes = np.argmax(z, axis=1)
        scaled = z
    else:
        scaled = z / temperature
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    p = np.exp(scaled)
    p /= p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(p > 0, p * np.log2(p), 0.0), axis=1)
    if temperature != 0:
        cdf = np.cumsum(p, axis=1)
        u = np.array([r.random() for r in rngs])
        codes = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), p.shape[1] - 1)
    return codes, ent


def generate(model, contents, speakers, seeds, temperature=1.0):
    """Autoregressively generate every utterance of a batch in lockstep.

    ``contents`` are ConditioningSequences (one per utterance). Each
    utterance has its own Philox stream seeded from its seed, so a row's
    draws do not depend on which other rows share the batch. Returns
    Generated records with exactly ``frames * FS3`` samples each.
    """
    if not contents:
        return []
    fs3 = model.cfg.tiers.top_frame
    if any(len(c) == 0 for c in contents):
        raise DimensionError("cannot generate from an empty conditioning sequence")
    ctxs = [model.condnet.context(c, s).frames.data[0] for c, s in zip(contents, speakers)]
    n_frames = [len(c) for c in ctxs]
    F = max(n_frames)
    L = np.zeros((len(ctxs), F, ctxs[0].shape[1]), dtype=model.dtype)
    for b, c in enumerate(ctxs):
        L[b, :len(c)] = c
    session = InferenceSession(model.srnn, L)
    rngs = [np.random.Generator(np.random.Philox(int(s))) for s in seeds]
    T = F * fs3
    codes = np.empty((len(ctxs), T), dtype=np.int64)
    ents = np.empty((len(ctxs), T))
    for t in range(T):
        logits = session.next_logits()
        if not np.all(np.isfinite(logits)):
            raise NumericError(f"non-finite logits at sample {t}")
        c, ent = _sample(logits, temperature, rngs)
        codes[:, t] = c
        ents[:, t] = ent
        session.push(c)
    out = []
    sr = model.cfg.sample_rate_hz
    for b, nf in enumerate(n_frames):
        n = nf * fs3
        out.append(Generated("", codes[b, :n].copy(), AudioClip(mulaw_decode(codes[b, :n]), sr),
                             float(ents[b, :n].mean()), counters=session.counters))
    return out


def convert(model, requests, inventory, stats_path=None, batch_size=16, timing=True):
    """Batch driver: one WAV per request plus a generation-stats CSV.

    Per-request failures are logged and collected; the remaining requests
    still run. Requests are batched by temperature.
    """
    result = BatchResult()
    ready = []
    for req in requests:
        try:
            _check_speaker(model, req.target_speaker)
            ready.append((req, load_content(req, inventory, model.cfg.frame_period)))
        except (CsrnvcError, OSError, ValueError, IndexError) as exc:
            log.error("%s: %s", req.name, exc)
            result.errors.append((req.name, str(exc)))
    groups = {}
    for req, content in ready:
        groups.setdefault(req.temperature, []).append((req, content))
    for temp, members in groups.items():
        for start in range(0, len(members), batch_size):
            chunk = members[start:start + batch_size]
            t0 = time.perf_counter()
            try:
                gens = generate(model, [c for _, c in chunk], [r.target_speaker for r, _ in chunk],
                                [r.seed for r, _ in chunk], temp)
            except CsrnvcError as exc:
                for r, _ in chunk:
                    result.errors.append((r.name, str(exc)))
                continue
            wall = (time.perf_counter() - t0) * 1000.0 / len(chunk)
            for (req, _), g in zip(chunk, gens):
                g.name, g.wall_ms = req.name, wall
                if req.out_path is not None:
                    Path(req.out_path).parent.mkdir(parents=True, exist_ok=True)
                    wav_write(req.out_path, g.clip)
                result.outputs.append(g)
    if stats_path is not None:
        write_generation_stats(stats_path, result.outputs, timing)
    return result


def _check_speaker(model, speaker):
    if not 0 <= int(speaker) < model.cfg.n_speakers:
        raise IndexError(f"target speaker {speaker} outside [0, {model.cfg.n_speakers})")


def write_generation_stats(path, outputs, timing=True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for g in outputs:
            n = len(g.codes)
            wall = g.wall_ms if timing else 0.0
            rate = n / (wall / 1000.0) if wall > 0 else 0.0
            w.writerow([g.name, n, f"{wall:.1f}", f"{rate:.1f}", f"{g.entropy_bits:.4f}"])
