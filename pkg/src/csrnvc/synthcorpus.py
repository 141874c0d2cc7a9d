"""Deterministic multi-speaker pseudo-speech corpus and objective evaluators.

A speaker is a harmonic amplitude profile (its "timbre") plus an F0 range.
A pseudo-phoneme is a harmonic emphasis mask. Waveforms are sums of the first
eight harmonics of a smooth random F0 contour, so every clip ships with exact
ground-truth alignment and pitch files.
"""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .audiocodec import AudioClip, peak_normalize, wav_write
from .errors import InsufficientVoicingError
from .featurizer import (
    PAD,
    SIL,
    DEFAULT_FRAME_PERIOD,
    F0Contour,
    PhonemeAlignment,
    PhonemeInventory,
    denormalize_f0,
    normalize_f0,
    write_alignment_file,
    write_f0_file,
)

log = logging.getLogger(__name__)

N_HARMONICS = 8
ANALYSIS_RATE = 16000
MANIFEST_HEADER = ["speaker_id", "clip_id", "wav", "align", "f0", "seconds"]


@dataclass(frozen=True)
class SpeakerTemplate:
    speaker_id: int
    f0_low: float
    f0_high: float
    profile: tuple

    def __post_init__(self):
        p = np.asarray(self.profile, dtype=np.float64)
        if p.shape != (N_HARMONICS,) or np.any(p < 0) or p.sum() <= 0:
            raise ValueError(f"speaker {self.speaker_id}: profile needs {N_HARMONICS} non-negative values")
        if not 0 < self.f0_low < self.f0_high:
            raise ValueError(f"speaker {self.speaker_id}: bad F0 range {self.f0_low}..{self.f0_high}")
        object.__setattr__(self, "profile", tuple(float(v) for v in p / p.sum()))

    @property
    def amplitudes(self):
        return np.array(self.profile)


@dataclass(frozen=True)
class PseudoPhoneme:
    symbol: str
    mask: tuple
    voiced: bool = True

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        if m.shape != (N_HARMONICS,) or np.any(m < 0):
            raise ValueError(f"phoneme {self.symbol}: mask needs {N_HARMONICS} non-negative values")
        if self.voiced and not np.any(m > 0):
            raise ValueError(f"voiced phoneme {self.symbol} has no active harmonic")


DEFAULT_TEMPLATES = (
    SpeakerTemplate(0, 90.0, 130.0, (0.40, 0.25, 0.15, 0.08, 0.05, 0.04, 0.02, 0.01)),
    SpeakerTemplate(1, 110.0, 160.0, (0.08, 0.36, 0.30, 0.10, 0.06, 0.04, 0.03, 0.03)),
    SpeakerTemplate(2, 150.0, 205.0, (0.08, 0.07, 0.10, 0.32, 0.26, 0.10, 0.05, 0.02)),
    SpeakerTemplate(3, 165.0, 230.0, (0.05, 0.04, 0.05, 0.07, 0.14, 0.26, 0.22, 0.17)),
)

_EMPHASIS = ("11110000", "00001111", "11001100", "00110011", "10101010", "01010101", "10011001", "01100110")
DEFAULT_PHONEMES = (PseudoPhoneme(SIL, (0.0,) * N_HARMONICS, voiced=False),) + tuple(
    PseudoPhoneme(sym, tuple(1.0 if b == "1" else 0.5 for b in bits))
    for sym, bits in zip(("a", "e", "i", "o", "u", "m", "n", "l"), _EMPHASIS)
)


def default_inventory(phonemes=DEFAULT_PHONEMES):
    return PhonemeInventory((PAD,) + tuple(p.symbol for p in phonemes))


def cosine(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0


def check_templates(templates, limit=0.8):
    """Raise if any two speaker profiles are too similar to tell apart."""
    for i, a in enumerate(templates):
        for b in templates[i + 1:]:
            c = cosine(a.profile, b.profile)
            if not c < limit:
                raise ValueError(f"speakers {a.speaker_id} and {b.speaker_id} have profile cosine {c:.3f} >= {limit}")


# ------------------------------------------------------------------ synthesis


@dataclass
class SynthClip:
    audio: AudioClip
    alignment: PhonemeAlignment
    f0: F0Contour


def _fit_durations(rng, n_total, lo, hi):
    """Frame counts in [lo, hi] summing exactly to ``n_total``."""
    if n_total <= hi:
        return [n_total]
    durs = []
    while sum(durs) < n_total:
        durs.append(int(rng.integers(lo, hi + 1)))
    excess = sum(durs) - n_total
    if excess > sum(d - lo for d in durs):
        # cannot shrink enough: drop the last draw and stretch the rest instead
        durs.pop()
        excess = sum(durs) - n_total
    i = len(durs) - 1
    while excess > 0:  # shrink from the end
        take = min(excess, durs[i] - lo)
        durs[i] -= take
        excess -= take
        i -= 1
    i = len(durs) - 1
    while excess < 0:  # stretch from the end
        give = min(-excess, hi - durs[i])
        durs[i] += give
        excess += give
        i -= 1
    return durs


def random_alignment(rng, phonemes, seconds, frame_period, min_dur=0.05, max_dur=0.25, sil_prob=0.1):
    """Random segment sequence on the frame grid, framed by silence.

    Every segment lasts between ``min_dur`` and ``max_dur`` (rounded inward
    to whole frames) unless the whole clip is shorter than ``min_dur``.
    """
    n_total = int(round(seconds / frame_period))
    lo = max(1, int(np.ceil(min_dur / frame_period - 1e-9)))
    hi = max(lo, int(np.floor(max_dur / frame_period + 1e-9)))
    voiced = [p.symbol for p in phonemes if p.voiced]
    durs = _fit_durations(rng, n_total, lo, hi)
    syms = []
    for k in range(len(durs)):
        if k == 0 or k == len(durs) - 1 or (rng.random() < sil_prob and syms[-1] != SIL):
            sym = SIL
        else:
            choices = [v for v in voiced if not syms or v != syms[-1]]
            sym = choices[rng.integers(len(choices))]
        syms.append(sym)
    if len(syms) > 1 and syms[-2] == SIL:  # no two adjacent silences at the end
        syms[-2] = next(v for v in voiced if len(syms) < 3 or v != syms[-3])
    edges = np.concatenate([[0], np.cumsum(durs)])
    return PhonemeAlignment([(a * frame_period, b * frame_period, s) for a, b, s in zip(edges[:-1], edges[1:], syms)])


def smooth_contour(rng, template, n_frames, frame_period):
    """Slowly varying F0 in Hz for every frame, inside the speaker's range."""
    t = (np.arange(n_frames) + 0.5) * frame_period
    f1, f2 = rng.uniform(0.2, 0.6), rng.uniform(0.5, 1.2)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    pos = rng.uniform(0.3, 0.7) + 0.2 * np.sin(2 * np.pi * f1 * t + p1) + 0.08 * np.sin(2 * np.pi * f2 * t + p2)
    pos = np.clip(pos, 0.0, 1.0)
    return template.f0_low * (template.f0_high / template.f0_low) ** pos


def render(template, phonemes, alignment, frame_f0, sample_rate, frame_period, smooth_sec=0.005):
    """Sum harmonics of the frame-rate F0 with speaker x phoneme amplitudes."""
    by_symbol = {p.symbol: p for p in phonemes}
    n = int(round(alignment.duration * sample_rate))
    t = np.arange(n) / sample_rate
    centers = (np.arange(len(frame_f0)) + 0.5) * frame_period
    f0 = np.interp(t, centers, frame_f0)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    amps = np.zeros((n, N_HARMONICS))
    prof = template.amplitudes
    for seg in alignment.segments:
        a, b = int(round(seg.start * sample_rate)), int(round(seg.end * sample_rate))
        ph = by_symbol[seg.symbol]
        if ph.voiced:
            amps[a:b] = prof * np.asarray(ph.mask)
    width = max(1, int(round(smooth_sec * sample_rate)))
    if width > 1:
        kernel = np.hanning(width + 2)[1:-1]
        kernel /= kernel.sum()
        amps = np.stack([np.convolve(amps[:, k], kernel, mode="same") for k in range(N_HARMONICS)], axis=1)
    out = np.zeros(n)
    dropped = 0
    for k in range(1, N_HARMONICS + 1):
        ok = k * f0 < sample_rate / 2
        dropped += int((~ok).any())
        out += np.where(ok, amps[:, k - 1] * np.sin(k * phase), 0.0)
    if dropped:
        log.info("dropped harmonics above Nyquist in %d harmonic tracks", dropped)
    return out


def synth_clip(template, rng, seconds, sample_rate, phonemes=DEFAULT_PHONEMES, frame_period=None, alignment=None):
    frame_period = frame_period or 80 / sample_rate
    if alignment is None:
        alignment = random_alignment(rng, phonemes, seconds, frame_period)
    n_frames = int(round(alignment.duration / frame_period))
    frame_f0 = smooth_contour(rng, template, n_frames, frame_period)
    wave = render(template, phonemes, alignment, frame_f0, sample_rate, frame_period)
    voiced_syms = {p.symbol for p in phonemes if p.voiced}
    centers = (np.arange(n_frames) + 0.5) * frame_period
    voiced = np.array([alignment.segments[alignment.segment_at(c)].symbol in voiced_syms for c in centers], dtype=bool)
    contour = F0Contour(np.where(voiced, frame_f0, 0.0), voiced, frame_period)
    audio = peak_normalize(AudioClip(wave, sample_rate)) if wave.size else AudioClip(wave, sample_rate)
    return SynthClip(audio, alignment, contour)


def synth_tone(f0_hz, profile, seconds, sample_rate):
    """Steady harmonic tone with the given amplitude profile, peak-normalized."""
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    wave = np.zeros_like(t)
    for k, a in enumerate(profile, start=1):
        if k * f0_hz < sample_rate / 2:
            wave += a * np.sin(2 * np.pi * k * f0_hz * t)
    return peak_normalize(AudioClip(wave, sample_rate))


def synth_corpus(out_dir, templates=DEFAULT_TEMPLATES, clips_per_speaker=50, clip_seconds=1.0,
                 sample_rate=4000, seed=0, phonemes=DEFAULT_PHONEMES):
    """Write WAV, alignment and F0 files per clip plus a manifest.

    Also writes ``phonemes.txt`` (inventory) and ``templates.json``.
    Returns the manifest path.
    """
    check_templates(templates)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame_period = 80 / sample_rate
    default_inventory(phonemes).write(out / "phonemes.txt")
    (out / "templates.json").write_text(
        json.dumps([{"speaker_id": t.speaker_id, "f0_low": t.f0_low, "f0_high": t.f0_high,
                     "profile": list(t.profile)} for t in templates], indent=1) + "\n",
        encoding="utf-8",
    )
    streams = np.random.SeedSequence(seed).spawn(len(templates))
    rows = []
    for tmpl, ss in zip(templates, streams):
        rng = np.random.Generator(np.random.Philox(ss))
        for c in range(clips_per_speaker):
            clip = synth_clip(tmpl, rng, clip_seconds, sample_rate, phonemes, frame_period)
            stem = f"spk{tmpl.speaker_id}_{c:04d}"
            wav_write(out / f"{stem}.wav", clip.audio)
            write_alignment_file(out / f"{stem}.lab", clip.alignment)
            write_f0_file(out / f"{stem}.f0.csv", clip.f0)
            rows.append([tmpl.speaker_id, stem, f"{stem}.wav", f"{stem}.lab", f"{stem}.f0.csv",
                         f"{clip.alignment.duration:.6f}"])
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return manifest


def read_templates(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {d["speaker_id"]: SpeakerTemplate(d["speaker_id"], d["f0_low"], d["f0_high"], tuple(d["profile"]))
            for d in doc}


# ----------------------------------------------------------------- analysis


def _frame_centers(n_samples, sample_rate, frame_period):
    n_frames = int(round(n_samples / sample_rate / frame_period))
    return ((np.arange(n_frames) + 0.5) * frame_period * sample_rate).astype(np.int64)


def _frames(x, centers, width):
    half = width // 2
    padded = np.pad(x, (half, width))
    idx = centers[:, None] + np.arange(width)[None, :]
    return padded[idx]


def measure_f0(clip, frame_period=DEFAULT_FRAME_PERIOD, fmin=50.0, fmax=500.0, threshold=0.3, min_rms=0.01):
    """Normalized-autocorrelation pitch track on a ``frame_period`` grid.

    Frames whose best correlation peak is below ``threshold`` or whose RMS is
    below ``min_rms`` are unvoiced. Low-rate audio is upsampled to at least
    16 kHz first so the lag grid resolves strong upper harmonics.
    """
    up = max(1, int(np.ceil(ANALYSIS_RATE / clip.sample_rate_hz)))
    sr = clip.sample_rate_hz * up
    x = resample_poly(clip.samples, up, 1) if up > 1 and len(clip) else clip.samples
    lag_lo = max(1, int(np.floor(sr / fmax)))
    lag_hi = int(np.ceil(sr / fmin))
    width = 2 * lag_hi
    centers = _frame_centers(len(x), sr, frame_period)
    f0 = np.zeros(centers.size)
    voiced = np.zeros(centers.size, dtype=bool)
    if centers.size == 0:
        return F0Contour(f0, voiced, frame_period)
    frames = _frames(x, centers, width)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    lags = np.arange(lag_lo, lag_hi + 1)
    energy = np.cumsum(np.pad(frames ** 2, ((0, 0), (1, 0))), axis=1)
    nccf = np.zeros((centers.size, lags.size))
    for j, lag in enumerate(lags):
        num = np.sum(frames[:, : width - lag] * frames[:, lag:], axis=1)
        e0 = energy[:, width - lag]
        e1 = energy[:, width] - energy[:, lag]
        den = np.sqrt(e0 * e1)
        nccf[:, j] = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    for i in range(centers.size):
        r = nccf[i]
        best = r.max()
        if rms[i] < min_rms or best < threshold:
            continue
        # smallest-lag local peak near the global maximum avoids octave drops
        peaks = [j for j in range(1, lags.size - 1) if r[j] >= r[j - 1] and r[j] >= r[j + 1] and r[j] >= 0.9 * best]
        j = peaks[0] if peaks else int(np.argmax(r))
        shift = 0.0
        if 0 < j < lags.size - 1:
            a, b, c = r[j - 1], r[j], r[j + 1]
            den = a - 2 * b + c
            if den != 0:
                shift = float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))
        f0[i] = sr / (lags[j] + shift)
        voiced[i] = True
    return F0Contour(f0, voiced, frame_period)


def measure_timbre(clip, contour, n_harmonics=N_HARMONICS, window_sec=0.04, min_voiced=0.3):
    """Median harmonic amplitudes over voiced frames, normalized to sum 1."""
    n = len(contour)
    if n == 0 or contour.voiced.mean() < min_voiced:
        raise InsufficientVoicingError(
            f"only {contour.voiced.sum()} of {n} frames voiced; need {min_voiced:.0%}"
        )
    sr = clip.sample_rate_hz
    width = max(8, int(round(window_sec * sr)))
    centers = _frame_centers(len(clip), sr, contour.frame_period_sec)[:n]
    keep = contour.voiced[: centers.size]
    frames = _frames(clip.samples, centers[keep], width)
    f0 = contour.f0_hz[: centers.size][keep]
    win = np.hanning(width)
    n_idx = np.arange(width) - width // 2
    amps = np.zeros((frames.shape[0], n_harmonics))
    for k in range(1, n_harmonics + 1):
        freq = k * f0
        basis = np.exp(-2j * np.pi * freq[:, None] * n_idx[None, :] / sr)
        val = np.abs(np.sum(frames * win * basis, axis=1)) * 2 / win.sum()
        amps[:, k - 1] = np.where(freq < sr / 2, val, 0.0)
    prof = np.median(amps, axis=0)
    s = prof.sum()
    if s <= 0:
        raise InsufficientVoicingError("no harmonic energy in voiced frames")
    return prof / s


@dataclass
class ConversionReport:
    timbre_score: float
    cos_target: float
    cos_source: float
    f0_rel_error: float
    voicing_agreement: float
    profile: tuple

    @property
    def closer_to_target(self):
        return self.timbre_score > 0


def eval_conversion(converted, source_contour, source_stats, target_template, target_stats, source_template):
    """Objective conversion scores against the synthetic ground truth.

    The expected output pitch is the source contour normalized with the
    source stats and mapped back with the target stats.
    """
    period = source_contour.frame_period_sec
    measured = measure_f0(converted, period)
    n = min(len(measured), len(source_contour))
    src_v = source_contour.voiced[:n]
    out_v = measured.voiced[:n]
    voicing = float(np.mean(src_v == out_v)) if n else 0.0
    expected = denormalize_f0(normalize_f0(source_contour, source_stats).values[:n], target_stats)
    both = src_v & out_v
    f0_err = float(np.median(np.abs(measured.f0_hz[:n][both] - expected[both]) / expected[both])) if both.any() else 1.0
    prof = measure_timbre(converted, measured)
    ct = cosine(prof, target_template.profile)
    cs = cosine(prof, source_template.profile)
    return ConversionReport(ct - cs, ct, cs, f0_err, voicing, tuple(float(v) for v in prof))
