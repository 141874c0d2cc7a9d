"""Mu-law companding (mu = 255, 256 codes) and PCM-16 mono WAV I/O."""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

MU = 255
LEVELS = 256
SILENCE_CODE = 128
CLAMP_SLACK = 1e-6


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self):
        return self.samples.size

    @property
    def seconds(self):
        return self.samples.size / self.sample_rate_hz


@dataclass
class QuantizedClip:
    codes: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1)
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= LEVELS):
            raise ValueError("mu-law codes must lie in [0, 255]")

    def __len__(self):
        return self.codes.size


def compand(x):
    """Continuous mu-law curve F(x) = sign(x) ln(1 + mu|x|) / ln(1 + mu)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def mulaw_encode(x):
    """Map samples in [-1, 1] to integer codes in [0, 255].

    Values beyond the range by at most 1e-6 are clamped with a warning; larger
    excursions raise ``ValueError``.
    """
    arr = np.asarray(x, dtype=np.float64)
    over = np.abs(arr) > 1.0
    if over.any():
        worst = float(np.abs(arr).max())
        if worst > 1.0 + CLAMP_SLACK:
            raise ValueError(f"sample magnitude {worst!r} exceeds 1")
        log.warning("clamping %d samples just outside [-1, 1]", int(over.sum()))
        arr = np.clip(arr, -1.0, 1.0)
    codes = _round_half_away((compand(arr) + 1.0) / 2.0 * (LEVELS - 1)).astype(np.int64)
    return codes if codes.ndim else int(codes)


def mulaw_decode(code):
    c = np.asarray(code)
    if c.dtype.kind not in "iu":
        if not np.all(c == np.round(c)):
            raise ValueError("mu-law codes must be integers")
        c = c.astype(np.int64)
    if c.size and (c.min() < 0 or c.max() >= LEVELS):
        raise ValueError(f"mu-law code out of range [0, 255]: {int(c.min()) if c.min() < 0 else int(c.max())}")
    y = 2.0 * c / (LEVELS - 1) - 1.0
    x = np.sign(y) * (np.power(1.0 + MU, np.abs(y)) - 1.0) / MU
    return x if x.ndim else float(x)


# decode table, used on hot paths
DECODE_TABLE = mulaw_decode(np.arange(LEVELS))


def quantize(clip):
    return QuantizedClip(mulaw_encode(clip.samples), clip.sample_rate_hz)


def dequantize(qclip):
    return AudioClip(DECODE_TABLE[qclip.codes], qclip.sample_rate_hz)


def peak_normalize(clip):
    if len(clip) == 0:
        raise ValueError("cannot peak-normalize an empty clip")
    peak = np.abs(clip.samples).max()
    if peak == 0:
        return AudioClip(clip.samples.copy(), clip.sample_rate_hz)
    return AudioClip(clip.samples / peak, clip.sample_rate_hz)


# ------------------------------------------------------------------------ WAV


def wav_bytes(clip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, clip.sample_rate_hz, clip.sample_rate_hz * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    if len(pcm) % 2:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def wav_write(path, clip):
    Path(path).write_bytes(wav_bytes(clip))


def wav_read(path):
    """Read a PCM-16 mono RIFF/WAVE file into an AudioClip."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise FormatError(f"{path}: audio_format={audio_format}, only PCM (1) is supported")
    if channels != 1:
        raise FormatError(f"{path}: num_channels={channels}, only mono is supported")
    if bits != 16:
        raise FormatError(f"{path}: bits_per_sample={bits}, only 16 is supported")
    if rate <= 0:
        raise FormatError(f"{path}: sample_rate={rate}")
    pcm = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)
