"""Frame-level conditioning features: phoneme context one-hots, per-speaker
normalized log-F0 and a voicing flag.

The default frame period is 5 ms (200 Hz). Profiles with a lower audio rate
keep 80 samples per frame, so the period follows as ``80 / sample_rate``.
"""
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, DegenerateStatsError, FormatError, ParseError

PAD = "PAD"
SIL = "SIL"
DEFAULT_FRAME_PERIOD = 0.005
CONTEXT = 5  # previous two, current, next two
_TIME_TOL = 1e-6


@dataclass(frozen=True)
class PhonemeInventory:
    symbols: tuple

    def __post_init__(self):
        syms = tuple(self.symbols)
        object.__setattr__(self, "symbols", syms)
        if len(set(syms)) != len(syms):
            raise ValueError("phoneme inventory has duplicate symbols")
        if not syms or syms[0] != PAD:
            raise ValueError("PAD must be the first phoneme symbol")
        if SIL not in syms:
            raise ValueError("phoneme inventory must contain SIL")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(syms)})

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol):
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"unknown phoneme symbol {symbol!r}") from None

    def __contains__(self, symbol):
        return symbol in self._index

    @property
    def feature_dim(self):
        return CONTEXT * len(self) + 2

    @classmethod
    def read(cls, path):
        lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls(tuple(ln for ln in lines if ln))

    def write(self, path):
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    symbol: str


class PhonemeAlignment:
    """Sorted, contiguous phoneme segments tiling [0, duration]."""

    def __init__(self, segments, inventory=None):
        segs = [s if isinstance(s, Segment) else Segment(float(s[0]), float(s[1]), str(s[2])) for s in segments]
        if not segs:
            raise AlignmentError("alignment has no segments")
        if abs(segs[0].start) > _TIME_TOL:
            raise AlignmentError(f"alignment starts at {segs[0].start}, expected 0")
        for i, s in enumerate(segs):
            if not s.start < s.end:
                raise AlignmentError(f"segment {i} has start {s.start} >= end {s.end}")
            if i and abs(s.start - segs[i - 1].end) > _TIME_TOL:
                kind = "overlaps" if s.start < segs[i - 1].end else "leaves a gap after"
                raise AlignmentError(f"segment {i} {kind} segment {i - 1}")
            if inventory is not None and s.symbol not in inventory:
                raise AlignmentError(f"segment {i}: unknown phoneme symbol {s.symbol!r}")
        self.segments = segs
        self._ends = np.array([s.end for s in segs])

    def __len__(self):
        return len(self.segments)

    @property
    def duration(self):
        return self.segments[-1].end

    def segment_at(self, t):
        if t < 0 or t > self.duration + _TIME_TOL:
            raise AlignmentError(f"time {t:.6f}s outside utterance [0, {self.duration:.6f}]")
        return min(int(np.searchsorted(self._ends, t, side="right")), len(self.segments) - 1)

    def to_lines(self):
        return [f"{s.start:.6f}\t{s.end:.6f}\t{s.symbol}" for s in self.segments]


@dataclass
class F0Contour:
    f0_hz: np.ndarray
    voiced: np.ndarray
    frame_period_sec: float = DEFAULT_FRAME_PERIOD

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64).reshape(-1)
        self.voiced = np.asarray(self.voiced, dtype=bool).reshape(-1)
        if self.f0_hz.shape != self.voiced.shape:
            raise ValueError("f0 and voiced flags differ in length")
        if np.any(self.f0_hz < 0):
            raise ValueError("f0 must be non-negative")
        if np.any(self.voiced & ~(self.f0_hz > 0)):
            raise ValueError("voiced frames need f0 > 0")

    def __len__(self):
        return self.f0_hz.size

    @property
    def log_f0(self):
        """ln f0 on voiced frames, NaN elsewhere."""
        out = np.full(self.f0_hz.shape, np.nan)
        out[self.voiced] = np.log(self.f0_hz[self.voiced])
        return out


@dataclass
class NormalizedContour:
    values: np.ndarray
    voiced: np.ndarray
    frame_period_sec: float = DEFAULT_FRAME_PERIOD

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class SpeakerStats:
    speaker_id: str
    mu: float
    sigma: float
    frame_count: int

    def check(self):
        if not (self.sigma >= 1e-8 and math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise DegenerateStatsError(f"speaker {self.speaker_id}: degenerate log-F0 stats (sigma={self.sigma})")
        return self


@dataclass
class ConditioningSequence:
    frames: np.ndarray  # [F, 5P + 2]
    phoneme_ids: np.ndarray  # [F, 5]
    frame_period_sec: float = DEFAULT_FRAME_PERIOD

    def __len__(self):
        return self.frames.shape[0]

    @property
    def frame_rate_hz(self):
        return 1.0 / self.frame_period_sec

    @property
    def dim(self):
        return self.frames.shape[1]


# ------------------------------------------------------------------ F0 stats


def compute_speaker_stats(contours, speaker_id=""):
    """Population mean and std of voiced ln f0 across all given contours."""
    logs = [np.log(c.f0_hz[c.voiced]) for c in contours]
    values = np.concatenate(logs) if logs else np.empty(0)
    if values.size < 2:
        raise DegenerateStatsError(f"speaker {speaker_id}: need at least 2 voiced frames, got {values.size}")
    mu = float(values.mean())
    sigma = float(values.std())
    if sigma < 1e-8:
        raise DegenerateStatsError(f"speaker {speaker_id}: log-F0 std {sigma:.3g} is degenerate")
    return SpeakerStats(str(speaker_id), mu, sigma, int(values.size))


def normalize_f0(contour, stats):
    stats.check()
    values = np.zeros(len(contour))
    v = contour.voiced
    values[v] = (np.log(contour.f0_hz[v]) - stats.mu) / stats.sigma
    return NormalizedContour(values, v.copy(), contour.frame_period_sec)


def denormalize_f0(values, stats):
    stats.check()
    return np.exp(stats.mu + stats.sigma * np.asarray(values, dtype=np.float64))


# ------------------------------------------------------------- conditioning


def phoneme_context(alignment, frame_index, frame_period=DEFAULT_FRAME_PERIOD):
    """Symbols (prev2, prev1, current, next1, next2) for the frame center."""
    center = (frame_index + 0.5) * frame_period
    if frame_index < 0 or center > alignment.duration + _TIME_TOL:
        raise AlignmentError(f"frame {frame_index} lies outside the utterance")
    k = alignment.segment_at(center)
    out = []
    for j in range(k - 2, k + 3):
        out.append(alignment.segments[j].symbol if 0 <= j < len(alignment) else PAD)
    return tuple(out)


def context_ids(alignment, inventory, n_frames, frame_period=DEFAULT_FRAME_PERIOD):
    """[n_frames, 5] inventory indices of the phoneme context of each frame."""
    seg_ids = np.array([inventory.index(s.symbol) for s in alignment.segments] + [0])
    centers = (np.arange(n_frames) + 0.5) * frame_period
    if n_frames and centers[-1] > alignment.duration + _TIME_TOL:
        raise AlignmentError(f"frame {n_frames - 1} lies outside the utterance")
    cur = np.minimum(np.searchsorted(alignment._ends, centers, side="right"), len(alignment) - 1)
    offsets = cur[:, None] + np.arange(-2, 3)[None, :]
    offsets = np.where((offsets < 0) | (offsets >= len(alignment)), len(alignment), offsets)
    return seg_ids[offsets]


def build_conditioning(alignment, contour, inventory):
    """One 5P+2 vector per frame: five one-hots, normalized log-F0, voicing."""
    period = contour.frame_period_sec
    n_align = int(round(alignment.duration / period))
    if abs(n_align - len(contour)) > 1:
        raise AlignmentError(
            f"alignment spans {n_align} frames but the F0 contour has {len(contour)}"
        )
    n = min(n_align, len(contour))
    ids = context_ids(alignment, inventory, n, period)
    P = len(inventory)
    frames = np.zeros((n, CONTEXT * P + 2))
    rows = np.arange(n)
    for c in range(CONTEXT):
        frames[rows, c * P + ids[:, c]] = 1.0
    voiced = contour.voiced[:n]
    frames[:, -2] = np.where(voiced, contour.values[:n], 0.0)
    frames[:, -1] = voiced
    return ConditioningSequence(frames, ids, period)


# ----------------------------------------------------------------- file I/O


def parse_alignment_file(path, inventory=None):
    path = Path(path)
    segs = []
    for no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 3:
            raise ParseError(path, no, f"expected 'start<TAB>end<TAB>symbol', got {line!r}")
        try:
            start, end = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(path, no, f"bad time value in {line!r}") from None
        sym = parts[2].strip()
        if inventory is not None and sym not in inventory:
            raise ParseError(path, no, f"unknown phoneme symbol {sym!r}")
        if segs and start < segs[-1][1] - _TIME_TOL:
            raise ParseError(path, no, "segment overlaps the previous one")
        segs.append((start, end, sym))
    try:
        return PhonemeAlignment(segs, inventory)
    except AlignmentError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_alignment_file(path, alignment):
    Path(path).write_text("".join(ln + "\n" for ln in alignment.to_lines()), encoding="utf-8")


F0_HEADER = ["frame", "f0_hz", "voiced"]


def parse_f0_file(path, frame_period=DEFAULT_FRAME_PERIOD):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != F0_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(F0_HEADER)}")
        f0, voiced = [], []
        for no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(path, no, f"expected 3 fields, got {len(row)}")
            try:
                frame, hz, flag = int(row[0]), float(row[1]), int(row[2])
            except ValueError:
                raise ParseError(path, no, f"malformed row {row!r}") from None
            if frame != len(f0):
                raise ParseError(path, no, f"frame index {frame}, expected {len(f0)}")
            if flag not in (0, 1) or hz < 0 or not math.isfinite(hz):
                raise ParseError(path, no, f"invalid f0/voiced values {row!r}")
            if flag and hz <= 0:
                raise ParseError(path, no, "voiced frame with f0 <= 0")
            f0.append(hz)
            voiced.append(bool(flag))
    return F0Contour(np.array(f0), np.array(voiced, dtype=bool), frame_period)


def write_f0_file(path, contour):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(F0_HEADER)
        for i, (hz, v) in enumerate(zip(contour.f0_hz, contour.voiced)):
            w.writerow([i, repr(float(hz)), int(v)])


STATS_HEADER = ["speaker_id", "mu", "sigma", "frames"]


def write_stats_file(path, stats_list):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for s in stats_list:
            w.writerow([s.speaker_id, repr(s.mu), repr(s.sigma), s.frame_count])


def read_stats_file(path):
    """Return speaker_id -> SpeakerStats."""
    path = Path(path)
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != STATS_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(STATS_HEADER)}")
        for no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, mu, sigma, n = row[0], float(row[1]), float(row[2]), int(row[3])
            except (ValueError, IndexError):
                raise ParseError(path, no, f"malformed row {row!r}") from None
            out[sid] = SpeakerStats(sid, mu, sigma, n)
    return out
