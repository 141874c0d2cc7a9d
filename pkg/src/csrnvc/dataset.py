"""Manifest-driven corpus loading: WAV + alignment + F0 -> training items."""
import csv
from dataclasses import dataclass
from pathlib import Path

from .audiocodec import mulaw_encode, wav_read
from .errors import FormatError
from .featurizer import (
    build_conditioning,
    compute_speaker_stats,
    normalize_f0,
    parse_alignment_file,
    parse_f0_file,
)
from .synthcorpus import MANIFEST_HEADER
from .trainer import align_item


@dataclass
class ManifestEntry:
    speaker_id: str
    clip_id: str
    wav: Path
    align: Path
    f0: Path
    seconds: float


def read_manifest(path):
    path = Path(path)
    root = path.parent
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        out = []
        for no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise FormatError(f"{path}:{no}: expected {len(MANIFEST_HEADER)} fields")
            sid, cid, wav, align, f0, sec = row
            out.append(ManifestEntry(sid, cid, root / wav, root / align, root / f0, float(sec)))
    return out


def speaker_index(entries):
    """Stable speaker_id -> embedding row mapping (sorted ids)."""
    ids = sorted({e.speaker_id for e in entries}, key=lambda s: (len(s), s))
    return {sid: i for i, sid in enumerate(ids)}


def compute_all_stats(entries, frame_period):
    by_spk = {}
    for e in entries:
        by_spk.setdefault(e.speaker_id, []).append(parse_f0_file(e.f0, frame_period))
    return {sid: compute_speaker_stats(cs, sid) for sid, cs in sorted(by_spk.items())}


def featurize_entry(entry, inventory, stats, frame_period):
    alignment = parse_alignment_file(entry.align, inventory)
    contour = parse_f0_file(entry.f0, frame_period)
    return build_conditioning(alignment, normalize_f0(contour, stats), inventory)


def load_items(entries, inventory, stats, model_cfg, speakers=None):
    """Training items for every manifest entry, in manifest order."""
    speakers = speakers or speaker_index(entries)
    fs3 = model_cfg.tiers.top_frame
    items = []
    for e in entries:
        clip = wav_read(e.wav)
        if clip.sample_rate_hz != model_cfg.sample_rate_hz:
            raise FormatError(f"{e.wav}: sample rate {clip.sample_rate_hz}, model expects {model_cfg.sample_rate_hz}")
        cond = featurize_entry(e, inventory, stats[e.speaker_id], model_cfg.frame_period)
        items.append(align_item(speakers[e.speaker_id], mulaw_encode(clip.samples), cond.frames, fs3, e.clip_id))
    return items
