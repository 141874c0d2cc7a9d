"""All-pairs conversion on a synthetic corpus, scored against its templates."""
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audiocodec import wav_read
from .dataset import read_manifest, speaker_index
from .errors import CsrnvcError
from .featurizer import parse_f0_file
from .synthcorpus import eval_conversion
from .vcgen import ConversionRequest, convert

RESULT_HEADER = ["clip", "source_speaker", "target_speaker", "timbre_score", "cos_target", "cos_source",
                 "f0_rel_error", "voicing_agreement", "wav"]


@dataclass
class PlannedConversion:
    entry: object  # ManifestEntry of the source clip
    source: str
    target: str
    name: str
    seed: int


@dataclass
class PairResult:
    plan: PlannedConversion
    report: object  # ConversionReport, or None when measurement failed
    wav: Path
    error: str = ""


def plan_pairs(entries, clips_per_pair=5, seed=0, speakers=None):
    """Every ordered (source, target) pair over the first clips of each source speaker."""
    speakers = speakers or speaker_index(entries)
    by_spk = {}
    for e in entries:
        by_spk.setdefault(e.speaker_id, []).append(e)
    plan = []
    for src in speakers:
        for tgt in speakers:
            if src == tgt:
                continue
            for e in by_spk[src][:clips_per_pair]:
                name = f"{e.clip_id}_to{tgt}"
                plan.append(PlannedConversion(e, src, tgt, name, seed + len(plan)))
    return plan


def run_pairs(model, plan, inventory, stats, out_dir, temperature=1.0, batch_size=64, timing=True):
    """Generate every planned conversion into ``out_dir``. Returns the vcgen BatchResult."""
    out_dir = Path(out_dir)
    speakers = speaker_index([p.entry for p in plan])
    requests = [
        ConversionRequest(p.entry.align, p.entry.f0, stats[p.source], speakers[p.target],
                          out_dir / f"{p.name}.wav", p.seed, temperature, p.name)
        for p in plan
    ]
    return convert(model, requests, inventory, out_dir / "generation.csv", batch_size=batch_size, timing=timing)


def score_pairs(plan, out_dir, templates, stats, frame_period):
    """Measure each converted WAV against its target template and mapped contour."""
    out_dir = Path(out_dir)
    results = []
    for p in plan:
        wav = out_dir / f"{p.name}.wav"
        try:
            clip = wav_read(wav)
            contour = parse_f0_file(p.entry.f0, frame_period)
            rep = eval_conversion(clip, contour, stats[p.source], templates[int(p.target)],
                                  stats[p.target], templates[int(p.source)])
            results.append(PairResult(p, rep, wav))
        except (CsrnvcError, OSError) as exc:
            results.append(PairResult(p, None, wav, str(exc)))
    return results


@dataclass
class Summary:
    n: int
    closer_fraction: float
    median_f0_error: float
    mean_voicing: float
    failures: int


def summarize(results):
    """Headline numbers; failed measurements count against every criterion."""
    ok = [r.report for r in results if r.report is not None]
    n = len(results)
    if not n:
        return Summary(0, 0.0, float("nan"), 0.0, 0)
    closer = sum(r.closer_to_target for r in ok) / n
    f0 = [r.f0_rel_error for r in ok] + [1.0] * (n - len(ok))
    voicing = [r.voicing_agreement for r in ok] + [0.0] * (n - len(ok))
    return Summary(n, closer, float(np.median(f0)), float(np.mean(voicing)), n - len(ok))


def write_results(path, results):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for r in results:
            p, rep = r.plan, r.report
            if rep is None:
                w.writerow([p.name, p.source, p.target, "", "", "", "", "", r.wav.name])
                continue
            w.writerow([p.name, p.source, p.target, f"{rep.timbre_score:.6f}", f"{rep.cos_target:.6f}",
                        f"{rep.cos_source:.6f}", f"{rep.f0_rel_error:.6f}", f"{rep.voicing_agreement:.6f}",
                        r.wav.name])


def corpus_paths(corpus_dir):
    root = Path(corpus_dir)
    return root / "manifest.csv", root / "phonemes.txt", root / "templates.json"


def load_entries(corpus_dir):
    return read_manifest(corpus_paths(corpus_dir)[0])
