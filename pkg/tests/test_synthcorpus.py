import filecmp

import numpy as np
import pytest
from scipy.signal import medfilt

from csrnvc.audiocodec import AudioClip, wav_read
from csrnvc.errors import InsufficientVoicingError
from csrnvc.featurizer import SIL, PhonemeAlignment, compute_speaker_stats, parse_f0_file
from csrnvc.synthcorpus import (
    DEFAULT_PHONEMES,
    DEFAULT_TEMPLATES,
    N_HARMONICS,
    SpeakerTemplate,
    check_templates,
    cosine,
    eval_conversion,
    measure_f0,
    measure_timbre,
    read_templates,
    synth_clip,
    synth_corpus,
    synth_tone,
)

SR = 4000
PERIOD = 80 / SR


def test_templates_are_separable():
    check_templates(DEFAULT_TEMPLATES)
    for i, a in enumerate(DEFAULT_TEMPLATES):
        assert abs(sum(a.profile) - 1) < 1e-12
        for b in DEFAULT_TEMPLATES[i + 1:]:
            assert cosine(a.profile, b.profile) < 0.8
    twin = SpeakerTemplate(9, 100, 120, DEFAULT_TEMPLATES[0].profile)
    with pytest.raises(ValueError):
        check_templates([DEFAULT_TEMPLATES[0], twin])


def test_template_validation():
    with pytest.raises(ValueError):
        SpeakerTemplate(0, 200, 100, (1,) * N_HARMONICS)
    with pytest.raises(ValueError):
        SpeakerTemplate(0, 100, 200, (-1,) + (1,) * (N_HARMONICS - 1))


def test_corpus_is_deterministic_and_self_consistent(tmp_path):
    m1 = synth_corpus(tmp_path / "a", clips_per_speaker=2, clip_seconds=0.5, seed=4)
    m2 = synth_corpus(tmp_path / "b", clips_per_speaker=2, clip_seconds=0.5, seed=4)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors
    assert m1.read_text() == m2.read_text()
    assert set(read_templates(tmp_path / "a" / "templates.json")) == {0, 1, 2, 3}


def test_f0_file_matches_generator(tmp_path):
    rng = np.random.default_rng(0)
    clip = synth_clip(DEFAULT_TEMPLATES[1], rng, 0.6, SR)
    from csrnvc.featurizer import write_f0_file

    write_f0_file(tmp_path / "f.csv", clip.f0)
    back = parse_f0_file(tmp_path / "f.csv", PERIOD)
    assert np.array_equal(back.f0_hz, clip.f0.f0_hz)
    assert np.array_equal(back.voiced, clip.f0.voiced)


def test_segment_durations_and_ranges():
    rng = np.random.default_rng(1)
    for tmpl in DEFAULT_TEMPLATES:
        clip = synth_clip(tmpl, rng, 1.0, SR)
        durs = [s.end - s.start for s in clip.alignment.segments]
        assert all(d <= 0.25 + 1e-9 for d in durs)
        assert all(d >= 0.05 - 1e-9 for d in durs[:-1])
        v = clip.f0.f0_hz[clip.f0.voiced]
        assert v.min() >= tmpl.f0_low - 1e-9 and v.max() <= tmpl.f0_high + 1e-9
        assert np.all(clip.f0.f0_hz[~clip.f0.voiced] == 0)
        assert np.abs(clip.audio.samples).max() == pytest.approx(1.0)


def test_sil_only_clip_is_silent():
    al = PhonemeAlignment([(0.0, 0.3, SIL)])
    clip = synth_clip(DEFAULT_TEMPLATES[0], np.random.default_rng(0), 0.3, SR, alignment=al)
    assert not clip.audio.samples.any()
    assert not clip.f0.voiced.any()


def test_tone_f0_within_two_percent():
    for f in (150.0, 95.0, 220.0):
        est = measure_f0(synth_tone(f, DEFAULT_TEMPLATES[3].profile, 0.5, SR), PERIOD)
        assert est.voiced.mean() > 0.9
        assert abs(np.median(est.f0_hz[est.voiced]) - f) / f < 0.02


def test_silence_is_unvoiced():
    est = measure_f0(AudioClip(np.zeros(SR // 2), SR), PERIOD)
    assert not est.voiced.any()
    with pytest.raises(InsufficientVoicingError):
        measure_timbre(AudioClip(np.zeros(SR // 2), SR), est)


def test_chirp_is_monotone():
    t = np.arange(SR) / SR
    f = 100 + 100 * t
    x = np.sin(2 * np.pi * np.cumsum(f) / SR)
    est = measure_f0(AudioClip(x, SR), PERIOD)
    assert est.voiced[2:-2].all()
    track = medfilt(est.f0_hz[2:-2], 5)[2:-2]
    assert np.all(np.diff(track) >= -1e-9)
    assert track[0] < 115 and track[-1] > 185


def test_pure_sine_profile():
    prof = measure_timbre(synth_tone(130.0, (1,) + (0,) * 7, 0.5, SR),
                          measure_f0(synth_tone(130.0, (1,) + (0,) * 7, 0.5, SR), PERIOD))
    assert prof[0] > 0.97


def test_closed_loop_timbre_and_f0():
    rng = np.random.default_rng(7)
    for tmpl in DEFAULT_TEMPLATES:
        tone = synth_tone(0.5 * (tmpl.f0_low + tmpl.f0_high), tmpl.profile, 0.5, SR)
        assert cosine(measure_timbre(tone, measure_f0(tone, PERIOD)), tmpl.profile) > 0.99
        clip = synth_clip(tmpl, rng, 1.0, SR)
        est = measure_f0(clip.audio, PERIOD)
        both = est.voiced & clip.f0.voiced
        err = np.abs(est.f0_hz[both] - clip.f0.f0_hz[both]) / clip.f0.f0_hz[both]
        assert np.median(err) < 0.02
        # phoneme masks reshape the spectrum, but the speaker stays nearest
        prof = measure_timbre(clip.audio, est)
        sims = [cosine(prof, t.profile) for t in DEFAULT_TEMPLATES]
        assert int(np.argmax(sims)) == tmpl.speaker_id


def test_ground_truth_clip_scores_as_its_speaker():
    rng = np.random.default_rng(3)
    src, tgt = DEFAULT_TEMPLATES[0], DEFAULT_TEMPLATES[2]
    clips = {t.speaker_id: [synth_clip(t, rng, 1.0, SR) for _ in range(4)] for t in (src, tgt)}
    stats = {k: compute_speaker_stats([c.f0 for c in v]) for k, v in clips.items()}
    # a real target clip evaluated against its own contour: perfect pitch, positive timbre score
    c = clips[2][0]
    rep = eval_conversion(c.audio, c.f0, stats[2], tgt, stats[2], src)
    assert rep.timbre_score > 0 and rep.closer_to_target
    assert rep.f0_rel_error < 0.02
    assert rep.voicing_agreement > 0.85
    again = eval_conversion(c.audio, c.f0, stats[2], tgt, stats[2], src)
    assert again == rep


def test_phoneme_inventory_defaults():
    syms = [p.symbol for p in DEFAULT_PHONEMES]
    assert syms[0] == SIL and len(syms) == 9
    assert not DEFAULT_PHONEMES[0].voiced and all(p.voiced for p in DEFAULT_PHONEMES[1:])


def test_corpus_wavs_match_manifest(tmp_path):
    from csrnvc.dataset import read_manifest

    entries = read_manifest(synth_corpus(tmp_path, clips_per_speaker=1, clip_seconds=0.4, seed=0))
    assert len(entries) == 4
    for e in entries:
        clip = wav_read(e.wav)
        assert clip.sample_rate_hz == SR
        assert len(clip) == round(e.seconds * SR)
