import csv

import numpy as np
import pytest
from conftest import SMALL_MODEL

from csrnvc.dataset import featurize_entry
from csrnvc.featurizer import F0Contour, compute_speaker_stats, normalize_f0, parse_alignment_file, parse_f0_file
from csrnvc.synthcorpus import SpeakerTemplate, synth_clip
from csrnvc.vcgen import STATS_HEADER, ConversionRequest, _sample, convert, extract_content, generate, load_content

FS3 = SMALL_MODEL.tiers.top_frame
PERIOD = SMALL_MODEL.frame_period


def _request(env, entry, target, seed=0, out=None, temperature=1.0):
    return ConversionRequest(entry.align, entry.f0, env["stats"][entry.speaker_id], target,
                             out, seed, temperature)


def _content(env, entry):
    return load_content(_request(env, entry, 0), env["inventory"], PERIOD)


# -- content extraction


def test_training_clip_reproduces_training_features(small_trained):
    env = small_trained
    e = env["entries"][3]
    train = featurize_entry(e, env["inventory"], env["stats"][e.speaker_id], PERIOD)
    got = extract_content(parse_alignment_file(e.align, env["inventory"]), parse_f0_file(e.f0, PERIOD),
                          env["stats"][e.speaker_id], env["inventory"])
    assert np.array_equal(got.frames, train.frames)


def test_rising_f0_gives_rising_normalized_values():
    f0 = np.linspace(90, 240, 30)
    stats = compute_speaker_stats([F0Contour(f0, np.ones(30, bool), PERIOD)])
    x = normalize_f0(F0Contour(f0, np.ones(30, bool), PERIOD), stats).values
    assert np.all(np.diff(x) > 0)


def test_unseen_source_speaker(small_trained, tmp_path):
    from csrnvc.featurizer import write_alignment_file, write_f0_file

    env = small_trained
    stranger = SpeakerTemplate(7, 60.0, 80.0, (0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2, 0.2))
    rng = np.random.default_rng(5)
    clips = [synth_clip(stranger, rng, 0.4, SMALL_MODEL.sample_rate_hz) for _ in range(3)]
    stats = compute_speaker_stats([c.f0 for c in clips], "7")
    write_alignment_file(tmp_path / "a.lab", clips[0].alignment)
    write_f0_file(tmp_path / "f.csv", clips[0].f0)
    req = ConversionRequest(tmp_path / "a.lab", tmp_path / "f.csv", stats, 1, tmp_path / "o.wav")
    res = convert(env["model"], [req], env["inventory"])
    assert not res.errors
    assert len(res.outputs[0].codes) == len(load_content(req, env["inventory"], PERIOD)) * FS3


# -- sampling


def test_zero_temperature_is_argmax():
    logits = np.random.default_rng(0).normal(size=(3, 256))
    codes, _ = _sample(logits, 0.0, [None] * 3)
    assert np.array_equal(codes, logits.argmax(axis=1))


def test_inverse_cdf_matches_distribution():
    p = np.array([0.5, 0.25, 0.125, 0.125])
    logits = np.full((1, 256), -np.inf)
    logits[0, :4] = np.log(p)
    rng = np.random.Generator(np.random.Philox(3))
    draws = np.array([_sample(logits, 1.0, [rng])[0][0] for _ in range(20000)])
    freq = np.bincount(draws, minlength=256)
    assert freq[4:].sum() == 0
    assert np.allclose(freq[:4] / 20000, p, atol=0.012)


def test_uniform_logits_have_eight_bits_entropy():
    _, ent = _sample(np.zeros((2, 256)), 1.0, [np.random.default_rng(0)] * 2)
    assert np.allclose(ent, 8.0, atol=1e-12)
    _, ent = _sample(np.zeros((1, 256)), 0.5, [np.random.default_rng(0)])
    assert ent[0] == pytest.approx(8.0)


def test_negative_temperature_rejected(tmp_path):
    with pytest.raises(ValueError):
        ConversionRequest(tmp_path / "a", tmp_path / "b", None, 0, temperature=-0.5)


# -- generation


def test_length_and_rate_invariants(small_trained):
    env = small_trained
    content = _content(env, env["entries"][0])
    F = len(content)
    (g,) = generate(env["model"], [content], [2], [1])
    assert len(g.codes) == len(g.clip.samples) == F * FS3
    assert (g.counters.top, g.counters.mid, g.counters.mlp) == (F, F * FS3 // SMALL_MODEL.tiers.mid_frame, F * FS3)
    assert 0.0 <= g.entropy_bits <= 8.0


def test_batching_does_not_change_an_utterance(small_trained):
    env = small_trained
    a, b = _content(env, env["entries"][0]), _content(env, env["entries"][5])
    b = type(b)(b.frames[:7], b.phoneme_ids[:7], b.frame_period_sec)  # shorter second row is zero-padded in the batch
    alone = generate(env["model"], [b], [1], [11])[0].codes
    together = generate(env["model"], [a, b], [3, 1], [4, 11])
    assert np.array_equal(together[1].codes, alone)
    assert len(together[0].codes) == len(a) * FS3


def test_zero_temperature_ignores_seed(small_trained):
    env = small_trained
    c = _content(env, env["entries"][2])
    x = generate(env["model"], [c], [0], [1], temperature=0.0)[0].codes
    y = generate(env["model"], [c], [0], [99], temperature=0.0)[0].codes
    assert np.array_equal(x, y)


def test_speaker_embedding_changes_output(small_trained):
    env = small_trained
    c = _content(env, env["entries"][1])
    outs = [generate(env["model"], [c], [t], [5])[0].codes for t in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.mean(outs[i] != outs[j]) > 0.01


# -- batch driver


def test_seed_determinism_wav_bytes(small_trained, tmp_path):
    env = small_trained
    e = env["entries"][4]
    for name, seed in (("a", 3), ("b", 3), ("c", 4)):
        convert(env["model"], [_request(env, e, 2, seed, tmp_path / f"{name}.wav")], env["inventory"])
    a, b, c = ((tmp_path / f"{n}.wav").read_bytes() for n in "abc")
    assert a == b
    assert a != c


def test_empty_request_list(small_trained, tmp_path):
    res = convert(small_trained["model"], [], small_trained["inventory"], tmp_path / "s.csv")
    assert res.outputs == [] and res.errors == []
    assert (tmp_path / "s.csv").read_text().splitlines() == [",".join(STATS_HEADER)]


def test_per_clip_errors_are_collected(small_trained, tmp_path):
    env = small_trained
    e = env["entries"][0]
    good = _request(env, e, 1, 0, tmp_path / "good.wav")
    missing = ConversionRequest(tmp_path / "nope.lab", e.f0, env["stats"][e.speaker_id], 1,
                                tmp_path / "missing.wav")
    bad_target = _request(env, e, 9, 0, tmp_path / "bad.wav")
    res = convert(env["model"], [missing, good, bad_target], env["inventory"], tmp_path / "s.csv")
    assert [g.name for g in res.outputs] == ["good"]
    assert [n for n, _ in res.errors] == ["missing", "bad"]
    assert (tmp_path / "good.wav").exists() and not (tmp_path / "bad.wav").exists()


def test_generation_stats_csv(small_trained, tmp_path):
    env = small_trained
    reqs = [_request(env, e, 0, i, tmp_path / f"o{i}.wav") for i, e in enumerate(env["entries"][:3])]
    res = convert(env["model"], reqs, env["inventory"], tmp_path / "s.csv", timing=True)
    rows = list(csv.DictReader((tmp_path / "s.csv").open()))
    assert list(rows[0]) == STATS_HEADER
    assert [r["clip"] for r in rows] == ["o0", "o1", "o2"]
    for r, g in zip(rows, res.outputs):
        assert int(r["samples"]) == len(g.codes)
        assert float(r["wall_ms"]) > 0 and float(r["samples_per_sec"]) > 0
        assert 0 <= float(r["entropy_bits"]) <= 8
    convert(env["model"], reqs, env["inventory"], tmp_path / "t.csv", timing=False)
    convert(env["model"], reqs, env["inventory"], tmp_path / "u.csv", timing=False)
    assert (tmp_path / "t.csv").read_bytes() == (tmp_path / "u.csv").read_bytes()
