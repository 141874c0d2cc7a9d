"""Acceptance criteria, one PASS/FAIL line each.

Lines are printed as each test finishes and repeated in the terminal
summary. Desk-scale criteria train real models, so the whole module takes
several minutes.
"""
import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from csrnvc import numcore as nc
from csrnvc.audiocodec import compand, mulaw_decode, mulaw_encode, wav_bytes
from csrnvc.condnet import ConditioningContext
from csrnvc.config import profile, with_overrides
from csrnvc.dataset import compute_all_stats, featurize_entry, load_items, read_manifest
from csrnvc.evaluation import plan_pairs, run_pairs, score_pairs, summarize
from csrnvc.featurizer import normalize_f0, parse_f0_file
from csrnvc.gradcheck import run_gradcheck
from csrnvc.model import VoiceModel
from csrnvc.srnn import InferenceSession
from csrnvc.synthcorpus import default_inventory, read_templates, synth_corpus
from csrnvc.trainer import Trainer, checkpoint_bytes, load_checkpoint, save_checkpoint
from csrnvc.vcgen import generate

DESK_MODEL, DESK_TRAIN = profile("desk")
FS3, FS2 = DESK_MODEL.tiers.frame_sizes
VC_STEPS = 2000


def report(name, ok, detail):
    line = f"ACCEPTANCE {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Four synthetic speakers, 50 one-second clips each."""
    root = tmp_path_factory.mktemp("accept") / "corpus"
    entries = read_manifest(synth_corpus(root, clips_per_speaker=50, clip_seconds=1.0, seed=0))
    inv = default_inventory()
    stats = compute_all_stats(entries, DESK_MODEL.frame_period)
    return dict(root=root, entries=entries, inventory=inv, stats=stats,
                items=load_items(entries, inv, stats, DESK_MODEL), templates=read_templates(root / "templates.json"))


def _desk_model(seed=0, zero_output=True):
    return VoiceModel(DESK_MODEL, np.float32).init(np.random.default_rng(seed), zero_output=zero_output)


def test_gradient_suite():
    rep, secs = run_gradcheck(seed=0, tolerance=1e-4)
    report("gradient suite", rep.ok and rep.max_error < 1e-4 and secs < 60,
           f"{len(list(rep.lines()))} parameters, max rel err {rep.max_error:.2e} (< 1e-4), {secs:.1f}s (< 60s)")


def test_uniform_baseline(corpus):
    model = _desk_model()
    worst = 0.0
    rng = np.random.default_rng(1)
    for trial in range(4):
        if trial < 2:
            it = corpus["items"][trial * 57]
            feats, codes, spk = it.features[None], it.codes[None], [it.speaker]
        else:
            feats = rng.normal(size=(2, 30, DESK_MODEL.feature_dim)).astype(np.float32)
            codes, spk = rng.integers(0, 256, size=(2, 30 * FS3)), [0, 3]
        bits, _ = model.chunk_loss(feats, spk, codes, model.initial_state(len(spk)))
        worst = max(worst, abs(float(bits.data) - 8.0))
    report("uniform baseline", worst <= 1e-6, f"max |bits - 8| = {worst:.1e} over 4 inputs (<= 1e-6)")


def test_single_clip_overfit(tmp_path):
    entries = read_manifest(synth_corpus(tmp_path, clips_per_speaker=1, clip_seconds=0.5, seed=3))
    inv = default_inventory()
    items = load_items(entries[:1], inv, compute_all_stats(entries, DESK_MODEL.frame_period), DESK_MODEL)
    tr = Trainer(DESK_MODEL, with_overrides(DESK_TRAIN, steps=2000, batch_size=1), items)
    t0, losses = time.perf_counter(), []
    recent = lambda: float(np.mean(losses[-10:])) if len(losses) >= 10 else 8.0  # noqa: E731
    while not tr.done() and recent() >= 2.0:
        losses += tr.run(max_steps=1)
    secs = time.perf_counter() - t0
    report("single-clip overfit", recent() < 2.0 and secs < 1800,
           f"10-step mean {recent():.3f} bits/sample at step {len(losses)} (< 2.0 within 2000), "
           f"{secs:.0f}s (< 1800s)")


def test_chunking_equivalence(corpus):
    model = _desk_model(seed=2, zero_output=False)
    it = corpus["items"][10]
    ctx = model.condnet.forward(it.features[None], [it.speaker])[0]  # whole-utterance context, held fixed
    L = ctx.frames.data
    whole, _ = model.srnn.teacher_forced_forward(it.codes[None], ctx, model.srnn.initial_state(1))
    worst = 0.0
    for chunk in (2000, 800, 160):
        state, total = model.srnn.initial_state(1), 0.0
        for lo in range(0, len(it.codes), chunk):
            hi = min(lo + chunk, len(it.codes))
            part = ConditioningContext(nc.Tensor(L[:, lo // FS3: hi // FS3]))
            bits, state = model.srnn.teacher_forced_forward(it.codes[None, lo:hi], part, state)
            total += float(bits.data) * (hi - lo)
        worst = max(worst, abs(total / len(it.codes) - float(whole.data)))
    report("chunking equivalence", worst < 1e-5,
           f"max |chunked - unchunked| = {worst:.1e} bits/sample over chunk lengths 2000/800/160 (< 1e-5)")


def test_mulaw_sweep():
    x = np.linspace(-1.0, 1.0, 10001)
    err = np.max(np.abs(compand(mulaw_decode(mulaw_encode(x))) - compand(x)))
    ends = (mulaw_encode(np.array([-1.0, 1.0])).tolist() == [0, 255]
            and mulaw_decode(np.array([0, 255])).tolist() == [-1.0, 1.0])
    report("mu-law codec", err <= 1 / 255 and ends,
           f"max companded round-trip error {err:.5f} (<= {1 / 255:.5f}), endpoints exact: {ends}")


def test_normalization_self_consistency(corpus):
    worst_mean = worst_std = 0.0
    for sid, st in corpus["stats"].items():
        vals = np.concatenate([
            normalize_f0(parse_f0_file(e.f0, DESK_MODEL.frame_period), st).values[
                parse_f0_file(e.f0, DESK_MODEL.frame_period).voiced]
            for e in corpus["entries"] if e.speaker_id == sid])
        worst_mean = max(worst_mean, abs(vals.mean()))
        worst_std = max(worst_std, abs(vals.std() - 1.0))
    report("log-F0 normalization self-consistency", worst_mean < 1e-9 and worst_std < 1e-9,
           f"max |mean| {worst_mean:.1e}, max |std - 1| {worst_std:.1e} over {len(corpus['stats'])} speakers (< 1e-9)")


def test_rate_invariants(corpus):
    model = _desk_model(seed=4, zero_output=False)
    bad = []
    for T in (1, 7, 8, 9, 79, 80, 81, 163, 400):
        n_frames = math.ceil(T / FS3)
        L = np.random.default_rng(T).normal(size=(1, n_frames, DESK_MODEL.cond_dim))
        sess = InferenceSession(model.srnn, L)
        for _ in range(T):
            sess.next_logits()
            sess.push([128])
        if (sess.counters.top, sess.counters.mid, sess.counters.mlp) != (n_frames, math.ceil(T / FS2), T):
            bad.append(T)
    lengths_ok = True
    for e in corpus["entries"][:3]:
        content = featurize_entry(e, corpus["inventory"], corpus["stats"][e.speaker_id], DESK_MODEL.frame_period)
        content = type(content)(content.frames[:9], content.phoneme_ids[:9], content.frame_period_sec)
        g = generate(model, [content], [1], [0])[0]
        lengths_ok &= len(g.codes) == 9 * FS3 and g.counters.top == 9 and g.counters.mid == 90
    report("rate/shape invariants", not bad and lengths_ok,
           f"tier counts ceil(T/80)/ceil(T/8)/T for 9 values of T, mismatches {bad}; frames x 80 samples: {lengths_ok}")


def test_end_to_end_conversion(corpus, tmp_path):
    tr = Trainer(DESK_MODEL, with_overrides(DESK_TRAIN, steps=VC_STEPS), corpus["items"])
    t0 = time.perf_counter()
    tr.run()
    train_secs = time.perf_counter() - t0
    plan = plan_pairs(corpus["entries"], clips_per_pair=5, seed=0)
    gen = run_pairs(tr.model, plan, corpus["inventory"], corpus["stats"], tmp_path)
    s = summarize(score_pairs(plan, tmp_path, corpus["templates"], corpus["stats"], DESK_MODEL.frame_period))
    pairs = {(p.source, p.target) for p in plan}
    ok = (len(pairs) == 12 and s.n == 60 and not gen.errors and s.closer_fraction >= 0.8
          and s.median_f0_error < 0.1 and s.mean_voicing >= 0.85 and train_secs < 4 * 3600)
    report("end-to-end voice conversion", ok,
           f"{len(pairs)} pairs x 5 clips, {VC_STEPS} steps in {train_secs:.0f}s; closer to target "
           f"{100 * s.closer_fraction:.1f}% (>= 80%), median F0 error {100 * s.median_f0_error:.2f}% (< 10%), "
           f"voicing agreement {100 * s.mean_voicing:.1f}% (>= 85%), failures {s.failures}")


def _small_run(corpus, steps, out=None):
    items = corpus["items"][::25]
    tr = Trainer(DESK_MODEL, with_overrides(DESK_TRAIN, steps=steps, seed=11), items)
    losses = tr.run(metrics_path=out)
    return tr, losses


def test_determinism(corpus, tmp_path):
    runs = []
    for k in range(2):
        tr, _ = _small_run(corpus, 6, tmp_path / f"m{k}.csv")
        e = corpus["entries"][60]
        content = featurize_entry(e, corpus["inventory"], corpus["stats"][e.speaker_id], DESK_MODEL.frame_period)
        wav = wav_bytes(generate(tr.model, [content], [3], [21])[0].clip)
        runs.append((checkpoint_bytes(tr), (tmp_path / f"m{k}.csv").read_bytes(), wav))
    same = [a == b for a, b in zip(*runs)]
    report("determinism", all(same),
           f"identical checkpoint {same[0]}, metrics {same[1]}, generated WAV {same[2]} across two seeded runs")


def test_resume_equivalence(corpus, tmp_path):
    full, full_losses = _small_run(corpus, 8)
    target = checkpoint_bytes(full)
    bad = []
    for cut in (1, 3, 4, 7):
        part, first = _small_run(corpus, cut)
        part.cfg = with_overrides(part.cfg, steps=8)
        save_checkpoint(tmp_path / "c.csrn", part)
        resumed = load_checkpoint(tmp_path / "c.csrn", corpus["items"][::25])
        rest = resumed.run()
        if first + rest != full_losses or checkpoint_bytes(resumed) != target:
            bad.append(cut)
    report("checkpoint resume equivalence", not bad,
           f"cuts at steps 1/3/4/7 of 8: losses and final checkpoint bit-identical, mismatches {bad}")
