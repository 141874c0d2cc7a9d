"""Command-line entry point: ``csrnvc <subcommand> [flags]``.

Data goes to files, logs to stderr. Failures print one line
``csrnvc: error code=<n> kind=<Class>: <message>`` and exit with the code
(2 usage, 3 config, 4 io/format, 5 numeric).
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import plotting
from .audiocodec import wav_read
from .config import PROFILES, profile, read_run_config, run_config_from_dict, with_overrides
from .dataset import compute_all_stats, featurize_entry, load_items, read_manifest, speaker_index
from .errors import CsrnvcError, FormatError, NumericError, UsageError
from .evaluation import corpus_paths, plan_pairs, run_pairs, score_pairs, summarize, write_results
from .featurizer import (
    PhonemeInventory,
    denormalize_f0,
    normalize_f0,
    parse_f0_file,
    read_stats_file,
    write_stats_file,
)
from .gradcheck import run_gradcheck
from .synthcorpus import measure_f0, read_templates, synth_corpus
from .trainer import Trainer, load_checkpoint, load_model
from .vcgen import ConversionRequest, convert

log = logging.getLogger("csrnvc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ config


class Run:
    """Resolved configuration: profile defaults < config file < flags."""

    def __init__(self, args):
        self.paths = {}
        if args.config:
            doc = read_run_config(args.config)
            if args.profile:
                doc["profile"] = args.profile
            self.model_cfg, self.train_cfg, self.paths = run_config_from_dict(doc)
        else:
            self.model_cfg, self.train_cfg = profile(args.profile or "desk")
        self.train_cfg = with_overrides(
            self.train_cfg, seed=args.seed, jobs=args.jobs, timing=True if args.timing else None
        )

    def path(self, value, key, required=True, what=None):
        if value is not None:
            return Path(value)
        if key in self.paths:
            return Path(self.paths[key])
        if required:
            raise UsageError(f"missing --{what or key} (or paths.{key} in --config)")
        return None


def _common(p):
    g = p.add_argument_group("common options")
    g.add_argument("--config", metavar="JSON", help="run config (profile, seed, model, train, paths); flags win")
    g.add_argument("--profile", choices=sorted(PROFILES), help="size profile (default desk)")
    g.add_argument("--seed", type=int, help="64-bit seed for all randomness in this command")
    g.add_argument("--jobs", type=int, help="parallel execution contexts; 1 forces the deterministic single path")
    g.add_argument("--timing", action="store_true",
                   help="record real wall-clock times in CSV outputs (otherwise 0, so outputs are byte-reproducible)")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="stderr log verbosity")


def _require_file(path, what):
    if not Path(path).is_file():
        raise FormatError(f"{what} not found: {path}")
    return Path(path)


def _corpus(run, args):
    corpus = run.path(args.corpus, "corpus")
    manifest, inv_path, templates = corpus_paths(corpus)
    _require_file(manifest, "manifest")
    return corpus, read_manifest(manifest), PhonemeInventory.read(_require_file(inv_path, "inventory"))


def _corpus_stats(run, args, entries, corpus):
    stats_path = run.path(getattr(args, "stats", None), "stats", required=False)
    if stats_path is not None:
        return read_stats_file(_require_file(stats_path, "stats file"))
    return compute_all_stats(entries, run.model_cfg.frame_period)


# ------------------------------------------------------------- subcommands


def cmd_synth_corpus(run, args):
    out = run.path(args.out, "corpus", what="out")
    seed = run.train_cfg.seed if args.seed is None else args.seed
    manifest = synth_corpus(out, clips_per_speaker=args.clips_per_speaker, clip_seconds=args.clip_seconds,
                            sample_rate=run.model_cfg.sample_rate_hz, seed=seed)
    log.info("wrote %s", manifest)


def cmd_stats(run, args):
    corpus, entries, _ = _corpus(run, args)
    stats = compute_all_stats(entries, run.model_cfg.frame_period)
    out = Path(args.out) if args.out else corpus / "stats.csv"
    write_stats_file(out, stats.values())
    log.info("wrote %s (%d speakers)", out, len(stats))


def cmd_featurize(run, args):
    corpus, entries, inv = _corpus(run, args)
    stats = _corpus_stats(run, args, entries, corpus)
    period = run.model_cfg.frame_period
    arrays = {e.clip_id: featurize_entry(e, inv, stats[e.speaker_id], period).frames for e in entries}
    out = Path(args.out) if args.out else corpus / "features.npz"
    np.savez(out, **arrays)
    log.info("wrote %s (%d clips, dim %d)", out, len(arrays), inv.feature_dim)


def cmd_train(run, args):
    corpus, entries, inv = _corpus(run, args)
    out = run.path(args.out, "out")
    out.mkdir(parents=True, exist_ok=True)
    speakers = speaker_index(entries)
    model_cfg = with_overrides(run.model_cfg, n_speakers=len(speakers), n_phonemes=len(inv))
    train_cfg = with_overrides(run.train_cfg, steps=args.steps, epochs=args.epochs, batch_size=args.batch_size,
                               tbptt_len=args.tbptt_len, learning_rate=args.learning_rate,
                               checkpoint_every=args.checkpoint_every).validate(model_cfg)
    stats = _corpus_stats(run, args, entries, corpus)
    write_stats_file(out / "stats.csv", [stats[s] for s in speakers])
    items = load_items(entries, inv, stats, model_cfg, speakers)
    checkpoint = run.path(args.checkpoint, "checkpoint", required=False) or out / "checkpoint.csrn"
    metrics = run.path(args.metrics, "metrics", required=False) or out / "metrics.csv"
    if args.resume:
        trainer = load_checkpoint(_require_file(args.resume, "checkpoint"), items)
        trainer.cfg = with_overrides(trainer.cfg, steps=args.steps, epochs=args.epochs)
    else:
        if metrics.exists():
            metrics.unlink()
        trainer = Trainer(model_cfg, train_cfg, items,
                          meta={"inventory": list(inv.symbols), "speakers": list(speakers)})
    (out / "run_config.json").write_text(json.dumps(
        {"profile": trainer.cfg.profile, "seed": trainer.cfg.seed, "model": trainer.model_cfg.to_dict(),
         "train": trainer.cfg.to_dict(), "paths": {"corpus": str(corpus), "out": str(out)}},
        indent=1, sort_keys=True) + "\n", encoding="utf-8")
    t0 = time.perf_counter()
    trainer.run(metrics, checkpoint)
    log.info("trained to step %d in %.1fs; checkpoint %s", trainer.step, time.perf_counter() - t0, checkpoint)
    plotting.loss_curve(metrics, out / "loss.png")


def _stats_for(path, speaker):
    table = read_stats_file(_require_file(path, "stats file"))
    if speaker is None:
        if len(table) != 1:
            raise UsageError(f"{path} holds {len(table)} speakers; pick one with --source-speaker")
        return next(iter(table.values()))
    if speaker not in table:
        raise UsageError(f"speaker {speaker!r} not in {path}")
    return table[speaker]


def _target_index(meta, target, n_speakers):
    names = [str(s) for s in meta.get("speakers", [])]
    if target in names:
        return names.index(target)
    try:
        idx = int(target)
    except ValueError:
        raise UsageError(f"unknown target speaker {target!r}") from None
    if not 0 <= idx < n_speakers:
        raise UsageError(f"target speaker {target} outside [0, {n_speakers})")
    return idx


def _model_inventory(header, args):
    if getattr(args, "inventory", None):
        return PhonemeInventory.read(_require_file(args.inventory, "inventory"))
    symbols = header.get("meta", {}).get("inventory")
    if not symbols:
        raise UsageError("checkpoint carries no phoneme inventory; pass --inventory")
    return PhonemeInventory(tuple(symbols))


def _check_temperature(value):
    if value < 0:
        raise UsageError(f"--temperature must be >= 0, got {value}")


def cmd_convert(run, args):
    _check_temperature(args.temperature)
    ck = run.path(args.checkpoint, "checkpoint")
    model, header = load_model(_require_file(ck, "checkpoint"))
    inv = _model_inventory(header, args)
    target = _target_index(header.get("meta", {}), args.target_speaker, model.cfg.n_speakers)
    src_stats = _stats_for(args.source_stats, args.source_speaker)
    for p, what in ((args.source_align, "alignment"), (args.source_f0, "F0 file")):
        _require_file(p, what)
    seed = 0 if args.seed is None else args.seed
    req = ConversionRequest(Path(args.source_align), Path(args.source_f0), src_stats, target,
                            Path(args.out), seed, args.temperature)
    out = Path(args.out)
    stats_csv = Path(args.stats_csv) if args.stats_csv else out.with_suffix(".csv")
    result = convert(model, [req], inv, stats_csv, timing=run.train_cfg.timing)
    if result.errors:
        raise NumericError(result.errors[0][1])
    log.info("wrote %s (%d samples)", out, len(result.outputs[0].codes))


def cmd_evaluate(run, args):
    _check_temperature(args.temperature)
    corpus, entries, inv = _corpus(run, args)
    ck = run.path(args.checkpoint, "checkpoint")
    model, header = load_model(_require_file(ck, "checkpoint"))
    out = run.path(args.out, "out")
    out.mkdir(parents=True, exist_ok=True)
    templates = read_templates(_require_file(corpus_paths(corpus)[2], "templates"))
    stats = _corpus_stats(run, args, entries, corpus)
    seed = run.train_cfg.seed if args.seed is None else args.seed
    plan = plan_pairs(entries, args.clips_per_pair, seed)
    gen = run_pairs(model, plan, inv, stats, out, args.temperature, timing=run.train_cfg.timing)
    for name, msg in gen.errors:
        log.error("conversion %s failed: %s", name, msg)
    results = score_pairs(plan, out, templates, stats, model.cfg.frame_period)
    write_results(out / "results.csv", results)
    s = summarize(results)
    with (out / "summary.csv").open("w", encoding="utf-8") as fh:
        fh.write("conversions,closer_to_target,median_f0_rel_error,mean_voicing_agreement,failures\n")
        fh.write(f"{s.n},{s.closer_fraction:.6f},{s.median_f0_error:.6f},{s.mean_voicing:.6f},{s.failures}\n")
    _evaluation_figures(results, templates, stats, out, model.cfg.frame_period)
    log.info("%d conversions: closer-to-target %.1f%%, median F0 error %.2f%%, voicing %.1f%%",
             s.n, 100 * s.closer_fraction, 100 * s.median_f0_error, 100 * s.mean_voicing)


def _evaluation_figures(results, templates, stats, out, period):
    good = [r for r in results if r.report is not None]
    if not good:
        return
    plotting.timbre_grid(good, templates, out / "timbre.png")
    plotting.pair_matrix(good, out / "timbre_pairs.png")
    r = good[0]
    src = parse_f0_file(r.plan.entry.f0, period)
    expected = np.where(src.voiced, denormalize_f0(normalize_f0(src, stats[r.plan.source]).values,
                                                   stats[r.plan.target]), 0.0)
    measured = measure_f0(wav_read(r.wav), period)
    plotting.f0_tracks(measured, expected, out / "f0_example.png", r.plan.name)


def cmd_gradcheck(run, args):
    seed = run.train_cfg.seed if args.seed is None else args.seed
    report, secs = run_gradcheck(seed, tolerance=args.tolerance)
    for line in report.lines():
        print(line)
    print(f"max_rel_error\t{report.max_error:.3e}\t{'ok' if report.ok else 'FAIL'}\t{secs:.1f}s")
    if not report.ok:
        raise NumericError(f"gradient check failed for {', '.join(report.failures)}")


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="csrnvc", description="Conditional SampleRNN voice conversion toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("synth-corpus", help="write a synthetic multi-speaker corpus")
    s.add_argument("--out", help="corpus directory")
    s.add_argument("--clips-per-speaker", type=int, default=50, help="clips per speaker (default 50)")
    s.add_argument("--clip-seconds", type=float, default=1.0, help="clip duration (default 1.0)")
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("stats", help="per-speaker log-F0 mean/std from a corpus")
    s.add_argument("--corpus", help="corpus directory holding manifest.csv")
    s.add_argument("--out", help="stats CSV (default <corpus>/stats.csv)")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("featurize", help="conditioning features for every manifest clip (.npz)")
    s.add_argument("--corpus", help="corpus directory holding manifest.csv")
    s.add_argument("--stats", help="stats CSV (default: computed from the corpus)")
    s.add_argument("--out", help="output .npz (default <corpus>/features.npz)")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="train on a corpus; writes checkpoint, metrics and loss figure")
    s.add_argument("--corpus", help="corpus directory holding manifest.csv")
    s.add_argument("--out", help="output directory")
    s.add_argument("--stats", help="stats CSV (default: computed from the corpus)")
    s.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.csrn)")
    s.add_argument("--metrics", help="metrics CSV (default <out>/metrics.csv)")
    s.add_argument("--resume", help="continue from this checkpoint")
    s.add_argument("--steps", type=int, help="total optimizer steps")
    s.add_argument("--epochs", type=int, help="stop after this many epochs (0 = steps only)")
    s.add_argument("--batch-size", type=int, help="clips per batch")
    s.add_argument("--tbptt-len", type=int, help="samples per truncated-BPTT chunk")
    s.add_argument("--learning-rate", type=float, help="Adam step size")
    s.add_argument("--checkpoint-every", type=int, help="also save every N steps (0 = only at the end)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("convert", help="convert one source utterance to a target speaker")
    s.add_argument("--source-align", required=True, help="source phoneme alignment file")
    s.add_argument("--source-f0", required=True, help="source F0 CSV")
    s.add_argument("--source-stats", required=True, help="stats CSV containing the source speaker")
    s.add_argument("--source-speaker", help="row of --source-stats to use (needed if it holds several)")
    s.add_argument("--target-speaker", required=True, help="target speaker id or embedding index")
    s.add_argument("--checkpoint", help="trained checkpoint")
    s.add_argument("--inventory", help="phoneme inventory (default: the one stored in the checkpoint)")
    s.add_argument("--temperature", type=float, default=1.0, help="softmax temperature; 0 = argmax (default 1)")
    s.add_argument("--out", required=True, help="output WAV")
    s.add_argument("--stats-csv", help="generation stats CSV (default: --out with .csv suffix)")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("evaluate", help="convert all speaker pairs of a synthetic corpus and score them")
    s.add_argument("--corpus", help="synthetic corpus directory (needs templates.json)")
    s.add_argument("--checkpoint", help="trained checkpoint")
    s.add_argument("--out", help="output directory for WAVs, CSVs and figures")
    s.add_argument("--stats", help="stats CSV (default: computed from the corpus)")
    s.add_argument("--clips-per-pair", type=int, default=5, help="source clips per ordered pair (default 5)")
    s.add_argument("--temperature", type=float, default=1.0, help="softmax temperature; 0 = argmax (default 1)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full micro model")
    s.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default 1e-4)")
    s.set_defaults(func=cmd_gradcheck)

    for sp in sub.choices.values():
        _common(sp)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("no subcommand given; see csrnvc --help")
        logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        args.func(Run(args), args)
    except CsrnvcError as exc:
        return _fail(exc.exit_code, type(exc).__name__, exc)
    except FileNotFoundError as exc:
        return _fail(4, "FileNotFoundError", f"{exc.strerror}: {exc.filename}")
    except OSError as exc:
        return _fail(4, type(exc).__name__, exc)
    except ValueError as exc:
        return _fail(5, type(exc).__name__, exc)
    return 0


def _fail(code, kind, msg):
    line = " ".join(str(msg).split())
    print(f"csrnvc: error code={code} kind={kind}: {line}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
