"""TBPTT training with Adam, bits/sample metrics and resumable checkpoints.

A batch holds whole clips, padded with silence to a common length that is a
multiple of the top frame size; padded samples are masked out of the loss.
Each clip is consumed in consecutive TBPTT chunks, one optimizer step per
chunk. Tier states and the forward conditioning state carry across chunks of
the same batch; the backward conditioning state is zeroed every step.
"""
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .audiocodec import SILENCE_CODE
from .condnet import ConditioningState
from .config import ModelConfig, TrainConfig
from .errors import FormatError, NumericError
from .model import StreamState, VoiceModel
from .srnn import TierState

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_store(cls, store):
        return cls(
            {n: np.zeros_like(p.data) for n, p in store.items()},
            {n: np.zeros_like(p.data) for n, p in store.items()},
        )


def adam_step(store, grads, state, lr):
    """One bias-corrected Adam update, in lexicographic parameter order."""
    for name in store.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != store[name].shape:
            raise NumericError(f"gradient for {name!r} has shape {g.shape}, expected {store[name].shape}")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, p in store.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + EPS)).astype(p.dtype, copy=False)
    return state


def clip_global_norm(grads, max_norm):
    """Scale gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm <= 0`` disables clipping.
    """
    sq = 0.0
    for name in sorted(grads):
        sq += float(np.sum(np.square(grads[name], dtype=np.float64)))
    norm = sq ** 0.5
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(factor)
    return norm


# -------------------------------------------------------------------- corpus


@dataclass
class TrainItem:
    speaker: int
    codes: np.ndarray  # [n_frames * FS3] mu-law codes
    features: np.ndarray  # [n_frames, 5P + 2]
    name: str = ""

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.features = np.asarray(self.features)


def align_item(speaker, codes, features, frame_size, name=""):
    """Trim codes/features to a common whole number of frames."""
    n = min(len(codes) // frame_size, len(features))
    return TrainItem(speaker, np.asarray(codes)[: n * frame_size], np.asarray(features)[:n], name)


@dataclass
class Batch:
    speakers: np.ndarray  # [B]
    codes: np.ndarray  # [B, T]
    features: np.ndarray  # [B, F, D]
    mask: np.ndarray  # [B, T]


def make_batch(items, frame_size, dtype=np.float32):
    n_frames = max(len(it.features) for it in items)
    T = n_frames * frame_size
    D = items[0].features.shape[1]
    B = len(items)
    codes = np.full((B, T), SILENCE_CODE, dtype=np.int64)
    feats = np.zeros((B, n_frames, D), dtype=dtype)
    mask = np.zeros((B, T), dtype=np.float64)
    for b, it in enumerate(items):
        codes[b, : len(it.codes)] = it.codes
        feats[b, : len(it.features)] = it.features
        mask[b, : len(it.codes)] = 1.0
    return Batch(np.array([it.speaker for it in items], dtype=np.int64), codes, feats, mask)


def chunk_bounds(n_samples, tbptt_len):
    return [(s, min(s + tbptt_len, n_samples)) for s in range(0, n_samples, tbptt_len)]


# ------------------------------------------------------------------- trainer


def seed_streams(seed):
    """Independent Philox generators for initialization and data order."""
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(init_ss)), np.random.Generator(np.random.Philox(shuffle_ss))


@dataclass
class Cursor:
    epoch: int = 0
    order: list = field(default_factory=list)
    batch: int = 0
    chunk: int = 0


class Trainer:
    def __init__(self, model_cfg, train_cfg, items, model=None, meta=None):
        self.meta = dict(meta or {})  # free-form JSON (inventory, speaker ids) kept in checkpoints
        self.model_cfg = model_cfg.validate()
        self.cfg = train_cfg.validate(model_cfg)
        self.items = list(items)
        init_rng, self.rng = seed_streams(train_cfg.seed)
        self.model = model or VoiceModel(model_cfg).init(init_rng)
        self.adam = AdamState.for_store(self.model.store)
        self.step = 0
        self.cursor = Cursor()
        self.stream = None
        self._batch = None
        self._pool = ThreadPoolExecutor(train_cfg.jobs) if train_cfg.jobs > 1 else None

    # -- data order

    def _batches_in_epoch(self):
        return (len(self.items) + self.cfg.batch_size - 1) // self.cfg.batch_size

    def _current_batch(self):
        c = self.cursor
        if not c.order:
            c.order = [int(i) for i in self.rng.permutation(len(self.items))]
        if self._batch is None:
            B = self.cfg.batch_size
            idx = c.order[c.batch * B:(c.batch + 1) * B]
            self._batch = make_batch([self.items[i] for i in idx], self.model_cfg.tiers.top_frame, self.model.dtype)
        if self.stream is None:
            self.stream = self.model.initial_state(len(self._batch.speakers))
        return self._batch

    def _advance(self, n_chunks):
        c = self.cursor
        c.chunk += 1
        if c.chunk < n_chunks:
            return
        c.chunk = 0
        c.batch += 1
        self._batch = None
        self.stream = None
        if c.batch >= self._batches_in_epoch():
            c.batch = 0
            c.epoch += 1
            c.order = []

    # -- one optimizer step

    def _loss_and_grads(self, batch, lo, hi, state):
        fs3 = self.model_cfg.tiers.top_frame
        feats = batch.features[:, lo // fs3: hi // fs3]
        codes = batch.codes[:, lo:hi]
        mask = batch.mask[:, lo:hi]
        count = float(mask.sum())
        if self._pool is None:
            return self._run_tape(feats, batch.speakers, codes, state, mask, count)
        B = len(batch.speakers)
        jobs = [
            self._pool.submit(
                self._run_tape, feats[b:b + 1], batch.speakers[b:b + 1], codes[b:b + 1],
                _slice_state(state, b), mask[b:b + 1], count,
            )
            for b in range(B)
        ]
        parts = [j.result() for j in jobs]
        loss = sum(p[0] for p in parts)
        grads = {n: sum(p[1][n] for p in parts) for n in self.model.store.names()}
        return loss, grads, _stack_states([p[2] for p in parts])

    def _run_tape(self, feats, speakers, codes, state, mask, count):
        with nc.Tape() as tape:
            loss, new_state = self.model.chunk_loss(feats, speakers, codes, state, mask, count)
        grads = nc.backward(tape, loss, dict(self.model.store.items()))
        return float(loss.data), {n: g.copy() for n, g in grads.items()}, new_state

    def train_step(self):
        """Run one TBPTT chunk and apply one Adam update. Returns bits/sample."""
        batch = self._current_batch()
        bounds = chunk_bounds(batch.codes.shape[1], self.cfg.tbptt_len)
        lo, hi = bounds[self.cursor.chunk]
        loss, grads, new_state = self._loss_and_grads(batch, lo, hi, self.stream)
        clip_global_norm(grads, self.cfg.grad_clip)
        adam_step(self.model.store, grads, self.adam, self.cfg.learning_rate)
        self.stream = new_state
        self.step += 1
        self._advance(len(bounds))
        return loss

    def done(self):
        if self.cfg.epochs and self.cursor.epoch >= self.cfg.epochs:
            return True
        return bool(self.cfg.steps) and self.step >= self.cfg.steps

    def run(self, metrics_path=None, checkpoint_path=None, max_steps=None, callback=None):
        """Train until the configured step/epoch budget (or ``max_steps`` more steps)."""
        losses = []
        fh = None
        if metrics_path is not None:
            metrics_path = Path(metrics_path)
            new = not metrics_path.exists() or metrics_path.stat().st_size == 0
            fh = metrics_path.open("a", encoding="utf-8")
            if new:
                fh.write("step,split,bits_per_sample,wall_ms\n")
        try:
            taken = 0
            while not self.done() and (max_steps is None or taken < max_steps):
                t0 = time.perf_counter()
                loss = self.train_step()
                wall = (time.perf_counter() - t0) * 1000.0 if self.cfg.timing else 0.0
                losses.append(loss)
                taken += 1
                if fh is not None:
                    fh.write(f"{self.step},train,{loss:.6f},{wall:.1f}\n")
                if self.step % 50 == 0:
                    log.info("step %d  epoch %d  %.4f bits/sample", self.step, self.cursor.epoch, loss)
                if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    save_checkpoint(checkpoint_path, self)
                if callback is not None:
                    callback(self, loss)
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self)
        return losses

    def evaluate(self, items=None):
        """Teacher-forced bits/sample over whole clips (no updates)."""
        items = self.items if items is None else items
        total, count = 0.0, 0.0
        fs3 = self.model_cfg.tiers.top_frame
        for start in range(0, len(items), self.cfg.batch_size):
            batch = make_batch(items[start:start + self.cfg.batch_size], fs3, self.model.dtype)
            state = self.model.initial_state(len(batch.speakers))
            for lo, hi in chunk_bounds(batch.codes.shape[1], self.cfg.tbptt_len):
                m = batch.mask[:, lo:hi]
                loss, state = self.model.chunk_loss(
                    batch.features[:, lo // fs3:hi // fs3], batch.speakers, batch.codes[:, lo:hi], state, m, 1.0
                )
                total += float(loss.data)
                count += float(m.sum())
        return total / max(count, 1.0)


def _slice_state(state, b):
    c, t = state.cond, state.tiers
    return StreamState(
        ConditioningState(c.forward[b:b + 1], c.backward[b:b + 1], c.backward_resets, c.utterance_resets),
        TierState(t.top[b:b + 1], t.mid[b:b + 1], t.history[b:b + 1]),
    )


def _stack_states(states):
    c0 = states[0].cond
    return StreamState(
        ConditioningState(
            np.concatenate([s.cond.forward for s in states]),
            np.concatenate([s.cond.backward for s in states]),
            c0.backward_resets,
            c0.utterance_resets,
        ),
        TierState(
            np.concatenate([s.tiers.top for s in states]),
            np.concatenate([s.tiers.mid for s in states]),
            np.concatenate([s.tiers.history for s in states]),
        ),
    )


# ---------------------------------------------------------------- checkpoint

MAGIC = b"CSRN"
VERSION = 1


def _rng_state_to_json(state):
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__array__": [int(v) for v in x.reshape(-1)], "dtype": str(x.dtype)}
        if isinstance(x, np.integer):
            return int(x)
        return x

    return conv(state)


def _rng_state_from_json(state):
    def conv(x):
        if isinstance(x, dict):
            if "__array__" in x:
                return np.array(x["__array__"], dtype=x["dtype"])
            return {k: conv(v) for k, v in x.items()}
        return x

    return conv(state)


def _tensor_entries(trainer):
    out = [(f"param/{n}", p.data) for n, p in trainer.model.store.items()]
    out += [(f"adam.m/{n}", trainer.adam.m[n]) for n in trainer.model.store.names()]
    out += [(f"adam.v/{n}", trainer.adam.v[n]) for n in trainer.model.store.names()]
    if trainer.stream is not None:
        s = trainer.stream
        out += [
            ("state/cond_backward", s.cond.backward),
            ("state/cond_forward", s.cond.forward),
            ("state/history", s.tiers.history),
            ("state/mid", s.tiers.mid),
            ("state/top", s.tiers.top),
        ]
    return out


def checkpoint_bytes(trainer):
    entries = _tensor_entries(trainer)
    directory = []
    offset = 0
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    c = trainer.cursor
    header = {
        "model": trainer.model_cfg.to_dict(),
        "train": trainer.cfg.to_dict(),
        "step": trainer.step,
        "adam_t": trainer.adam.t,
        "rng": _rng_state_to_json(trainer.rng.bit_generator.state),
        "cursor": {"epoch": c.epoch, "order": c.order, "batch": c.batch, "chunk": c.chunk},
        "n_items": len(trainer.items),
        "meta": trainer.meta,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def save_checkpoint(path, trainer):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(trainer))
    tmp.replace(path)


def read_checkpoint(path):
    """Parse a checkpoint file into ``(header, name -> float32 array)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not a checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if 12 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    base = 12 + hlen
    tensors = {}
    for ent in header["tensors"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        start = base + ent["offset"]
        end = start + 4 * n
        if end > len(raw):
            raise FormatError(f"{path}: truncated tensor data for {ent['name']}")
        tensors[ent["name"]] = np.frombuffer(raw[start:end], dtype="<f4").reshape(ent["shape"]).copy()
    return header, tensors


def load_model(path, dtype=np.float32):
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model"])
    model = VoiceModel(cfg, dtype)
    _fill_params(model, tensors, path)
    return model, header


def _fill_params(model, tensors, path):
    for name in model.store.names():
        key = f"param/{name}"
        if key not in tensors:
            raise FormatError(f"{path}: missing parameter {name}")
        try:
            model.store.set_data(name, tensors[key])
        except nc.DimensionError as exc:
            raise FormatError(f"{path}: {exc}") from None


def load_checkpoint(path, items):
    """Rebuild a Trainer exactly as it was when ``path`` was saved."""
    header, tensors = read_checkpoint(path)
    model_cfg = ModelConfig.from_dict(header["model"])
    train_cfg = TrainConfig.from_dict(header["train"])
    if header.get("n_items") != len(items):
        raise FormatError(f"{path}: checkpoint was trained on {header.get('n_items')} clips, got {len(items)}")
    model = VoiceModel(model_cfg)
    _fill_params(model, tensors, path)
    tr = Trainer(model_cfg, train_cfg, items, model=model, meta=header.get("meta"))
    for name in model.store.names():
        tr.adam.m[name] = tensors[f"adam.m/{name}"].astype(model.dtype)
        tr.adam.v[name] = tensors[f"adam.v/{name}"].astype(model.dtype)
    tr.adam.t = header["adam_t"]
    tr.step = header["step"]
    tr.rng.bit_generator.state = _rng_state_from_json(header["rng"])
    c = header["cursor"]
    tr.cursor = Cursor(c["epoch"], list(c["order"]), c["batch"], c["chunk"])
    if "state/top" in tensors:
        tr.stream = StreamState(
            ConditioningState(
                tensors["state/cond_forward"].astype(model.dtype),
                tensors["state/cond_backward"].astype(model.dtype),
            ),
            TierState(
                tensors["state/top"].astype(model.dtype),
                tensors["state/mid"].astype(model.dtype),
                tensors["state/history"].astype(np.int64),
            ),
        )
        # mid-batch resume: rebuild the padded batch for the stored cursor
        tr._current_batch()
    return tr
