"""SGD training with step decay, shard-per-epoch sampling and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numeric as nm
from .model import Batch, ModelConfig, ModelParams, loss_forward, make_batch
from .numeric import ParamTensor
from .text import Vocabulary, build_vocab

log = logging.getLogger(__name__)

Example = tuple[list[int], list[int]]  # (source ext ids, target ext ids)


@dataclass
class TrainConfig:
    epochs: int = 40
    lr0: float = 1.0
    decay: float = 0.7
    decay_start_epoch: int = 11
    dropout: float = 0.3
    batch_size: int = 64
    partitions: int = 20
    seed: int = 0
    grad_clip_norm: float = 5.0
    precision: int = 64
    vocab_max_size: int = 50010

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")
        if self.decay_start_epoch < 1:
            raise ValueError("decay_start_epoch must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.partitions < 1:
            raise ValueError("batch_size and partitions must be >= 1")


def desk_configs(**overrides) -> tuple[ModelConfig, TrainConfig]:
    """Small preset that trains on a few hundred synthetic pairs on one CPU.

    The tiny vocabulary keeps most content words out of V so the model has to
    learn copying, which is what generalises to unseen sentences of the same
    grammar.  Per-example updates and a late decay start are what let a 64-unit
    model fit 200 pairs in 30 epochs.
    """
    model = dict(num_layers=1, hidden_dim=64, embed_dim=64, dropout=0.1, vocab_size=1)
    train = dict(
        epochs=30, lr0=1.0, decay=0.7, decay_start_epoch=21, dropout=0.1,
        batch_size=1, partitions=1, vocab_max_size=50,
    )
    for k, v in overrides.items():
        if k in model and k != "dropout":
            model[k] = v
        elif k in TrainConfig.__dataclass_fields__:
            train[k] = v
        else:
            raise KeyError(k)
    model["dropout"] = train["dropout"]
    return ModelConfig(**model), TrainConfig(**train)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_ppl: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "val_ppl", "lr", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.val_ppl:.6f}", f"{r.lr:.10g}", f"{r.seconds:.3f}"])


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    if epoch < cfg.decay_start_epoch:
        return cfg.lr0
    return cfg.lr0 * cfg.decay ** (epoch - cfg.decay_start_epoch + 1)


def compute_loss(batch: Batch, params: ModelParams, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    """Per-token mean NLL plus gradients (accumulated into ``params``).

    Dropout is active when ``rng`` is supplied.
    """
    if batch.src.shape[0] == 0:
        raise ValueError("empty batch")
    loss, record = loss_forward(params, batch, rng)
    record.backward()
    return loss, {p.name: p.grad for p in params}


# ---------------------------------------------------------------- data


def prepare_examples(pairs: Sequence[tuple[Sequence[str], Sequence[str]]], vocab: Vocabulary) -> list[Example]:
    """Turn (source tokens, tagged target tokens) into extended-id examples."""
    out = []
    for src, tgt in pairs:
        ids, oov = vocab.encode_source(src)
        out.append((ids, vocab.encode_target(tgt, oov)))
    return out


def partition_and_sample(dataset: Sequence, partitions: int, epoch: int, seed: int) -> list:
    """Items of the shard used in ``epoch`` (1-based), in a seeded order.

    Shard membership is fixed by the seed; epochs cycle through the shards.
    """
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    n = len(dataset)
    if n < partitions:
        raise ValueError(f"{n} examples cannot fill {partitions} partitions")
    perm = nm.make_rng(seed).permutation(n)
    shards = np.array_split(perm, partitions)
    shard = shards[(epoch - 1) % partitions]
    order = np.random.Generator(np.random.PCG64([seed, epoch])).permutation(len(shard))
    return [dataset[i] for i in shard[order]]


def make_batches(examples: Sequence[Example], batch_size: int, cfg: ModelConfig, rng) -> list[Batch]:
    """Bucket by source length (stable on the given order), then shuffle batches."""
    order = sorted(range(len(examples)), key=lambda i: len(examples[i][0]))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    chunk_order = rng.permutation(len(chunks)) if rng is not None else range(len(chunks))
    return [make_batch([examples[i] for i in chunks[k]], cfg) for k in chunk_order]


def perplexity(params: ModelParams, examples: Sequence[Example], batch_size: int = 64) -> float:
    """``exp`` of the per-token NLL, dropout off."""
    if not examples:
        return float("nan")
    total, tokens = 0.0, 0
    for batch in make_batches(examples, batch_size, params.cfg, None):
        loss, _ = loss_forward(params, batch, None, normalize="sum")
        total += loss
        tokens += batch.num_tokens
    return math.exp(total / tokens)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"NOIE"
FORMAT_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: ModelParams
    vocab: Vocabulary
    train_cfg: TrainConfig | None = None
    epoch: int = 0
    rng_state: dict | None = None


def _meta_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "model_config": ck.model_cfg.to_dict(),
        "train_config": asdict(ck.train_cfg) if ck.train_cfg is not None else None,
        "vocabulary": ck.vocab.to_dict(),
        "epoch": ck.epoch,
        "rng_state": ck.rng_state,
        "gate_order": "i,f,g,o",
    }
    return json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    """Serialize: magic, u32 version, JSON metadata block, named float blocks.

    Every block is followed by its CRC32; all integers are little-endian.
    """
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    meta = _meta_bytes(ck)
    out += [struct.pack("<I", len(meta)), meta, struct.pack("<I", zlib.crc32(meta))]
    tensors = list(ck.params)
    out.append(struct.pack("<I", len(tensors)))
    for p in tensors:
        name = p.name.encode("utf-8")
        arr = np.ascontiguousarray(p.value, dtype=p.value.dtype.newbyteorder("<"))
        header = struct.pack("<I", len(name)) + name + struct.pack("<BI", arr.itemsize, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body = header + arr.tobytes()
        out += [body, struct.pack("<I", zlib.crc32(body))]
    return b"".join(out)


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_raw = r.take(r.u32())
    if zlib.crc32(meta_raw) != r.u32():
        raise CheckpointError("checksum mismatch in metadata block")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        start = r.pos
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        itemsize, ndim = struct.unpack("<BI", r.take(5))
        if itemsize not in _DTYPES or ndim > 8:
            raise CheckpointError(f"bad block header for {name!r}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        raw = r.take(itemsize * int(np.prod(shape, dtype=np.int64)))
        body = r.data[start : r.pos]
        if zlib.crc32(body) != r.u32():
            raise CheckpointError(f"checksum mismatch in block {name!r}")
        value = np.frombuffer(raw, dtype=_DTYPES[itemsize]).reshape(shape).astype(_DTYPES[itemsize].newbyteorder("="))
        tensors[name] = ParamTensor(name, value)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after the last block")
    model_cfg = ModelConfig(**meta["model_config"])
    train_cfg = TrainConfig(**meta["train_config"]) if meta["train_config"] is not None else None
    return Checkpoint(
        model_cfg,
        ModelParams(model_cfg, tensors),
        Vocabulary.from_dict(meta["vocabulary"]),
        train_cfg,
        meta["epoch"],
        meta["rng_state"],
    )


# ---------------------------------------------------------------- training loop


def sgd_step(params: ModelParams, lr: float, clip: float) -> float:
    norm = nm.clip_grad_norm(list(params), clip)
    for p in params:
        p.value -= lr * p.grad
    return norm


def train(
    dataset: Sequence[tuple[Sequence[str], Sequence[str]]],
    val_set: Sequence[tuple[Sequence[str], Sequence[str]]],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    vocab: Vocabulary | None = None,
    out_dir=None,
) -> tuple[ModelParams, TrainHistory, Vocabulary]:
    """Train on ``(source tokens, tagged target tokens)`` pairs.

    With ``out_dir`` set, writes ``epoch_NNN.noie`` after every epoch,
    ``best.noie`` for the lowest validation perplexity (training loss when no
    validation data is given) and ``history.csv``.
    """
    if not dataset:
        raise ValueError("empty training set")
    if vocab is None:
        vocab = build_vocab((tok for s, t in dataset for tok in (s, t)), cfg.vocab_max_size)
    model_cfg = replace(model_cfg, vocab_size=len(vocab), dropout=cfg.dropout, precision=cfg.precision)
    init_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = ModelParams.init(model_cfg, np.random.Generator(np.random.PCG64(init_seq)))
    drop_rng = np.random.Generator(np.random.PCG64(drop_seq))
    train_ex = prepare_examples(dataset, vocab)
    val_ex = prepare_examples(val_set, vocab)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = TrainHistory()
    best = math.inf
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        shard = partition_and_sample(train_ex, cfg.partitions, epoch, cfg.seed)
        batch_rng = np.random.Generator(np.random.PCG64([cfg.seed, epoch, 1]))
        total, tokens = 0.0, 0
        for batch in make_batches(shard, cfg.batch_size, model_cfg, batch_rng):
            params.zero_grad()
            loss, _ = compute_loss(batch, params, drop_rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}; last good checkpoint kept")
            sgd_step(params, lr, cfg.grad_clip_norm)
            total += loss * batch.num_tokens
            tokens += batch.num_tokens
        mean_loss = total / tokens
        val_ppl = perplexity(params, val_ex) if val_ex else float("nan")
        rec = EpochRecord(epoch, mean_loss, val_ppl, lr, time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d lr %.4g loss %.4f val_ppl %.3f (%.1fs)", epoch, lr, mean_loss, val_ppl, rec.seconds)
        if out is not None:
            ck = Checkpoint(model_cfg, params, vocab, cfg, epoch, drop_rng.bit_generator.state)
            save_checkpoint(out / f"epoch_{epoch:03d}.noie", ck)
            score = val_ppl if val_ex else mean_loss
            if score < best:
                best = score
                save_checkpoint(out / "best.noie", ck)
            history.write_csv(out / "history.csv")
    params.zero_grad()
    return params, history, vocab
