"""Training loops, checkpoint persistence, and experiment configuration.

Checkpoint format: 8-byte magic "SSNTCKPT", little-endian uint32 version,
little-endian uint64 manifest length, a UTF-8 JSON manifest (kind, config
snapshot, vocabularies, history, tensor name/shape/offset table), then the
raw tensor payloads as little-endian float64, in manifest order. The save
-> load -> save round trip is byte-identical.

Config files are flat ``key=value`` text, one pair per line, ``#`` for
comments.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import corpus as corpus_mod
from . import tensor as T
from .corpus import Batch, ParallelPair, PreprocessRules, TokenSequence, Vocabulary, batches
from .errors import ConfigError, DataError, TrainingDiverged
from .lm import LmConfig, LmModel
from .tensor import Adam, RngState, Tape
from .transducer import SsntConfig, SsntModel

log = logging.getLogger(__name__)

MAGIC = b"SSNTCKPT"
FORMAT_VERSION = 1

ROLES = ("direct", "channel", "lm")


@dataclass
class TrainConfig:
    role: str
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    dropout: float = 0.2
    hidden_size: int = 256
    embed_size: int | None = None
    emit_hidden: int | None = None
    layers: int = 1
    seed: int = 42
    patience: int = 5
    clip_norm: float = 5.0
    bidirectional: bool = False
    min_count: int = 5
    lowercase: bool = False
    digit_to_hash: bool = False
    max_src_len: int | None = None
    max_tgt_len: int | None = None
    src_vocab: str | None = None
    tgt_vocab: str | None = None
    vocab: str | None = None
    dev_src: str | None = None
    dev_tgt: str | None = None
    dev_text: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.role == "channel" and self.bidirectional:
            raise ConfigError("the channel role requires a unidirectional encoder")

    @classmethod
    def for_role(cls, role: str, **overrides) -> "TrainConfig":
        defaults = {"role": role}
        if role == "lm":
            defaults.update(learning_rate=0.0001, dropout=0.5, hidden_size=1024, layers=2)
        cfg = cls(**defaults)
        return replace(cfg, **overrides) if overrides else cfg

    def rules(self) -> PreprocessRules:
        return PreprocessRules(
            lowercase=self.lowercase, digit_to_hash=self.digit_to_hash,
            min_count=self.min_count, max_src_len=self.max_src_len,
            max_tgt_len=self.max_tgt_len)


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_file(path: str) -> dict[str, str]:
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


def config_from_file(role: str, path: str | None, **overrides) -> TrainConfig:
    """Build a TrainConfig from a key=value file plus explicit overrides."""
    values: dict = {}
    if path is not None:
        raw = parse_config_file(path)
        types = {f.name: f.type for f in fields(TrainConfig)}
        for key, text in raw.items():
            if key == "role":
                raise ConfigError("role is fixed by the command line, not the config file")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _convert(key, text)
    values.update(overrides)
    return TrainConfig.for_role(role, **values)


def _convert(key: str, text: str):
    int_keys = {"epochs", "batch_size", "hidden_size", "embed_size", "emit_hidden",
                "layers", "seed", "patience", "min_count", "max_src_len", "max_tgt_len"}
    float_keys = {"learning_rate", "dropout", "clip_norm"}
    bool_keys = {"bidirectional", "lowercase", "digit_to_hash"}
    if key in int_keys:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"config key {key} expects an integer, got {text!r}") from exc
    if key in float_keys:
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"config key {key} expects a number, got {text!r}") from exc
    if key in bool_keys:
        if text.lower() not in _BOOL_VALUES:
            raise ConfigError(f"config key {key} expects a boolean, got {text!r}")
        return _BOOL_VALUES[text.lower()]
    return text


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str                      # "ssnt" | "lm"
    role: str
    config: dict
    tensors: dict[str, np.ndarray]
    vocabs: dict[str, list[str]]
    history: list[dict]
    best_epoch: int

    def save(self, path: str):
        entries = []
        offset = 0
        for name, arr in self.tensors.items():
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        manifest = {
            "kind": self.kind,
            "role": self.role,
            "config": self.config,
            "vocabs": self.vocabs,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "tensors": entries,
        }
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(FORMAT_VERSION.to_bytes(4, "little"))
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for arr in self.tensors.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != MAGIC:
            raise DataError(f"{path}: bad magic {data[:8]!r}, expected {MAGIC!r}")
        version = int.from_bytes(data[8:12], "little")
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}, "
                            f"expected {FORMAT_VERSION}")
        manifest_len = int.from_bytes(data[12:20], "little")
        manifest_end = 20 + manifest_len
        if len(data) < manifest_end:
            raise DataError(f"{path}: truncated manifest, expected {manifest_end} bytes, "
                            f"found {len(data)}")
        manifest = json.loads(data[20:manifest_end].decode("utf-8"))
        payload = data[manifest_end:]
        expected_payload = sum(
            int(np.prod(e["shape"])) * 8 if e["shape"] else 8 for e in manifest["tensors"])
        if len(payload) != expected_payload:
            raise DataError(
                f"{path}: truncated payload, expected {manifest_end + expected_payload} bytes, "
                f"found {len(data)}")
        tensors = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
            tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
        return cls(
            kind=manifest["kind"], role=manifest["role"], config=manifest["config"],
            tensors=tensors, vocabs=manifest["vocabs"], history=manifest["history"],
            best_epoch=manifest["best_epoch"])

    # -- model reconstruction ------------------------------------------------

    def build_model(self):
        if self.kind == "ssnt":
            cfg = SsntConfig(
                src_vocab_size=len(self.vocabs["src"]),
                tgt_vocab_size=len(self.vocabs["tgt"]),
                hidden_size=int(self.config["hidden_size"]),
                embed_size=self.config.get("embed_size"),
                emit_hidden=self.config.get("emit_hidden"),
                bidirectional=bool(self.config.get("bidirectional", False)))
            model = SsntModel(cfg, RngState(0))
        elif self.kind == "lm":
            cfg = LmConfig(
                vocab_size=len(self.vocabs["lm"]),
                hidden_size=int(self.config["hidden_size"]),
                layers=int(self.config.get("layers", 2)),
                embed_size=self.config.get("embed_size"))
            model = LmModel(cfg, RngState(0))
        else:
            raise DataError(f"unknown checkpoint kind {self.kind!r}")
        params = {p.name: p for p in model.parameters()}
        if set(params) != set(self.tensors):
            missing = set(params) ^ set(self.tensors)
            raise DataError(f"checkpoint tensor names do not match the model: {sorted(missing)}")
        for name, arr in self.tensors.items():
            if params[name].data.shape != arr.shape:
                raise DataError(
                    f"checkpoint tensor {name} has shape {arr.shape}, "
                    f"model expects {params[name].data.shape}")
            params[name].data = arr.copy()
        return model

    def vocabulary(self, which: str) -> Vocabulary:
        return Vocabulary(self.vocabs[which])

    def preprocess_rules(self) -> PreprocessRules:
        return PreprocessRules(
            lowercase=bool(self.config.get("lowercase", False)),
            digit_to_hash=bool(self.config.get("digit_to_hash", False)),
            min_count=int(self.config.get("min_count", 1)),
            max_src_len=self.config.get("max_src_len"),
            max_tgt_len=self.config.get("max_tgt_len"))


def _config_snapshot(config: TrainConfig) -> dict:
    snap = {}
    for f in fields(TrainConfig):
        snap[f.name] = getattr(config, f.name)
    return snap


def _param_snapshot(model) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _train_loop(config: TrainConfig, model, data, dev_data, batch_loss, dev_loss,
                make_checkpoint):
    """Epoch loop shared by both model kinds: shuffled mini-batches, mean
    per-example loss, gradient clipping, Adam, best-dev tracking with early
    stopping, divergence abort."""
    rng = RngState(config.seed)
    drop_rng = rng.derive(1)
    shuffle_rng = rng.derive(2)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    history: list[dict] = []
    best = (float("inf"), _param_snapshot(model), 0)
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for batch in batches(data, config.batch_size, shuffle_rng.generator, shuffle=True):
            with Tape() as tape:
                loss = batch_loss(batch, drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                ckpt = make_checkpoint(best[1], history, best[2])
                raise TrainingDiverged(
                    f"non-finite loss {value} in epoch {epoch}; aborting with the "
                    f"best checkpoint from epoch {best[2]}", ckpt)
            T.backward(tape, loss)
            T.clip_global_norm(model.parameters(), config.clip_norm)
            opt.step()
            total += value * len(batch)
            count += len(batch)
        dev_value = dev_loss(dev_data if dev_data is not None else data)
        history.append({"epoch": epoch, "train_nll": total / max(count, 1),
                        "dev_nll": dev_value})
        log.info("epoch %d: train nll %.4f, dev nll %.4f", epoch, total / max(count, 1), dev_value)
        if np.isfinite(dev_value) and dev_value < best[0]:
            best = (dev_value, _param_snapshot(model), epoch)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                log.info("early stop after %d epochs without dev improvement", since_best)
                break
    return make_checkpoint(best[1], history, best[2])


def train_transducer(config: TrainConfig, pairs: list[ParallelPair],
                     src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                     dev_pairs: list[ParallelPair] | None = None) -> Checkpoint:
    """Train one transducer. For the channel role the caller passes pairs
    already swapped; the role tag is metadata only."""
    if not pairs:
        raise DataError("training set is empty")
    rng = RngState(config.seed)
    model_cfg = SsntConfig(
        src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
        hidden_size=config.hidden_size, embed_size=config.embed_size,
        emit_hidden=config.emit_hidden, bidirectional=config.bidirectional)
    model = SsntModel(model_cfg, rng.derive(0))

    def batch_loss(batch: Batch, drop_rng):
        losses = model.batch_nll_losses(batch.items, config.dropout, drop_rng, training=True)
        return T.mean_(T.stack(losses))

    def dev_loss(dev):
        vals = [model.sequence_nll(p.source.ids, p.target.ids).item() for p in dev]
        return float(np.mean(vals))

    def make_checkpoint(tensors, history, best_epoch):
        return Checkpoint(
            kind="ssnt", role=config.role, config=_config_snapshot(config),
            tensors=tensors, vocabs={"src": src_vocab.tokens, "tgt": tgt_vocab.tokens},
            history=history, best_epoch=best_epoch)

    return _train_loop(config, model, pairs, dev_pairs, batch_loss, dev_loss, make_checkpoint)


def train_lm(config: TrainConfig, sequences: list[TokenSequence], vocab: Vocabulary,
             dev_sequences: list[TokenSequence] | None = None) -> Checkpoint:
    if not sequences:
        raise DataError("training set is empty")
    rng = RngState(config.seed)
    model_cfg = LmConfig(vocab_size=len(vocab), hidden_size=config.hidden_size,
                         layers=config.layers, embed_size=config.embed_size)
    model = LmModel(model_cfg, rng.derive(0))

    def batch_loss(batch: Batch, drop_rng):
        return model.batch_nll(batch.source, batch.source_lengths, config.dropout,
                               drop_rng, training=True)

    def dev_loss(dev):
        vals = [model.lm_nll(seq.ids).item() for seq in dev]
        return float(np.mean(vals))

    def make_checkpoint(tensors, history, best_epoch):
        return Checkpoint(
            kind="lm", role="lm", config=_config_snapshot(config),
            tensors=tensors, vocabs={"lm": vocab.tokens},
            history=history, best_epoch=best_epoch)

    return _train_loop(config, model, sequences, dev_sequences, batch_loss, dev_loss,
                       make_checkpoint)


# ---------------------------------------------------------------------------
# File-level orchestration (used by the command line)
# ---------------------------------------------------------------------------

def _load_or_build_vocab(path: str | None, streams, min_count: int) -> Vocabulary:
    if path is not None:
        return Vocabulary.load(path)
    return corpus_mod.build_vocab(streams, min_count)


def run_training(config: TrainConfig, src: str | None = None, tgt: str | None = None,
                 text: str | None = None) -> Checkpoint:
    """Load data per the config, train, and return the checkpoint.

    The channel role reads the same parallel files as the direct role and
    swaps each pair, so its input side is the original target language.
    """
    rules = config.rules()
    if config.role == "lm":
        if text is None:
            raise ConfigError("role lm requires --text")
        token_lines = [t for t in corpus_mod.read_token_lines(text, rules) if t]
        vocab = _load_or_build_vocab(config.vocab, token_lines, config.min_count)
        seqs = corpus_mod.load_text(text, rules, vocab)
        dev = corpus_mod.load_text(config.dev_text, rules, vocab) if config.dev_text else None
        return train_lm(config, seqs, vocab, dev)

    if src is None or tgt is None:
        raise ConfigError(f"role {config.role} requires --src and --tgt")
    src_vocab = _load_or_build_vocab(
        config.src_vocab, corpus_mod.read_token_lines(src, rules), config.min_count)
    tgt_vocab = _load_or_build_vocab(
        config.tgt_vocab, corpus_mod.read_token_lines(tgt, rules), config.min_count)
    loaded = corpus_mod.load_parallel(src, tgt, rules, src_vocab, tgt_vocab)
    dev_pairs = None
    if config.dev_src and config.dev_tgt:
        dev_pairs = corpus_mod.load_parallel(
            config.dev_src, config.dev_tgt, rules, src_vocab, tgt_vocab).pairs
    if config.role == "channel":
        pairs = [p.swapped() for p in loaded.pairs]
        dev_pairs = [p.swapped() for p in dev_pairs] if dev_pairs is not None else None
        return train_transducer(config, pairs, tgt_vocab, src_vocab, dev_pairs)
    return train_transducer(config, loaded.pairs, src_vocab, tgt_vocab, dev_pairs)
