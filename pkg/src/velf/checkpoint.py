"""Binary checkpoint format.

Layout, little-endian throughout:

    magic   4 bytes  b"VELF"
    version u32      currently 1
    count   u32      number of sections
    then per section:
        name    u16 length + utf-8 bytes
        ndim    u8
        dims    u32 each
        payload float32 values, C order

Everything lives in named float32 sections: parameters under "param/",
frequency counts under "freq/", the field schema as zero-arity facts
encoded in section names ("schema/<i>/<name>/<kind>" holding the vocab
size), the config echo under "cfg/", and the per-epoch log under "log/".
Counts and small ints survive the float32 round trip exactly below 2^24;
float config values (learning rate, gate epsilon) are echoed at float32
precision.
"""

import struct
from pathlib import Path

import numpy as np

from .data import Field, FieldSchema
from .model import HEADS, VARIANTS, VelfModel
from .training import BREAKDOWN_FIELDS, TrainConfig, TrainResult
from .varembed import FrequencyTable

MAGIC = b"VELF"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def _sections_from_result(result: TrainResult) -> dict[str, np.ndarray]:
    model = result.model
    cfg = result.config
    sections: dict[str, np.ndarray] = {}
    for name, tensor in model.params().items():
        sections[f"param/{name}"] = tensor.data
    sections["freq/user"] = model.freq_user.counts
    sections["freq/item"] = model.freq_item.counts
    for i, f in enumerate(model.schema.fields):
        sections[f"schema/{i}/{f.name}/{f.kind}"] = np.array([f.size])
    cfg_scalars = {
        "variant": VARIANTS.index(cfg.variant),
        "head": HEADS.index(cfg.head),
        "dim": cfg.dim,
        "hidden": cfg.hidden,
        "n_layers": cfg.n_layers,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "anneal_steps": 0 if cfg.anneal_steps is None else cfg.anneal_steps,
        "seed": cfg.seed,
        "monte_carlo": cfg.monte_carlo,
        "gate_eps": cfg.gate_eps,
        "include_attr_fields": int(cfg.include_attr_fields),
        "log_train_auc": int(cfg.log_train_auc),
    }
    for k, v in cfg_scalars.items():
        sections[f"cfg/{k}"] = np.array([v])
    log_fields = ("epoch",) + BREAKDOWN_FIELDS + ("alpha",)
    for k in log_fields:
        sections[f"log/{k}"] = np.array(
            [entry[k] for entry in result.epoch_log])
    if result.epoch_log and all("train_auc" in e for e in result.epoch_log):
        sections["log/train_auc"] = np.array(
            [e["train_auc"] for e in result.epoch_log])
    return sections


def save_checkpoint(result: TrainResult, path) -> bytes:
    """Serialise a TrainResult; returns the bytes it wrote (or would
    write, when path is None)."""
    sections = _sections_from_result(result)
    out = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    blob = b"".join(out)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(
                f"checkpoint truncated reading {what}: wanted {n} bytes at "
                f"offset {self.pos}, file has {len(self.blob)}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk


def read_sections(path_or_bytes) -> dict[str, np.ndarray]:
    blob = (path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray))
            else Path(path_or_bytes).read_bytes())
    r = _Reader(bytes(blob))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}")
    sections: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, f"section {i} name length"))
        name = r.take(nlen, f"section {i} name").decode("utf-8")
        (ndim,) = struct.unpack("<B", r.take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} dims"))
        size = int(np.prod(dims)) if ndim else 1
        payload = r.take(4 * size, f"{name} payload")
        sections[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if r.pos != len(r.blob):
        raise CheckpointError(
            f"{len(r.blob) - r.pos} trailing bytes after last section")
    return sections


def _require(sections, name) -> np.ndarray:
    if name not in sections:
        raise CheckpointError(f"missing section {name!r}")
    return sections[name]


def load_checkpoint(path_or_bytes) -> TrainResult:
    """Rebuild (model, epoch log, config echo) from a checkpoint."""
    sections = read_sections(path_or_bytes)

    schema_rows = []
    for name in sections:
        if name.startswith("schema/"):
            parts = name.split("/")
            if len(parts) != 4:
                raise CheckpointError(f"malformed schema section {name!r}")
            schema_rows.append((int(parts[1]), parts[2], parts[3],
                                int(sections[name][0])))
    if not schema_rows:
        raise CheckpointError("checkpoint carries no schema sections")
    schema_rows.sort()
    schema = FieldSchema(tuple(Field(n, k, s) for _, n, k, s in schema_rows))

    def scalar(key, cast=int):
        return cast(float(_require(sections, f"cfg/{key}")[0]))

    variant_i, head_i = scalar("variant"), scalar("head")
    if not 0 <= variant_i < len(VARIANTS):
        raise CheckpointError(f"variant index {variant_i} out of range")
    if not 0 <= head_i < len(HEADS):
        raise CheckpointError(f"head index {head_i} out of range")
    anneal = scalar("anneal_steps")
    cfg = TrainConfig(
        variant=VARIANTS[variant_i],
        head=HEADS[head_i],
        dim=scalar("dim"),
        hidden=scalar("hidden"),
        n_layers=scalar("n_layers"),
        batch_size=scalar("batch_size"),
        learning_rate=scalar("learning_rate", float),
        epochs=scalar("epochs"),
        anneal_steps=None if anneal == 0 else anneal,
        seed=scalar("seed"),
        monte_carlo=scalar("monte_carlo"),
        gate_eps=scalar("gate_eps", float),
        include_attr_fields=bool(scalar("include_attr_fields")),
        log_train_auc=bool(scalar("log_train_auc")),
    ).validate()

    freq_user = FrequencyTable(
        _require(sections, "freq/user").astype(np.int64), kind="user")
    freq_item = FrequencyTable(
        _require(sections, "freq/item").astype(np.int64), kind="item")

    model = VelfModel.create(
        schema, freq_user, freq_item, variant=cfg.variant, dim=cfg.dim,
        hidden=cfg.hidden, n_layers=cfg.n_layers, head=cfg.head,
        include_attr_fields=cfg.include_attr_fields, gate_eps=cfg.gate_eps,
        seed=cfg.seed)
    for name, tensor in model.params().items():
        saved = _require(sections, f"param/{name}")
        if saved.shape != tensor.data.shape:
            raise CheckpointError(
                f"param {name!r}: checkpoint shape {saved.shape} does not "
                f"match configured shape {tensor.data.shape}")
        tensor.data[...] = saved

    log_fields = ("epoch",) + BREAKDOWN_FIELDS + ("alpha",)
    arrays = {k: _require(sections, f"log/{k}") for k in log_fields}
    n_epochs = arrays["epoch"].size
    for k, a in arrays.items():
        if a.size != n_epochs:
            raise CheckpointError(f"log section {k!r} length mismatch")
    epoch_log = []
    for i in range(n_epochs):
        entry = {"epoch": int(arrays["epoch"][i])}
        for k in BREAKDOWN_FIELDS + ("alpha",):
            entry[k] = float(arrays[k][i])
        if "log/train_auc" in sections:
            entry["train_auc"] = float(sections["log/train_auc"][i])
        epoch_log.append(entry)
    return TrainResult(model, epoch_log, cfg)
