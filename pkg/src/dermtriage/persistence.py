"""Binary model and embedding files, dataset manifests and CSV reports.

Model file ("PDLSMDL1"), all little-endian::

    magic[8] | u32 version | u32 kind | u32 n_models | model blocks
    | thresholds section | color-stats section | u64 checksum

The checksum is an 8-byte BLAKE2b digest of every preceding byte.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import mil, nn
from .errors import CorruptModelError, InconsistentDatasetError, InvalidInputError
from .hierarchy import MODEL_NAMES, PDLSModel
from .qc import RefColorStats
from .taxonomy import CLASSES, SpecimenClass
from .uncertainty import CalibrationTargets, ThresholdSet

MODEL_MAGIC = b"PDLSMDL1"
EMB_MAGIC = b"PDLSEMB1"
FORMAT_VERSION = 1
KIND_HIERARCHY = 1
KIND_SINGLE = 2
CHECKSUM_BYTES = 8


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# low-level encoding


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u8(self, v):
        self.buf.write(struct.pack("<B", v))

    def u16(self, v):
        self.buf.write(struct.pack("<H", v))

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def f64(self, v):
        self.buf.write(struct.pack("<d", v))

    def text(self, s: str):
        b = s.encode("utf-8")
        if len(b) > 0xFFFF:
            raise InvalidInputError("string too long to store")
        self.u16(len(b))
        self.buf.write(b)

    def array(self, a: np.ndarray):
        self.buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptModelError("file truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self):
        return self._unpack("<B")

    def u16(self):
        return self._unpack("<H")

    def u32(self):
        return self._unpack("<I")

    def f64(self):
        return self._unpack("<d")

    def text(self) -> str:
        try:
            return self.take(self.u16()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptModelError(f"bad string: {exc}") from None

    def array(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def _write_bag_model(w: _Writer, m: mil.BagModel) -> None:
    w.f64(m.dropout_rate)
    w.u32(len(m.encoder.layers))
    for layer in m.encoder.layers:
        w.u32(layer.n_out)
        w.u32(layer.n_in)
        w.text(layer.activation)
        w.array(layer.weight)
        w.array(layer.bias)
    att = m.attention
    w.u32(att.V.shape[0])
    w.u32(att.V.shape[1])
    w.array(att.V)
    w.array(att.U)
    w.array(att.w)
    w.u32(len(m.heads))
    for hd in m.heads:
        w.text(hd.name)
        w.u32(len(hd.classes))
        for c in hd.classes:
            w.text(str(c))
        w.u32(hd.weight.shape[1])
        w.array(hd.weight)
        w.array(hd.bias)


def _read_bag_model(r: _Reader) -> mil.BagModel:
    rate = r.f64()
    layers = []
    for _ in range(r.u32()):
        n_out, n_in = r.u32(), r.u32()
        act = r.text()
        layers.append(nn.Dense(r.array(n_out, n_in), r.array(n_out), act))
    da, h = r.u32(), r.u32()
    att = mil.AttentionParams(r.array(da, h), r.array(da, h), r.array(da))
    heads = []
    for _ in range(r.u32()):
        name = r.text()
        classes = tuple(r.text() for _ in range(r.u32()))
        hin = r.u32()
        heads.append(mil.TaskHead(name, classes, r.array(len(classes), hin), r.array(len(classes))))
    return mil.BagModel(nn.MLPParams(layers), att, heads, rate)


def _write_thresholds(w: _Writer, t: Optional[ThresholdSet]) -> None:
    w.u8(t is not None)
    if t is None:
        return
    w.u32(len(t.accuracy))
    for k in sorted(t.accuracy):
        w.text(k)
        w.f64(t.accuracy[k])
        w.f64(t.targets.accuracy.get(k, float("nan")))
    w.f64(t.ppv)
    w.f64(t.targets.ppv)
    w.u32(len(t.unattainable))
    for k in sorted(t.unattainable):
        w.text(k)


def _read_thresholds(r: _Reader) -> Optional[ThresholdSet]:
    if not r.u8():
        return None
    acc, targets = {}, {}
    for _ in range(r.u32()):
        k = r.text()
        acc[k], targets[k] = r.f64(), r.f64()
    ppv, target_ppv = r.f64(), r.f64()
    unattainable = frozenset(r.text() for _ in range(r.u32()))
    return ThresholdSet(acc, ppv, CalibrationTargets(targets, target_ppv), unattainable)


def _write_color(w: _Writer, stats: Optional[RefColorStats]) -> None:
    w.u8(stats is not None)
    if stats is not None:
        for v in tuple(stats.mean) + tuple(stats.std):
            w.f64(v)


def _read_color(r: _Reader) -> Optional[RefColorStats]:
    if not r.u8():
        return None
    v = [r.f64() for _ in range(6)]
    return RefColorStats(tuple(v[:3]), tuple(v[3:]))


def model_to_bytes(model) -> bytes:
    """Serialize a :class:`PDLSModel` or a single :class:`BagModel` (e.g. the ink detector)."""
    w = _Writer()
    w.buf.write(MODEL_MAGIC)
    w.u32(FORMAT_VERSION)
    if isinstance(model, PDLSModel):
        w.u32(KIND_HIERARCHY)
        members = model.members()
        w.u32(len(members))
        for name in MODEL_NAMES:
            w.text(name)
            _write_bag_model(w, members[name])
        _write_thresholds(w, model.thresholds)
        _write_color(w, model.color_stats)
    elif isinstance(model, mil.BagModel):
        w.u32(KIND_SINGLE)
        w.u32(1)
        w.text("model")
        _write_bag_model(w, model)
        _write_thresholds(w, None)
        _write_color(w, None)
    else:
        raise InvalidInputError(f"cannot serialize {type(model).__name__}")
    payload = w.buf.getvalue()
    return payload + checksum(payload)


def model_from_bytes(data: bytes):
    if len(data) < len(MODEL_MAGIC) + 4 + CHECKSUM_BYTES:
        raise CorruptModelError("file truncated")
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise CorruptModelError("bad magic; not a model file")
    payload, digest = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if checksum(payload) != digest:
        raise CorruptModelError("checksum mismatch")
    r = _Reader(payload)
    r.take(len(MODEL_MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CorruptModelError(f"unsupported format version {version}")
    kind = r.u32()
    try:
        models = {}
        for _ in range(r.u32()):
            name = r.text()
            models[name] = _read_bag_model(r)
        thresholds = _read_thresholds(r)
        color = _read_color(r)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, CorruptModelError):
            raise
        raise CorruptModelError(f"malformed model block: {exc}") from None
    if r.pos != len(payload):
        raise CorruptModelError("trailing bytes after model payload")
    if kind == KIND_HIERARCHY:
        if set(models) != set(MODEL_NAMES):
            raise CorruptModelError(f"expected members {MODEL_NAMES}, found {sorted(models)}")
        return PDLSModel(models["upstream"], models["suspect_sub"], models["rest_sub"], thresholds, color)
    if kind == KIND_SINGLE and len(models) == 1:
        return next(iter(models.values()))
    raise CorruptModelError(f"unknown model kind {kind}")


def save_model(model, path) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# datasets

MANIFEST_COLUMNS = ("specimen_id", "lab_id", "class", "diagnosis", "split", "n_tiles", "embedding_offset")


def embeddings_to_bytes(records: Sequence) -> tuple:
    """Encode ``(specimen_id, tiles)`` records; returns ``(bytes, offsets)``."""
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    buf.write(struct.pack("<I", len(records)))
    offsets = []
    for sid, tiles in records:
        tiles = np.asarray(tiles)
        offsets.append(buf.tell())
        b = sid.encode("utf-8")
        buf.write(struct.pack("<H", len(b)))
        buf.write(b)
        buf.write(struct.pack("<II", tiles.shape[0], tiles.shape[1]))
        buf.write(np.ascontiguousarray(tiles, dtype="<f4").tobytes())
    return buf.getvalue(), offsets


def read_embeddings(path) -> Dict[str, np.ndarray]:
    """Read a "PDLSEMB1" file into ``{specimen_id: (n_tiles, dim) float64}``."""
    return {sid: arr for sid, (arr, _) in _read_embedding_records(Path(path).read_bytes()).items()}


def _read_embedding_records(data: bytes) -> Dict[str, tuple]:
    if data[:len(EMB_MAGIC)] != EMB_MAGIC:
        raise InconsistentDatasetError("embedding file has bad magic")
    pos = len(EMB_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise InconsistentDatasetError("embedding file truncated")
        out = data[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out, dim = {}, None
    for _ in range(count):
        offset = pos
        (n_id,) = struct.unpack("<H", take(2))
        sid = take(n_id).decode("utf-8")
        n, d = struct.unpack("<II", take(8))
        if dim is not None and d != dim:
            raise InconsistentDatasetError(f"specimen {sid}: embedding dim {d} differs from {dim}")
        dim = d
        if sid in out:
            raise InconsistentDatasetError(f"specimen {sid}: duplicate embedding record")
        arr = np.frombuffer(take(4 * n * d), dtype="<f4").astype(np.float64).reshape(n, d)
        out[sid] = (arr, offset)
    if pos != len(data):
        raise InconsistentDatasetError("trailing bytes after embedding records")
    return out


def save_dataset(bags: Sequence[mil.SpecimenBag], manifest_path, embeddings_path) -> None:
    ids = [b.specimen_id for b in bags]
    if len(set(ids)) != len(ids):
        raise InconsistentDatasetError("specimen ids are not unique")
    dims = {b.tiles.shape[1] for b in bags}
    if len(dims) > 1:
        raise InconsistentDatasetError(f"bags disagree on embedding dim: {sorted(dims)}")
    data, offsets = embeddings_to_bytes([(b.specimen_id, b.tiles) for b in bags])
    rows = [(b.specimen_id, b.lab_id, str(SpecimenClass(b.label)), b.diagnosis or "", b.split,
             b.tiles.shape[0], off) for b, off in zip(bags, offsets)]
    atomic_write_bytes(embeddings_path, data)
    atomic_write_text(manifest_path, csv_text(MANIFEST_COLUMNS, rows))


def read_manifest(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise InconsistentDatasetError(f"manifest columns {reader.fieldnames} != {list(MANIFEST_COLUMNS)}")
        rows = list(reader)
    valid = {c.value for c in CLASSES}
    seen = set()
    for row in rows:
        sid = row["specimen_id"]
        if sid in seen:
            raise InconsistentDatasetError(f"specimen {sid}: duplicate manifest row")
        seen.add(sid)
        if row["class"] not in valid:
            raise InconsistentDatasetError(f"specimen {sid}: unknown class {row['class']!r}")
    return rows


def load_dataset(manifest_path, embeddings_path) -> List[mil.SpecimenBag]:
    rows = read_manifest(manifest_path)
    records = _read_embedding_records(Path(embeddings_path).read_bytes())
    bags = []
    for row in rows:
        sid = row["specimen_id"]
        if sid not in records:
            raise InconsistentDatasetError(f"specimen {sid}: no embedding record")
        tiles, offset = records[sid]
        if int(row["n_tiles"]) != tiles.shape[0]:
            raise InconsistentDatasetError(f"specimen {sid}: manifest says {row['n_tiles']} tiles, "
                                           f"embeddings hold {tiles.shape[0]}")
        if row["embedding_offset"] and int(row["embedding_offset"]) != offset:
            raise InconsistentDatasetError(f"specimen {sid}: embedding offset mismatch")
        bags.append(mil.SpecimenBag(sid, tiles, SpecimenClass(row["class"]), row["lab_id"], row["split"],
                                    row["diagnosis"] or None))
    extra = sorted(set(records) - {r["specimen_id"] for r in rows})
    if extra:
        raise InconsistentDatasetError(f"specimen {extra[0]}: embedding record without manifest row")
    return bags


# ---------------------------------------------------------------------------
# CSV reports


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = (),
             timestamp: bool = False) -> str:
    """CSV with optional leading ``#`` comment lines; floats are written round-trip exact."""
    out = io.StringIO()
    if timestamp:
        out.write(f"# generated {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}\n")
    for c in comments:
        out.write(f"# {c}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return out.getvalue()


def write_csv(path, header, rows, comments=(), timestamp: bool = False) -> None:
    atomic_write_text(path, csv_text(header, rows, comments, timestamp))


def read_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(row for row in fh if not row.startswith("#")))


def prediction_table(predictions: Sequence) -> tuple:
    """Header and rows for a predictions CSV.

    Raw head confidences are included so every routing decision can be
    replayed offline.
    """
    if not predictions:
        return ("specimen_id", "final_label", "low_confidence", "branch", "predicted", "confidence",
                "upstream_suspect_confidence"), []
    first = predictions[0]
    score_cols = list(first.class_scores())
    conf_cols = [(m, h, c) for m, cv in first.confidences.items() for h in cv.classes for c in cv.classes[h]]
    header = ["specimen_id", "final_label", "low_confidence", "branch", "predicted", "confidence",
              "upstream_suspect_confidence"]
    header += [f"score:{c}" for c in score_cols] + [f"{m}/{h}/{c}" for m, h, c in conf_cols]
    rows = []
    for p in predictions:
        scores = p.class_scores()
        rows.append([p.specimen_id, p.final.name, p.final.low_confidence, p.branch, p.predicted, p.confidence,
                     p.upstream_suspect_confidence] + [scores[c] for c in score_cols]
                    + [p.confidences[m].get(h, c) for m, h, c in conf_cols])
    return header, rows
