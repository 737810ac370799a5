import hashlib
import struct

import numpy as np
import pytest

from dermtriage import hierarchy, mil, persistence, synth
from dermtriage.errors import CorruptModelError, InconsistentDatasetError
from dermtriage.persistence import load_dataset, load_model, model_from_bytes, model_to_bytes, save_dataset, save_model
from dermtriage.qc import RefColorStats
from dermtriage.taxonomy import CLASSES
from dermtriage.uncertainty import CalibrationTargets, MCConfig, ThresholdSet

MC = MCConfig(6, 1)


@pytest.fixture(scope="module")
def model():
    m = hierarchy.init_hierarchy(12, hierarchy.HierarchyConfig(width=16, seed=3))
    m.thresholds = ThresholdSet({c.value: 0.1 * i for i, c in enumerate(CLASSES)}, 0.75,
                                CalibrationTargets.uniform(0.9, 0.6), frozenset({"mel_int"}))
    m.color_stats = RefColorStats((200.0, 120.5, 170.25), (20.0, 25.0, 15.0))
    return m


@pytest.fixture(scope="module")
def bags():
    protos = synth.PrototypeSet.make(12, seed=0)
    return synth.gen_dataset({c: 3 for c in CLASSES}, protos, params=synth.BagParams(n_tiles=(2, 9)), seed=1)


def test_header_layout(model):
    data = model_to_bytes(model)
    assert data[:8] == b"PDLSMDL1"
    assert struct.unpack("<III", data[8:20]) == (1, persistence.KIND_HIERARCHY, 3)
    # trailer is an 8-byte blake2b digest of everything before it
    assert data[-8:] == hashlib.blake2b(data[:-8], digest_size=8).digest()


def test_round_trip_is_bit_identical(tmp_path, model, bags):
    path = tmp_path / "m.pdls"
    save_model(model, path)
    back = load_model(path)
    assert model_to_bytes(back) == path.read_bytes()
    assert back.thresholds == model.thresholds and back.color_stats == model.color_stats
    for bag in bags[:5]:
        a = hierarchy.infer_specimen(model, bag, MC)
        b = hierarchy.infer_specimen(back, bag, MC)
        assert a.final == b.final and a.confidence == b.confidence
        for name in a.confidences:
            for head, p in a.confidences[name].probs.items():
                np.testing.assert_array_equal(p, b.confidences[name].probs[head])


def test_uncalibrated_and_single_models(model):
    bare = hierarchy.PDLSModel(model.upstream, model.suspect_sub, model.rest_sub)
    back = model_from_bytes(model_to_bytes(bare))
    assert back.thresholds is None and back.color_stats is None
    single = model_from_bytes(model_to_bytes(model.upstream))
    assert isinstance(single, mil.BagModel)
    assert model_to_bytes(single) == model_to_bytes(model.upstream)


def test_truncated_file_rejected(model):
    data = model_to_bytes(model)
    for cut in (4, 30, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptModelError):
            model_from_bytes(data[:cut])


def test_flipped_byte_rejected(model):
    data = bytearray(model_to_bytes(model))
    for pos in (20, len(data) // 3, len(data) - 9):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        with pytest.raises(CorruptModelError, match="checksum"):
            model_from_bytes(bytes(bad))


def test_bad_magic_and_version(model):
    data = model_to_bytes(model)
    with pytest.raises(CorruptModelError, match="magic"):
        model_from_bytes(b"NOTAMODL" + data[8:])
    payload = data[:8] + struct.pack("<I", 2) + data[12:-8]
    with pytest.raises(CorruptModelError, match="version"):
        model_from_bytes(payload + hashlib.blake2b(payload, digest_size=8).digest())
    extra = data[:-8] + b"\x00"
    with pytest.raises(CorruptModelError, match="trailing"):
        model_from_bytes(extra + hashlib.blake2b(extra, digest_size=8).digest())


def test_atomic_write_leaves_no_temp_files(tmp_path, model):
    save_model(model, tmp_path / "a" / "m.pdls")
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["m.pdls"]


# ---------------------------------------------------------------------------
# datasets


def test_embedding_byte_layout():
    tiles = np.array([[1.5, -2.0], [0.25, 3.0], [0.0, 1.0]])
    data, offsets = persistence.embeddings_to_bytes([("ab", tiles)])
    expected = (b"PDLSEMB1" + struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<II", 3, 2)
                + struct.pack("<6f", *tiles.ravel()))
    assert data == expected and offsets == [12]


def test_dataset_round_trip(tmp_path, bags):
    save_dataset(bags, tmp_path / "m.csv", tmp_path / "e.bin")
    back = load_dataset(tmp_path / "m.csv", tmp_path / "e.bin")
    assert [b.specimen_id for b in back] == [b.specimen_id for b in bags]
    for a, b in zip(bags, back):
        np.testing.assert_array_equal(b.tiles, a.tiles.astype(np.float32))
        assert (a.label, a.split, a.lab_id, a.diagnosis) == (b.label, b.split, b.lab_id, b.diagnosis)


def _write(tmp_path, bags, records=None):
    persistence.atomic_write_text(tmp_path / "m.csv", persistence.csv_text(
        persistence.MANIFEST_COLUMNS,
        [(b.specimen_id, b.lab_id, b.label.value, b.diagnosis, b.split, len(b.tiles), "") for b in bags]))
    data, _ = persistence.embeddings_to_bytes(records if records is not None else [(b.specimen_id, b.tiles) for b in bags])
    (tmp_path / "e.bin").write_bytes(data)
    return tmp_path / "m.csv", tmp_path / "e.bin"


def test_missing_embedding_record(tmp_path, bags):
    m, e = _write(tmp_path, bags, [(b.specimen_id, b.tiles) for b in bags[1:]])
    with pytest.raises(InconsistentDatasetError, match=bags[0].specimen_id):
        load_dataset(m, e)


def test_orphan_embedding_record(tmp_path, bags):
    m, e = _write(tmp_path, bags[1:], [(b.specimen_id, b.tiles) for b in bags])
    with pytest.raises(InconsistentDatasetError, match=bags[0].specimen_id):
        load_dataset(m, e)


def test_dim_mismatch(tmp_path, bags):
    records = [(b.specimen_id, b.tiles) for b in bags]
    records[4] = (records[4][0], np.zeros((len(bags[4].tiles), 5)))
    m, e = _write(tmp_path, bags, records)
    with pytest.raises(InconsistentDatasetError, match=bags[4].specimen_id):
        load_dataset(m, e)
    with pytest.raises(InconsistentDatasetError):
        save_dataset([bags[0], mil.SpecimenBag("x", np.zeros((2, 3)), CLASSES[0])], tmp_path / "a", tmp_path / "b")


def test_tile_count_mismatch(tmp_path, bags):
    records = [(b.specimen_id, b.tiles) for b in bags]
    records[2] = (records[2][0], bags[2].tiles[:1])
    m, e = _write(tmp_path, bags, records)
    with pytest.raises(InconsistentDatasetError, match=bags[2].specimen_id):
        load_dataset(m, e)


def test_manifest_validation(tmp_path, bags):
    with pytest.raises(InconsistentDatasetError, match="unique"):
        save_dataset([bags[0], bags[0]], tmp_path / "a", tmp_path / "b")
    m, e = _write(tmp_path, bags)
    text = m.read_text().replace(f",{bags[0].label.value},", ",melanoma,", 1)
    m.write_text(text)
    with pytest.raises(InconsistentDatasetError, match="unknown class"):
        load_dataset(m, e)
    m.write_text("id,class\n")
    with pytest.raises(InconsistentDatasetError, match="columns"):
        load_dataset(m, e)
    with pytest.raises(InconsistentDatasetError, match="magic"):
        e.write_bytes(b"garbage!")
        persistence.read_embeddings(e)


# ---------------------------------------------------------------------------
# CSV reports


def test_csv_floats_round_trip(tmp_path):
    vals = [0.1, 1 / 3, 2.5e-17, 123456.789]
    persistence.write_csv(tmp_path / "r.csv", ["x", "flag"], [(v, v > 1) for v in vals], comments=["S=1000"])
    text = (tmp_path / "r.csv").read_text()
    assert text.startswith("# S=1000\nx,flag\n")
    rows = persistence.read_csv(tmp_path / "r.csv")
    assert [float(r["x"]) for r in rows] == vals and [r["flag"] for r in rows] == ["0", "0", "0", "1"]


def test_timestamp_is_optional():
    plain = persistence.csv_text(["a"], [[1]])
    stamped = persistence.csv_text(["a"], [[1]], timestamp=True)
    assert stamped.startswith("# generated ") and stamped.split("\n", 1)[1] == plain


def test_prediction_table_replays_routing(model, bags):
    preds = [hierarchy.infer_specimen(model, b, MC) for b in bags[:6]]
    header, rows = persistence.prediction_table(preds)
    for p, row in zip(preds, rows):
        rec = dict(zip(header, row))
        up = (rec["upstream/suspect_vs_rest/mel_suspect"], rec["upstream/suspect_vs_rest/rest"])
        assert hierarchy.route(up) == p.branch == rec["branch"]
        assert rec["final_label"] == p.final.name and rec["confidence"] == p.confidence
