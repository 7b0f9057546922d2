import hashlib
import json
import struct

import numpy as np
import pytest

from helpers import FAMILIES, random_net
from robustdual.certifier import BallSpec, Certificate, certify_batch
from robustdual.io import (CERT_HEADER, FormatError, load_csv, load_idx, load_model, read_certificates,
                           save_model, write_certificates, write_idx)
from robustdual.netgraph import forward


def _idx_pair(tmp_path, n=5):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n, 3, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(imgs, labels, ip, lp)
    return imgs, labels, ip, lp


def test_idx_round_trip_and_big_endian_header(tmp_path):
    imgs, labels, ip, lp = _idx_pair(tmp_path)
    raw = ip.read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 5, 3, 4)
    ds = load_idx(ip, lp)
    assert ds.X.shape == (5, 1, 3, 4) and ds.X.dtype == np.float64
    np.testing.assert_array_equal(ds.y, labels)
    assert np.all((ds.X >= 0) & (ds.X <= 1))
    np.testing.assert_allclose(np.rint(ds.X[:, 0] * 255), imgs)
    assert load_idx(ip, lp, flatten=True).X.shape == (5, 12)


def test_idx_count_mismatch(tmp_path):
    imgs, labels, ip, lp = _idx_pair(tmp_path)
    write_idx(imgs, labels[:4], tmp_path / "a", lp)
    with pytest.raises(FormatError, match="count mismatch"):
        load_idx(ip, lp)


def test_idx_truncated(tmp_path):
    _, _, ip, lp = _idx_pair(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-7])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError, match="truncated header"):
        load_idx(ip, lp)


def test_idx_bad_magic(tmp_path):
    _, _, ip, lp = _idx_pair(tmp_path)
    with pytest.raises(FormatError, match="magic"):
        load_idx(lp, ip)


def test_csv_basic(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,0.5,0.5\n0,0.1,0.2\n")
    ds = load_csv(p)
    np.testing.assert_array_equal(ds.y, [1, 0])
    np.testing.assert_allclose(ds.X, [[0.5, 0.5], [0.1, 0.2]])


def test_csv_ragged_names_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,0.5,0.5\n0,0.1,0.2\n1,0.3\n")
    with pytest.raises(FormatError, match=":3:"):
        load_csv(p)


def test_csv_empty(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    ds = load_csv(p)
    assert len(ds) == 0


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("encoding", ["decimal", "base64"])
def test_model_round_trip(tmp_path, family, encoding):
    rng = np.random.default_rng(11)
    net = random_net(rng, family)
    save_model(net, tmp_path / "m.json", {"arch": family}, encoding=encoding)
    back, meta = load_model(tmp_path / "m.json", return_metadata=True)
    assert meta == {"arch": family}
    X = rng.uniform(-1, 1, (100,) + net.input_shape)
    np.testing.assert_array_equal(forward(net, X).data, forward(back, X).data)


def test_model_files_are_deterministic(tmp_path):
    net = random_net(np.random.default_rng(1), "conv")
    save_model(net, tmp_path / "a.json")
    save_model(net, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def _doc(tmp_path):
    net = random_net(np.random.default_rng(2), "mlp")
    save_model(net, tmp_path / "m.json")
    return json.loads((tmp_path / "m.json").read_text())


def test_model_checksum_failure(tmp_path):
    doc = _doc(tmp_path)
    doc["layers"][0]["params"]["weight"]["decimal"][0] += 1.0
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="checksum failure"):
        load_model(tmp_path / "m.json")


def test_model_unversioned_and_version_mismatch(tmp_path):
    doc = _doc(tmp_path)
    doc.pop("version")
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="unversioned file"):
        load_model(tmp_path / "m.json")
    doc["version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="version mismatch"):
        load_model(tmp_path / "m.json")


def test_model_unknown_kind(tmp_path):
    doc = _doc(tmp_path)
    doc["layers"][1]["kind"] = "Softplus"
    payload = {k: doc[k] for k in ("input_shape", "layers", "metadata")}
    doc["checksum"] = hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="unknown layer kind"):
        load_model(tmp_path / "m.json")


def test_model_not_json(tmp_path):
    (tmp_path / "m.json").write_text("not json")
    with pytest.raises(FormatError):
        load_model(tmp_path / "m.json")


def test_certificates_empty_is_header_only(tmp_path):
    write_certificates([], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == CERT_HEADER + "\n"


def test_certificates_order_and_precision(tmp_path):
    net = random_net(np.random.default_rng(3), "mlp")
    X = np.random.default_rng(4).uniform(0, 1, (6,) + net.input_shape)
    certs = certify_batch(net, BallSpec("linf", 0.01, X[0]), X, ids=[5, 3, 9, 0, 1, 2])
    write_certificates(certs, tmp_path / "c.csv")
    rows = read_certificates(tmp_path / "c.csv")
    assert [int(r["id"]) for r in rows] == [5, 3, 9, 0, 1, 2]
    for c, r in zip(certs, rows):
        assert r["min_j"] == f"{c.min_j:.9g}"
        assert int(r["certified"]) == int(c.certified)


def test_certificates_unwritable(tmp_path):
    c = Certificate(0, None, 0, np.array([np.inf, 1.0]), True, "exact")
    with pytest.raises(OSError, match="cannot write certificates"):
        write_certificates([c], tmp_path / "missing" / "c.csv")
