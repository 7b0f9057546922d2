"""Datasets, model files, certificate records and metrics."""
from __future__ import annotations

import base64
import csv
import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor
from .netgraph import (Add, BatchNormFixed, Conv2d, HardTanh, LayerSpec, Linear, NetworkGraph, ReLU)

FORMAT_VERSION = 1
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(ValueError):
    pass


# datasets -------------------------------------------------------------------------------


@dataclass
class DatasetHandle:
    X: np.ndarray                    # (n, *feature_shape), float64
    y: np.ndarray                    # (n,), int
    source: str = "memory"
    n_classes: int | None = None
    scale: float = 1.0
    shift: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=int)
        if len(self.X) != len(self.y):
            raise FormatError(f"{len(self.X)} examples but {len(self.y)} labels")
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1 if len(self.y) else 0
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise FormatError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.X.shape[1:])

    def subset(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.X[idx], self.y[idx], self.source, self.n_classes,
                             self.scale, self.shift, dict(self.meta))

    def reshape(self, shape) -> "DatasetHandle":
        return DatasetHandle(self.X.reshape((len(self.X),) + tuple(shape)), self.y, self.source,
                             self.n_classes, self.scale, self.shift, dict(self.meta))


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: magic number 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < count:
        raise FormatError(f"{path}: truncated file, {len(body)} of {count} data bytes present")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, flatten: bool = False) -> DatasetHandle:
    """IDX image/label pair (optionally gzipped) with pixels scaled to [0, 1]."""
    imgs = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if len(imgs) != len(labels):
        raise FormatError(f"count mismatch: {len(imgs)} images vs {len(labels)} labels")
    X = imgs.astype(np.float64) / 255.0
    X = X.reshape(len(X), -1) if flatten else X.reshape((len(X), 1) + imgs.shape[1:])
    return DatasetHandle(X, labels.astype(int), f"idx:{images_path}", n_classes=10, scale=1 / 255.0,
                         meta={"dims": tuple(int(d) for d in imgs.shape[1:])})


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES))
        fh.write(struct.pack(">" + "I" * images.ndim, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS))
        fh.write(struct.pack(">I", len(labels)))
        fh.write(labels.tobytes())


def load_csv(path, header: bool = False, n_classes: int | None = None) -> DatasetHandle:
    """Rows ``label, feature, ...``; ragged rows and parse failures name their line."""
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not rec or all(not f.strip() for f in rec):
                continue
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise FormatError(f"{path}:{lineno}: ragged row with {len(rec)} fields, expected {width}")
            try:
                label = int(rec[0])
                feats = [float(f) for f in rec[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: cannot parse row ({exc})") from None
            labels.append(label)
            rows.append(feats)
    d = 0 if width is None else width - 1
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    return DatasetHandle(X, np.asarray(labels, dtype=int), f"csv:{path}", n_classes)


def synthetic_blobs(n: int, eps: float, seed: int = 0, dim: int = 2, margin: float = 4.0) -> DatasetHandle:
    """Two Gaussian blobs whose first coordinates are kept at least ``margin*eps``
    apart, so a linear separator robust at radius ``eps`` exists."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = 0.5 * rng.standard_normal((n, dim))
    gap = margin * eps / 2
    side = np.where(y == 1, 1.0, -1.0)
    X[:, 0] = side * (gap + np.abs(0.5 + 0.5 * rng.standard_normal(n)))
    return DatasetHandle(X, y, f"synthetic:blobs:{n}:{seed}", n_classes=2)


def synthetic_two_cluster(n: int, eps: float, seed: int = 0) -> DatasetHandle:
    """Two classes, each a pair of clusters; one pair sits close to the other class
    so a single smooth boundary cannot certify it at radius eps."""
    rng = np.random.default_rng(seed)
    centers = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.2], [0.0, -1.2]])
    cls = np.array([0, 1, 0, 1])
    comp = rng.choice(4, size=n, p=[0.35, 0.35, 0.15, 0.15])
    spread = np.where(comp < 2, 0.35, 0.12)[:, None]
    X = centers[comp] + spread * rng.standard_normal((n, 2))
    return DatasetHandle(X, cls[comp], f"synthetic:two-cluster:{n}:{seed}", n_classes=2)


def load_dataset(spec: str, seed: int = 0, eps: float = 0.1) -> DatasetHandle:
    """``idx:IMAGES,LABELS``, ``csv:PATH``, ``blobs:N``, ``two-cluster:N`` or a
    directory holding ``{train,test}-images-idx3-ubyte`` style files, optionally
    suffixed ``@train`` / ``@test`` (default train). Synthetic specs accept the
    same suffix; the test split uses a different seed."""
    split = "train"
    if "@" in spec:
        spec, split = spec.rsplit("@", 1)
        if split not in ("train", "test"):
            raise FormatError(f"unknown split {split!r} in dataset spec")
    if split == "test":
        seed = seed + 7919
    kind, _, rest = spec.partition(":")
    if kind == "idx":
        img, lab = rest.split(",")
        return load_idx(img, lab)
    if kind == "csv":
        return load_csv(rest)
    if kind == "blobs":
        return synthetic_blobs(int(rest or 200), eps, seed)
    if kind == "two-cluster":
        return synthetic_two_cluster(int(rest or 400), eps, seed)
    if os.path.isdir(spec):
        return load_idx_dir(spec, split)
    if os.path.isfile(spec):
        return load_csv(spec)
    raise FormatError(f"unrecognized dataset spec {spec!r}")


def load_idx_dir(path, split: str = "train") -> DatasetHandle:
    prefix = "train" if split == "train" else "t10k"
    for img, lab in ((f"{split}-images-idx3-ubyte", f"{split}-labels-idx1-ubyte"),
                     (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte")):
        for ext in ("", ".gz"):
            ip, lp = os.path.join(path, img + ext), os.path.join(path, lab + ext)
            if os.path.exists(ip) and os.path.exists(lp):
                return load_idx(ip, lp)
    raise FormatError(f"no {split} IDX files in {path}")


# model files --------------------------------------------------------------------------


_KINDS = {"Linear": Linear, "Conv2d": Conv2d, "ReLU": ReLU, "HardTanh": HardTanh,
          "BatchNormFixed": BatchNormFixed, "Add": Add}


def _encode(arr: np.ndarray, encoding: str) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    if encoding == "decimal":
        return {"shape": list(arr.shape), "decimal": [float(v) for v in arr.reshape(-1)]}
    blob = base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii")
    return {"shape": list(arr.shape), "base64": blob}


def _decode(obj: dict) -> np.ndarray:
    shape = tuple(obj["shape"])
    if "decimal" in obj:
        return np.asarray(obj["decimal"], dtype=np.float64).reshape(shape)
    return np.frombuffer(base64.b64decode(obj["base64"]), dtype="<f8").astype(np.float64).reshape(shape)


def _payload(net: NetworkGraph, meta: dict, encoding: str) -> dict:
    layers = []
    for l in net.layers:
        kind = l.kind
        rec = {"id": l.id, "kind": type(kind).__name__, "inputs": list(l.inputs)}
        if isinstance(kind, Conv2d):
            rec["stride"], rec["padding"] = kind.stride, kind.padding
        if isinstance(kind, BatchNormFixed):
            rec["eps_bn"] = kind.eps_bn
        rec["params"] = {p: _encode(getattr(kind, p).data, encoding) for p in kind.params}
        layers.append(rec)
    return {"input_shape": list(net.input_shape), "layers": layers, "metadata": meta}


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_model(net: NetworkGraph, path, metadata: dict | None = None, encoding: str = "decimal") -> None:
    """Versioned JSON model file with a sha256 checksum of the payload.

    Decimal floats are written with ``repr`` precision so they round-trip
    exactly; ``encoding="base64"`` stores little-endian f64 blobs instead.
    """
    if encoding not in ("decimal", "base64"):
        raise ValueError(f"unknown encoding {encoding!r}")
    payload = _payload(net, dict(metadata or {}), encoding)
    doc = {"format": "robustdual-model", "version": FORMAT_VERSION,
           "checksum": hashlib.sha256(_canonical(payload)).hexdigest(), **payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path, return_metadata: bool = False):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a model file ({exc})") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise FormatError(f"{path}: unversioned file")
    if doc["version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: version mismatch, file has {doc['version']}, reader supports {FORMAT_VERSION}")
    payload = {k: doc[k] for k in ("input_shape", "layers", "metadata")}
    if hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("checksum"):
        raise FormatError(f"{path}: checksum failure")
    layers = []
    for rec in doc["layers"]:
        cls = _KINDS.get(rec["kind"])
        if cls is None:
            raise FormatError(f"{path}: unknown layer kind {rec['kind']!r}")
        params = {p: Tensor(_decode(v)) for p, v in rec.get("params", {}).items()}
        extra = {}
        if cls is Conv2d:
            extra = {"stride": rec.get("stride", 1), "padding": rec.get("padding", 0)}
        if cls is BatchNormFixed:
            extra = {"eps_bn": rec.get("eps_bn", 1e-5)}
        layers.append(LayerSpec(rec["id"], cls(**params, **extra), tuple(rec["inputs"])))
    net = NetworkGraph(layers, tuple(doc["input_shape"]))
    return (net, doc["metadata"]) if return_metadata else net


# certificates and metrics ------------------------------------------------------------------


CERT_HEADER = "id,predicted,certified,min_j,mode"


def write_certificates(records, path) -> None:
    """One line per certificate after a header; min-J with 9 significant digits."""
    lines = [CERT_HEADER]
    for c in records:
        mode = c.mode.replace(",", ";")
        lines.append(f"{c.id},{c.predicted},{int(bool(c.certified))},{c.min_j:.9g},{mode}")
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write certificates to {path}: {exc}") from exc


def read_certificates(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics(rows, path, fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
