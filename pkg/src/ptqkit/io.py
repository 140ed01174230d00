"""Model persistence (JSON manifest + binary tensor blobs), IDX datasets, synthetic data."""
from __future__ import annotations

import gzip
import json
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .graph import LAYER_KINDS, ModelGraph
from .quantizers import QuantSpec
from .tensor import F32

FORMAT_NAME = "ptqkit-model"
FORMAT_VERSION = 1
BLOB_MAGIC = b"QTNS1"
DTYPE_F32 = 0
PIXEL_SCALE = "1/255"

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class MissingBlobError(FormatError):
    pass


class SizeError(ValueError):
    pass


# -- tensor blobs --------------------------------------------------------------------

def encode_blob(arr) -> bytes:
    arr = np.asarray(arr, dtype=F32, order="C")  # keeps rank-0 tensors rank 0
    head = BLOB_MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = head + arr.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_blob(buf: bytes, name="blob") -> np.ndarray:
    if len(buf) < len(BLOB_MAGIC) + 6 or buf[:5] != BLOB_MAGIC:
        raise FormatError(f"{name}: not a tensor blob (bad magic)")
    dtype, rank = struct.unpack_from("<BB", buf, 5)
    if dtype != DTYPE_F32:
        raise FormatError(f"{name}: unsupported dtype code {dtype}")
    off = 7 + 4 * rank
    if len(buf) < off + 4:
        raise FormatError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 4 * count + 4:
        raise FormatError(f"{name}: truncated or oversized payload ({len(buf)} bytes for shape {shape})")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{name}: CRC32 mismatch")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(F32).reshape(shape)


def write_blob(path, arr):
    Path(path).write_bytes(encode_blob(arr))


def read_blob(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingBlobError(f"missing tensor blob {path}")
    return decode_blob(path.read_bytes(), str(path))


# -- models --------------------------------------------------------------------------------

def _layer_to_dict(layer):
    return {"kind": type(layer).__name__, **{f.name: getattr(layer, f.name) for f in fields(layer)}}


def _layer_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise FormatError(f"unknown layer kind {kind!r}")
    cls = LAYER_KINDS[kind]
    allowed = {f.name for f in fields(cls)}
    extra = set(d) - allowed
    if extra:
        raise FormatError(f"unknown fields {sorted(extra)} in {kind} layer")
    return cls(**d)


def _spec_from_dict(d, where):
    _strict(d, {"bits", "scale", "signed", "tau"}, where)
    return QuantSpec(**d)


def _strict(d, allowed, where):
    if not isinstance(d, dict):
        raise FormatError(f"{where}: expected an object")
    extra = set(d) - set(allowed)
    if extra:
        raise FormatError(f"{where}: unknown fields {sorted(extra)}")


def _blob_name(key):
    return key.replace("/", "_") + ".qtns"


def save_model(model: ModelGraph, path):
    """Write ``path/manifest.json`` and one blob per parameter tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for key in sorted(model.params):
        blob = encode_blob(model.params[key])
        (path / _blob_name(key)).write_bytes(blob)
        tensors[key] = {"file": _blob_name(key), "crc32": f"{zlib.crc32(blob) & 0xFFFFFFFF:08x}"}
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape) if model.input_shape else None,
        "pixel_scale": PIXEL_SCALE,
        "layers": [_layer_to_dict(layer) for layer in model.layers],
        "tensors": tensors,
        "quant": {
            "weight_specs": {k: v.to_dict() for k, v in model.weight_specs.items()},
            "act_specs": {k: v.to_dict() for k, v in model.act_specs.items()},
            "bit_assignment": model.bit_assignment,
            "alpha_checksums": dict(model.alpha_checksums),
        },
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path) -> ModelGraph:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest at {mf}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{mf}: invalid JSON ({e})") from None
    _strict(manifest, {"format", "version", "input_shape", "pixel_scale", "layers", "tensors", "quant"}, "manifest")
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{mf}: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"{mf}: format version {manifest.get('version')} unsupported (expected {FORMAT_VERSION})")
    if manifest.get("pixel_scale", PIXEL_SCALE) != PIXEL_SCALE:
        raise FormatError(f"{mf}: unsupported pixel scale {manifest['pixel_scale']!r}")
    layers = [_layer_from_dict(d) for d in manifest.get("layers", [])]
    params = {}
    for key, ref in manifest.get("tensors", {}).items():
        _strict(ref, {"file", "crc32"}, f"tensor {key}")
        blob_path = path / ref["file"]
        if not blob_path.exists():
            raise MissingBlobError(f"tensor {key!r}: blob {blob_path} is missing")
        buf = blob_path.read_bytes()
        if f"{zlib.crc32(buf) & 0xFFFFFFFF:08x}" != ref["crc32"]:
            raise ChecksumError(f"tensor {key!r}: blob {blob_path} fails its manifest checksum")
        params[key] = decode_blob(buf, str(blob_path))
    quant = manifest.get("quant") or {}
    _strict(quant, {"weight_specs", "act_specs", "bit_assignment", "alpha_checksums"}, "quant")
    shape = manifest.get("input_shape")
    model = ModelGraph(layers, params, input_shape=tuple(shape) if shape else None)
    model.weight_specs = {k: _spec_from_dict(v, f"weight spec {k}") for k, v in (quant.get("weight_specs") or {}).items()}
    model.act_specs = {k: _spec_from_dict(v, f"activation spec {k}") for k, v in (quant.get("act_specs") or {}).items()}
    model.bit_assignment = quant.get("bit_assignment")
    model.alpha_checksums = dict(quant.get("alpha_checksums") or {})
    return model


# -- datasets ----------------------------------------------------------------------------

@dataclass
class DatasetHandle:
    images: np.ndarray  # N, C, H, W in [0, 1]
    labels: np.ndarray  # N, int64
    classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=F32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise SizeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.images[idx], self.labels[idx], self.classes)


def _read_bytes(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data, magic, name):
    if len(data) < 4:
        raise FormatError(f"{name}: too short for an IDX header")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise FormatError(f"{name}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{name}: truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims))
    body = data[4 + 4 * ndim:]
    if len(body) != count:
        raise FormatError(f"{name}: header promises {count} bytes, file holds {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, classes=10) -> DatasetHandle:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS, str(labels_path))
    if len(imgs) != len(labels):
        raise FormatError(f"{len(imgs)} images in {images_path} but {len(labels)} labels in {labels_path}")
    images = (imgs.astype(F32) / np.float32(255.0))[:, None, :, :]
    return DatasetHandle(images, labels.astype(np.int64), classes)


def write_idx(path, arr):
    """Write uint8 images (N, H, W) or labels (N,) as IDX; ``.gz`` paths are compressed."""
    arr = np.asarray(arr, dtype=np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}[arr.ndim]
    buf = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as f:
            f.write(buf)
    else:
        path.write_bytes(buf)


def synth_dataset(rng, n, classes, shape=(1, 8, 8), noise=0.15) -> DatasetHandle:
    """Gaussian blobs around random per-class template images, clipped to [0, 1]."""
    templates = rng.random((classes,) + tuple(shape))
    labels = rng.integers(0, classes, n) if n else np.zeros(0, dtype=np.int64)
    images = templates[labels] + noise * rng.standard_normal((n,) + tuple(shape))
    return DatasetHandle(np.clip(images, 0.0, 1.0), labels, classes)


def take_calibration(ds: DatasetHandle, k, rng) -> DatasetHandle:
    """Uniform sample of ``k`` items without replacement."""
    if k > len(ds):
        raise SizeError(f"cannot take {k} calibration samples from {len(ds)}")
    return ds.subset(rng.choice(len(ds), size=k, replace=False))
