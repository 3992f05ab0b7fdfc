"""Dataset ingestion and checkpoint persistence.

MNIST is read from the raw big-endian IDX files (magics 2051/2049),
scaled to [0, 1] and standardized with scalar mean/std computed on the
train split. Checkpoints store a JSON manifest plus little-endian
float32 payloads with per-tensor CRCs; training runs in float64, so a
save/load round trip is lossy only through the documented f64->f32 cast.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, ParseError
from .layers import BasisConfig, KanMlp, build_kan_mlp
from .quantizers import QuantizerState, parse_bit_config
from .tensor import Rng, Tensor

DATA_ENV_VAR = "QUANTKAN_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass
class Dataset:
    images: np.ndarray  # [n, features], standardized float64
    labels: np.ndarray  # [n] int64
    split: str
    normalization: tuple[float, float]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def num_features(self) -> int:
        return self.images.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split,
                       self.normalization)


def _read_exact(f, count: int, path: str, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(count)
    if len(buf) != count:
        raise ParseError(
            f"{path}: truncated {what} at byte offset {offset} "
            f"(wanted {count} bytes, got {len(buf)})")
    return buf


def load_mnist_idx(image_path: str, label_path: str,
                   normalization: tuple[float, float] | None = None,
                   split: str = "train") -> Dataset:
    """Parse one split from raw IDX files.

    When ``normalization`` is None the scalar mean/std are computed from
    this file (train split); pass the train statistics for the test split.
    """
    with open(image_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">iiii", _read_exact(f, 16, image_path, "image header"))
        if magic != IMAGE_MAGIC:
            raise ParseError(
                f"{image_path}: bad image magic {magic} at byte offset 0 "
                f"(expected {IMAGE_MAGIC})")
        payload = _read_exact(f, count * rows * cols, image_path, "pixel data")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)

    with open(label_path, "rb") as f:
        magic, label_count = struct.unpack(
            ">ii", _read_exact(f, 8, label_path, "label header"))
        if magic != LABEL_MAGIC:
            raise ParseError(
                f"{label_path}: bad label magic {magic} at byte offset 0 "
                f"(expected {LABEL_MAGIC})")
        labels = np.frombuffer(
            _read_exact(f, label_count, label_path, "label data"),
            dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise ParseError(
            f"image/label count mismatch: {count} images vs {label_count} labels")

    scaled = images.astype(np.float64) / 255.0
    if normalization is None:
        normalization = (float(scaled.mean()), float(max(scaled.std(), 1e-12)))
    mean, std = normalization
    return Dataset((scaled - mean) / std, labels, split, normalization)


def load_mnist(root: str | None = None) -> tuple[Dataset, Dataset]:
    """Both splits from ``root`` (or $QUANTKAN_DATA); train stats re-applied
    to the test split."""
    root = root or os.environ.get(DATA_ENV_VAR)
    if not root:
        raise ConfigError(
            f"MNIST directory not given; set {DATA_ENV_VAR} or pass a path")
    paths = {split: tuple(os.path.join(root, name) for name in names)
             for split, names in MNIST_FILES.items()}
    for split, (img, lab) in paths.items():
        for p in (img, lab):
            if not os.path.exists(p):
                raise ConfigError(f"missing MNIST file: {p}")
    train = load_mnist_idx(*paths["train"], split="train")
    test = load_mnist_idx(*paths["test"], normalization=train.normalization,
                          split="test")
    return train, test


TWO_GAUSSIANS = "two_gaussians"
RINGS_XOR = "rings_xor"


def make_synthetic(kind: str, n: int, rng: Rng,
                   normalization: tuple[float, float] | None = None,
                   split: str = "train") -> Dataset:
    """Deterministic labeled point clouds for fast tests and smoke runs."""
    if n < 2:
        raise ConfigError("synthetic datasets need n >= 2")
    half = n // 2
    if kind == TWO_GAUSSIANS:
        # class means 6 sigma apart along the diagonal of a 4-d cube
        mu = 1.5 * np.ones(4)
        x0 = rng.normal((half, 4)) - mu
        x1 = rng.normal((n - half, 4)) + mu
        features = np.concatenate([x0, x1])
        labels = np.concatenate([np.zeros(half, dtype=np.int64),
                                 np.ones(n - half, dtype=np.int64)])
    elif kind == RINGS_XOR:
        # checkerboard over (ring band, 45-degree sector): the class
        # marginals coincide along every direction, so no half-plane cut
        # beats chance by more than sampling noise
        theta = rng.uniform((n,), 0, 2 * np.pi)
        r = np.sqrt(rng.uniform((n,), 0.4 ** 2, 1.4 ** 2))
        sector = np.floor(theta / (np.pi / 4)).astype(np.int64)
        band = (r > 0.9).astype(np.int64)
        features = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        labels = (sector + band) % 2
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    order = rng.permutation(n)
    features, labels = features[order], labels[order]
    if normalization is None:
        normalization = (float(features.mean()), float(features.std()))
    mean, std = normalization
    return Dataset((features - mean) / std, labels, split, normalization)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"QKANCKPT"
CKPT_VERSION = (1, 0)


def _model_manifest(model) -> dict:
    basis = model.basis
    manifest = {
        "format_version": list(CKPT_VERSION),
        "widths": model.widths,
        "basis": {
            "kind": basis.kind,
            "grid_size": basis.grid_size,
            "spline_order": basis.spline_order,
            "domain": list(basis.domain),
            "degree": basis.degree,
        },
        "base_activation": model.layers[0].base_activation
        if isinstance(model, KanMlp)
        else model.layers[0].inner.base_activation,
    }
    return manifest


def _quant_state_manifest(state: QuantizerState) -> dict:
    return {
        "method": state.method,
        "bits": state.bits,
        "signed": state.signed,
        "granularity": state.granularity,
        "gamma": state.gamma,
        "initialized": state.initialized,
    }


def _named_tensors(model) -> list[tuple[str, Tensor]]:
    from .qat import QuantKanMlp  # local import to avoid a cycle

    named: list[tuple[str, Tensor]] = []
    if isinstance(model, QuantKanMlp):
        for i, layer in enumerate(model.layers):
            named.append((f"layer{i}.W_b", layer.inner.W_b))
            named.append((f"layer{i}.W_s", layer.inner.W_s))
            for sname, state in zip(("base_weight_q", "spline_weight_q",
                                     "activation_q"), layer.spec.states()):
                for pname in ("s", "z", "alpha", "c", "d"):
                    t = getattr(state, pname)
                    if t is not None:
                        named.append((f"layer{i}.{sname}.{pname}", t))
            for fname in ("base_feature_scale", "spline_feature_scale"):
                scale = getattr(layer, fname)
                if scale is not None:
                    named.append((f"layer{i}.{fname}", Tensor(scale)))
    else:
        for i, layer in enumerate(model.layers):
            named.append((f"layer{i}.W_b", layer.W_b))
            named.append((f"layer{i}.W_s", layer.W_s))
    return named


def save_checkpoint(model, path: str, extras: dict | None = None):
    """Write manifest + float32 payload; bit-exact to reload (post-cast)."""
    from .qat import QuantKanMlp

    manifest = _model_manifest(model)
    if extras:
        manifest["extras"] = extras
    if isinstance(model, QuantKanMlp):
        spec = model.layers[0].spec
        manifest["quant"] = {
            "method": spec.method,
            "bits": spec.bits.token(),
            "states": [
                {name: _quant_state_manifest(state)
                 for name, state in zip(("base_weight_q", "spline_weight_q",
                                         "activation_q"), layer.spec.states())}
                for layer in model.layers
            ],
        }
    payload = bytearray()
    tensors = []
    for name, tensor in _named_tensors(model):
        raw = tensor.data.astype("<f4").tobytes()
        tensors.append({
            "name": name,
            "shape": list(tensor.data.shape),
            "offset": len(payload),
            "crc32": zlib.crc32(raw),
        })
        payload.extend(raw)
    manifest["tensors"] = tensors
    header = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def _read_manifest(path: str) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (header_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(header_len).decode())
        payload = f.read()
    major = manifest.get("format_version", [0])[0]
    if major != CKPT_VERSION[0]:
        raise CheckpointError(
            f"{path}: unsupported checkpoint major version {major} "
            f"(this build reads {CKPT_VERSION[0]})")
    return manifest, payload


def _extract(manifest: dict, payload: bytes, name: str) -> np.ndarray:
    for entry in manifest["tensors"]:
        if entry["name"] == name:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            raw = payload[start:start + 4 * count]
            if len(raw) != 4 * count:
                raise CheckpointError(f"payload truncated for tensor {name}")
            if zlib.crc32(raw) != entry["crc32"]:
                raise CheckpointError(f"checksum mismatch for tensor {name}")
            return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    raise CheckpointError(f"missing tensor {name} in checkpoint")


def load_checkpoint(path: str):
    """Rebuild the stored model (plain or quantizer-wrapped)."""
    from .qat import QuantKanMlp, make_branch_spec, QuantKanLayer

    manifest, payload = _read_manifest(path)
    b = manifest["basis"]
    basis = BasisConfig(kind=b["kind"], grid_size=b["grid_size"],
                        spline_order=b["spline_order"],
                        domain=tuple(b["domain"]), degree=b["degree"])
    model = build_kan_mlp(manifest["widths"], basis, Rng(0),
                          base_activation=manifest["base_activation"])
    for i, layer in enumerate(model.layers):
        layer.W_b.data[:] = _extract(manifest, payload, f"layer{i}.W_b")
        layer.W_s.data[:] = _extract(manifest, payload, f"layer{i}.W_s")
    if "quant" not in manifest:
        return model

    quant = manifest["quant"]
    bits = parse_bit_config(quant["bits"])
    qlayers = []
    for i, layer in enumerate(model.layers):
        spec = make_branch_spec(quant["method"], bits)
        qlayer = QuantKanLayer(layer, spec)
        for sname, state in zip(("base_weight_q", "spline_weight_q",
                                 "activation_q"), spec.states()):
            meta = quant["states"][i][sname]
            state.gamma = meta["gamma"]
            state.initialized = meta["initialized"]
            for pname in ("s", "z", "alpha", "c", "d"):
                full = f"layer{i}.{sname}.{pname}"
                if any(t["name"] == full for t in manifest["tensors"]):
                    setattr(state, pname,
                            Tensor(_extract(manifest, payload, full),
                                   requires_grad=True))
                else:
                    setattr(state, pname, None)
        for fname in ("base_feature_scale", "spline_feature_scale"):
            full = f"layer{i}.{fname}"
            if any(t["name"] == full for t in manifest["tensors"]):
                setattr(qlayer, fname, _extract(manifest, payload, full))
        qlayers.append(qlayer)
    return QuantKanMlp(qlayers)


def cast_to_storage_precision(model):
    """Round-trip reference: pass weights and quantizer params through f32."""
    for _, tensor in _named_tensors(model):
        tensor.data[...] = tensor.data.astype("<f4").astype(np.float64)
    return model
