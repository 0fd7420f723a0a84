"""Dataset ingestion and persistence: IDX files, synthetic blobs, feature CSVs, model bundles."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import detectors as det
from .bnn import Network, build_network
from .features import FeatureTable

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
BUNDLE_FORMAT = "mcspread-bundle"
BUNDLE_VERSION = "1.0"


class IDXError(ValueError):
    pass


class BundleError(ValueError):
    pass


class UnsupportedVersionError(BundleError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


# -- IDX ---------------------------------------------------------------------

def _read_idx(path, expected_magic: int, kind: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXError(f"{path}: truncated {kind} file ({len(raw)} bytes, no magic number)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXError(f"{path}: bad magic 0x{magic:08x} for {kind} file (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError(f"{path}: truncated {kind} header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IDXError(f"{path}: truncated or oversized {kind} payload: dims {dims} need {count} bytes, "
                       f"found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    """``(n, rows, cols)`` pixels scaled to [0, 1]."""
    return _read_idx(path, IDX_IMAGES_MAGIC, "image") / 255.0


def load_idx(images_path, labels_path, name: str = "") -> Dataset:
    images = load_idx_images(images_path)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "label")
    if len(images) != len(labels):
        raise IDXError(f"image count {len(images)} in {images_path} != label count {len(labels)} in {labels_path}")
    return Dataset(images, labels.astype(np.int64), name or Path(images_path).name)


def write_idx(images_path, labels_path, images, labels=None) -> None:
    """Write uint8 images (and optionally labels) in the MNIST layout."""
    img = np.asarray(images)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *img.shape) + img.tobytes())
    if labels is not None:
        lab = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(lab)) + lab.tobytes())


# -- synthetic ---------------------------------------------------------------

def synth_ood_pair(seed: int = 0, n: int = 500, d: int = 2, separation: float = 8.0) -> tuple[Dataset, Dataset]:
    """Two labelled unit-variance Gaussian blobs, and an unlabelled OOD pool.

    The OOD pool mixes a blob displaced ``separation`` standard deviations
    from the in-distribution mean with a Student-t (df=2) component.
    """
    if n < 2 or d < 2:
        raise ValueError("synth_ood_pair needs n >= 2 and d >= 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centers = np.zeros((2, d))
    centers[0, 0], centers[1, 0] = -3.0, 3.0
    indist = centers[labels] + rng.standard_normal((n, d))
    shift = np.zeros(d)
    shift[1] = separation
    n_heavy = n // 4
    ood = np.vstack([shift + rng.standard_normal((n - n_heavy, d)),
                     shift + rng.standard_t(2.0, size=(n_heavy, d))])
    ood = ood[rng.permutation(n)]
    return Dataset(indist, labels, "synthetic-indist"), Dataset(ood, np.full(n, -1), "synthetic-ood")


# -- feature CSV -------------------------------------------------------------

def write_features(path, table: FeatureTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(table.columns) + (["label"] if table.labels is not None else []))
        for i, row in enumerate(table.values):
            cells = [repr(float(v)) for v in row]
            if table.labels is not None:
                cells.append(str(int(table.labels[i])))
            w.writerow(cells)


def read_features(path) -> FeatureTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        has_label = bool(header) and header[-1] == "label"
        columns = header[:-1] if has_label else header
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[: len(columns)]])
                if has_label:
                    labels.append(int(row[-1]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
    return FeatureTable(columns, values, np.array(labels, dtype=np.int64) if has_label else None)


# -- bundles -----------------------------------------------------------------

def _arr(a) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape), "dtype": str(a.dtype), "data": a.ravel().tolist()}


def _unarr(d) -> np.ndarray:
    return np.asarray(d["data"], dtype=d["dtype"]).reshape(d["shape"])


def network_to_dict(net: Network) -> dict:
    return {
        "arch": net.arch,
        "input_shape": list(net.input_shape),
        "drop_prob": net.drop_prob,
        "spectral_norm": net.spectral_norm,
        "init_seed": net.init_seed,
        "params": [
            {"weight": _arr(layer.weight), "bias": _arr(layer.bias), "u": None if layer.u is None else _arr(layer.u)}
            for layer in net.layers if layer.has_params
        ],
    }


def network_from_dict(d: dict) -> Network:
    net = build_network(d["arch"], d["input_shape"], d["drop_prob"], d["spectral_norm"], d["init_seed"])
    params = d["params"]
    if len(params) != len(net.weight_layers):
        raise BundleError(f"bundle has {len(params)} parameter sets for {len(net.weight_layers)} weight layers")
    for i, p in zip(net.weight_layers, params):
        layer = net.layers[i]
        w, b = _unarr(p["weight"]), _unarr(p["bias"])
        if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
            raise BundleError(f"layer {i}: stored shapes {w.shape}/{b.shape} do not match architecture "
                              f"{layer.weight.shape}/{layer.bias.shape}")
        layer.weight, layer.bias = w, b
        layer.u = None if p["u"] is None else _unarr(p["u"])
    return net


def _tree_to_dict(t: det.Tree) -> dict:
    return {k: _arr(getattr(t, k)) for k in ("feature", "threshold", "left", "right", "value", "n_samples", "impurity")}


def _tree_from_dict(d: dict) -> det.Tree:
    return det.Tree(**{k: _unarr(v) for k, v in d.items()})


def detector_to_dict(model) -> dict:
    if isinstance(model, det.MinMaxScaler):
        return {"kind": "minmax", "min": _arr(model.min_), "max": _arr(model.max_)}
    if isinstance(model, det.LogisticModel):
        return {"kind": "logistic", "weights": _arr(model.weights), "bias": model.bias, "lam": model.lam}
    if isinstance(model, det.Forest):
        return {"kind": "forest", "n_features": model.n_features, "max_features": model.max_features,
                "seed": model.seed, "trees": [_tree_to_dict(t) for t in model.trees]}
    if isinstance(model, det.IsolationForestModel):
        return {"kind": "isolation_forest", "subsample_size": model.subsample_size,
                "height_limit": model.height_limit, "trees": [_tree_to_dict(t) for t in model.trees]}
    raise TypeError(f"cannot serialize detector of type {type(model).__name__}")


def detector_from_dict(d: dict):
    kind = d["kind"]
    if kind == "minmax":
        return det.MinMaxScaler(_unarr(d["min"]), _unarr(d["max"]))
    if kind == "logistic":
        return det.LogisticModel(_unarr(d["weights"]), d["bias"], d["lam"])
    if kind == "forest":
        return det.Forest([_tree_from_dict(t) for t in d["trees"]], d["n_features"], d["max_features"], d["seed"])
    if kind == "isolation_forest":
        return det.IsolationForestModel([_tree_from_dict(t) for t in d["trees"]], d["subsample_size"], d["height_limit"])
    raise BundleError(f"unknown detector kind {kind!r}")


def save_bundle(path, network: Network, detectors: dict | None = None, configs: dict | None = None) -> None:
    doc = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "network": network_to_dict(network),
        "detectors": {k: detector_to_dict(v) for k, v in (detectors or {}).items()},
        "configs": configs or {},
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True))
    tmp.replace(path)


def load_bundle(path) -> tuple[Network, dict, dict]:
    """Returns ``(network, detectors, configs)``; raises BundleError on anything malformed."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: unreadable bundle ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"{path}: not a {BUNDLE_FORMAT} document")
    version = str(doc.get("version", ""))
    if version.split(".")[0] != BUNDLE_VERSION.split(".")[0]:
        raise UnsupportedVersionError(f"{path}: unsupported bundle version {version!r} (this build reads {BUNDLE_VERSION})")
    try:
        network = network_from_dict(doc["network"])
        detectors = {k: detector_from_dict(v) for k, v in doc.get("detectors", {}).items()}
    except BundleError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"{path}: corrupted bundle ({type(exc).__name__}: {exc})") from None
    return network, detectors, doc.get("configs", {})
