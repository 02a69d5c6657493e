"""Model persistence: a small versioned binary container plus a JSON sidecar.

Layout: magic, format version, an endianness probe word, a model-kind
byte, a JSON header (hyperparameters and scalar structure), then named
little-endian arrays. Serialization is byte-deterministic for a given
model, which makes reproducibility checks a simple byte compare.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .forest import RandomForest
from .svm import KernelKind, SvmModel, _BinaryMachine
from .tree import DecisionTree

MODEL_MAGIC = b"CTGM"
MODEL_VERSION = 1
_ENDIAN_PROBE = 0x01020304

_KIND_TREE = 1
_KIND_FOREST = 2
_KIND_SVM = 3

_DTYPES = {1: "<f8", 2: "<i4", 3: "<i8"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class ModelFormatError(Exception):
    pass


def _classes_to_header(classes: np.ndarray) -> dict:
    if classes.dtype.kind in ("U", "S"):
        return {"classes": [str(c) for c in classes], "classes_kind": "str"}
    return {"classes": [int(c) for c in classes], "classes_kind": "int"}


def _classes_from_header(header: dict) -> np.ndarray:
    values = header["classes"]
    if header["classes_kind"] == "str":
        return np.array([str(v) for v in values])
    return np.array([int(v) for v in values], dtype=np.int64)


def _tree_arrays(tree: DecisionTree, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        f"{prefix}feature": tree.feature.astype("<i4"),
        f"{prefix}threshold": tree.threshold.astype("<f8"),
        f"{prefix}left": tree.left.astype("<i4"),
        f"{prefix}right": tree.right.astype("<i4"),
        f"{prefix}prediction": tree.prediction.astype("<i4"),
        f"{prefix}distribution": tree.distribution.astype("<f8"),
    }


def _tree_from_arrays(arrays: dict, header: dict, classes: np.ndarray, prefix: str = "") -> DecisionTree:
    return DecisionTree(
        classes=classes,
        feature=arrays[f"{prefix}feature"].astype(np.int32),
        threshold=arrays[f"{prefix}threshold"],
        left=arrays[f"{prefix}left"].astype(np.int32),
        right=arrays[f"{prefix}right"].astype(np.int32),
        prediction=arrays[f"{prefix}prediction"].astype(np.int32),
        distribution=arrays[f"{prefix}distribution"],
        n_features=int(header["n_features"]),
        max_depth=header.get("max_depth"),
        min_samples_leaf=int(header.get("min_samples_leaf", 1)),
    )


def _pack(kind: int, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    blob = [MODEL_MAGIC, struct.pack("<HIB", MODEL_VERSION, _ENDIAN_PROBE, kind)]
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob.append(struct.pack("<I", len(header_bytes)))
    blob.append(header_bytes)
    blob.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _DTYPE_CODES[np.dtype(arr.dtype.str.replace(">", "<"))]
        arr = arr.astype(_DTYPES[code])
        name_b = name.encode()
        blob.append(struct.pack("<H", len(name_b)))
        blob.append(name_b)
        blob.append(struct.pack("<BB", code, arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.tobytes())
    return b"".join(blob)


def _unpack(blob: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    if blob[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad magic")
    try:
        version, probe, kind = struct.unpack_from("<HIB", blob, 4)
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model format version {version}")
        if probe != _ENDIAN_PROBE:
            raise ModelFormatError("endianness probe mismatch")
        pos = 11
        (header_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        header = json.loads(blob[pos : pos + header_len].decode())
        pos += header_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode()
            pos += name_len
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dtype = np.dtype(_DTYPES[code])
            size = int(np.prod(shape)) * dtype.itemsize
            arrays[name] = np.frombuffer(blob[pos : pos + size], dtype=dtype).reshape(shape).copy()
            pos += size
    except ModelFormatError:
        raise
    except (struct.error, KeyError, UnicodeDecodeError, ValueError, json.JSONDecodeError) as err:
        raise ModelFormatError(f"truncated or corrupt model data: {err}") from err
    return kind, header, arrays


def serialize_model(model) -> bytes:
    """Encode a tree, forest, or SVM as container bytes."""
    if isinstance(model, DecisionTree):
        header = {
            "n_features": model.n_features,
            "max_depth": model.max_depth,
            "min_samples_leaf": model.min_samples_leaf,
            **_classes_to_header(model.classes),
        }
        return _pack(_KIND_TREE, header, _tree_arrays(model))
    if isinstance(model, RandomForest):
        header = {
            "n_features": model.n_features,
            "n_trees": model.n_trees,
            "seed": model.seed,
            "bootstrap": model.bootstrap,
            "features_per_split": model.features_per_split,
            **_classes_to_header(model.classes),
        }
        arrays: dict[str, np.ndarray] = {}
        for t, tree in enumerate(model.trees):
            arrays.update(_tree_arrays(tree, prefix=f"t{t}."))
        return _pack(_KIND_FOREST, header, arrays)
    if isinstance(model, SvmModel):
        header = {
            "n_features": model.n_features,
            "C": model.C,
            "kernel": model.kernel.value,
            "gamma": model.gamma,
            "tol": model.tol,
            "biases": [m.bias for m in model.machines],
            "iterations": [m.iterations for m in model.machines],
            "violation_gaps": [m.violation_gap for m in model.machines],
            **_classes_to_header(model.classes),
        }
        arrays = {}
        for k, mach in enumerate(model.machines):
            arrays[f"m{k}.sv"] = mach.support_vectors.astype("<f8")
            arrays[f"m{k}.coef"] = mach.dual_coef.astype("<f8")
        return _pack(_KIND_SVM, header, arrays)
    raise ModelFormatError(f"cannot serialize {type(model).__name__}")


def deserialize_model(blob: bytes):
    kind, header, arrays = _unpack(blob)
    classes = _classes_from_header(header)
    if kind == _KIND_TREE:
        return _tree_from_arrays(arrays, header, classes)
    if kind == _KIND_FOREST:
        trees = [
            _tree_from_arrays(arrays, header, classes, prefix=f"t{t}.")
            for t in range(int(header["n_trees"]))
        ]
        return RandomForest(
            classes=classes,
            trees=trees,
            seed=int(header["seed"]),
            bootstrap=bool(header["bootstrap"]),
            features_per_split=int(header["features_per_split"]),
            n_features=int(header["n_features"]),
        )
    if kind == _KIND_SVM:
        machines = [
            _BinaryMachine(
                support_vectors=arrays[f"m{k}.sv"],
                dual_coef=arrays[f"m{k}.coef"],
                bias=float(header["biases"][k]),
                kernel=KernelKind(header["kernel"]),
                gamma=float(header["gamma"]),
                iterations=int(header["iterations"][k]),
                violation_gap=float(header["violation_gaps"][k]),
            )
            for k in range(len(header["biases"]))
        ]
        return SvmModel(
            classes=classes,
            machines=machines,
            C=float(header["C"]),
            kernel=KernelKind(header["kernel"]),
            gamma=float(header["gamma"]),
            tol=float(header["tol"]),
            n_features=int(header["n_features"]),
        )
    raise ModelFormatError(f"unknown model kind {kind}")


def save_model(model, path: str | Path, metadata: dict | None = None) -> None:
    """Write container bytes plus a .meta.json sidecar describing training."""
    path = Path(path)
    path.write_bytes(serialize_model(model))
    kinds = {DecisionTree: "tree", RandomForest: "forest", SvmModel: "svm"}
    sidecar = {
        "model_file": path.name,
        "model_kind": kinds[type(model)],
        "format_version": MODEL_VERSION,
        "metadata": metadata or {},
    }
    sidecar_path = path.with_name(path.name + ".meta.json")
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def load_model(path: str | Path):
    return deserialize_model(Path(path).read_bytes())


def load_sidecar(path: str | Path) -> dict:
    path = Path(path)
    sidecar_path = path.with_name(path.name + ".meta.json")
    return json.loads(sidecar_path.read_text())
