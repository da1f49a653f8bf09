"""Single-file storage for video splits.

Layout (``.npz``-compatible zip container):

    videos       uint8 [N, T, H, W, C], value v stored as round((v + 1) * 127.5)
    labels       int64 [N]
    ids          int64 [N]
    header       0-d unicode JSON: format_version, shape, dtype, class_names,
                 spec_hash, meta
"""

from __future__ import annotations

import json
import warnings
import zipfile
from pathlib import Path

import numpy as np

from .shapes import VideoDataset, dequantize, quantize

DATASET_FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Unreadable, corrupt or inconsistent dataset file."""


class DatasetVersionError(DatasetFormatError):
    pass


class SpecHashWarning(UserWarning):
    pass


def save_dataset(ds: VideoDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = quantize(ds.videos)
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "shape": list(q.shape),
        "dtype": "uint8",
        "class_names": list(ds.class_names),
        "spec_hash": ds.spec_hash,
        "meta": ds.meta,
    }
    arrays = {
        "videos": q,
        "labels": ds.labels.astype(np.int64),
        "ids": ds.ids.astype(np.int64),
        "header": np.array(json.dumps(header, sort_keys=True)),
    }
    # fixed member timestamps keep the file byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, arr, allow_pickle=False)
    return path


def read_header(path) -> dict:
    try:
        with np.load(Path(path), allow_pickle=False) as f:
            return json.loads(str(f["header"][()]))
    except (OSError, KeyError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read dataset header from {path}: {exc}") from exc


def load_dataset(path, expected_spec_hash: str | None = None) -> VideoDataset:
    """Load a split; a spec-hash mismatch is reported as a :class:`SpecHashWarning`."""
    try:
        with np.load(Path(path), allow_pickle=False) as f:
            header = json.loads(str(f["header"][()]))
            if header.get("format_version") != DATASET_FORMAT_VERSION:
                raise DatasetVersionError(
                    f"{path}: format version {header.get('format_version')} != supported {DATASET_FORMAT_VERSION}"
                )
            q, labels, ids = f["videos"], f["labels"], f["ids"]
    except DatasetFormatError:
        raise
    except (OSError, KeyError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read dataset {path}: {exc}") from exc
    if list(q.shape) != header["shape"] or str(q.dtype) != header["dtype"] or len(labels) != q.shape[0]:
        raise DatasetFormatError(f"{path}: array contents disagree with header")
    if expected_spec_hash is not None and expected_spec_hash != header["spec_hash"]:
        warnings.warn(
            f"{path} was generated from spec {header['spec_hash']}, expected {expected_spec_hash}",
            SpecHashWarning,
            stacklevel=2,
        )
    return VideoDataset(dequantize(q), labels, ids, tuple(header["class_names"]), header["spec_hash"], header["meta"])
