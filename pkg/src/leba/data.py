"""IDX file ingestion and the desk digit dataset."""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from leba.nets import LabeledDataset, Model, log_probs

logger = logging.getLogger(__name__)

# IDX type codes -> numpy big-endian dtypes
IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed or holds invalid labels."""


def read_idx(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise DatasetFormatError(f"{path}: truncated header at offset {len(buf)}")
    if buf[0] != 0 or buf[1] != 0:
        raise DatasetFormatError(f"{path}: bad magic at offset 0")
    code, ndim = buf[2], buf[3]
    if code not in IDX_TYPES:
        raise DatasetFormatError(f"{path}: unknown type code 0x{code:02x} at offset 2")
    if len(buf) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated dimensions at offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])
    dtype = np.dtype(IDX_TYPES[code])
    start = 4 + 4 * ndim
    need = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - start != need:
        raise DatasetFormatError(
            f"{path}: payload is {len(buf) - start} bytes at offset {start}, expected {need}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=start).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {np.dtype("u1"): 0x08, np.dtype("float64"): 0x0E}.get(array.dtype)
    if code is None:
        raise DatasetFormatError(f"unsupported dtype {array.dtype} for IDX")
    header = struct.pack(">BBBB", 0, 0, code, array.ndim) + struct.pack(
        f">{array.ndim}I", *array.shape
    )
    Path(path).write_bytes(header + array.astype(np.dtype(IDX_TYPES[code])).tobytes())


def split_paths(root, split: str) -> tuple[Path, Path]:
    root = Path(root)
    return root / f"{split}-images-idx3-ubyte", root / f"{split}-labels-idx1-ubyte"


def read_split(root, split: str, classes: int = 10) -> LabeledDataset:
    img_path, lab_path = split_paths(root, split)
    images = read_idx(img_path)
    labels = read_idx(lab_path).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        raise DatasetFormatError(f"label {labels[bad[0]]} out of range at index {bad[0]}")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    return LabeledDataset(np.clip(images.astype(np.float64) / scale, 0.0, 1.0), labels)


def write_split(root, split: str, data: LabeledDataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    img_path, lab_path = split_paths(root, split)
    pixels = np.round(data.images[:, 0] * 255.0).astype(np.uint8)
    write_idx(img_path, pixels)
    write_idx(lab_path, data.labels.astype(np.uint8))


def correctly_classified(
    victim: Model, data: LabeledDataset, limit: Optional[int] = None
) -> LabeledDataset:
    """Keep only images the victim labels correctly, in order, up to ``limit``."""
    keep = []
    for s in range(0, len(data), 256):
        pred = log_probs(victim, data.images[s : s + 256]).argmax(axis=1)
        keep.extend(np.flatnonzero(pred == data.labels[s : s + 256]) + s)
        if limit is not None and len(keep) >= limit:
            break
    keep = np.asarray(keep[:limit] if limit is not None else keep, dtype=np.int64)
    if keep.size == 0:
        logger.warning("no correctly classified images; attack set is empty")
    return data.subset(keep)


def load_dataset(
    path, split: str = "test", limit: Optional[int] = None, victim: Optional[Model] = None
) -> LabeledDataset:
    """Read an IDX split; with a victim, keep only its correctly classified images."""
    data = read_split(path, split)
    if victim is not None:
        return correctly_classified(victim, data, limit)
    return data if limit is None else data.subset(np.arange(min(limit, len(data))))


# ---------------------------------------------------------------- desk digits


def desk_digits(
    size: int = 28, seed: int = 0, copies: int = 2, sources: Optional[np.ndarray] = None
) -> LabeledDataset:
    """Handwritten 8x8 digits (scikit-learn's bundled set) upsampled to size x size.

    Each source digit yields ``copies`` images with a random sub-pixel shift
    and small scale jitter, giving a few thousand 28x28 grayscale samples.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    src = load_digits()
    rng = np.random.default_rng(seed)
    sources = np.arange(len(src.images)) if sources is None else np.asarray(sources)
    base = src.images[sources] / 16.0
    out = np.empty((len(base) * copies, 1, size, size))
    labels = np.repeat(src.target[sources], copies)
    inner = size - 8  # digit occupies the centre, as in the classic 28x28 layout
    for i, img in enumerate(base):
        for c in range(copies):
            scale = inner / 8.0 * rng.uniform(0.9, 1.1)
            big = ndimage.zoom(img, scale, order=1)
            canvas = np.zeros((size, size))
            oy = (size - big.shape[0]) // 2 + int(rng.integers(-2, 3))
            ox = (size - big.shape[1]) // 2 + int(rng.integers(-2, 3))
            ys, xs = max(oy, 0), max(ox, 0)
            ye, xe = min(oy + big.shape[0], size), min(ox + big.shape[1], size)
            canvas[ys:ye, xs:xe] = big[ys - oy : ye - oy, xs - ox : xe - ox]
            out[i * copies + c, 0] = np.clip(canvas, 0.0, 1.0)
    order = rng.permutation(len(out))
    return LabeledDataset(out[order], labels[order])


def build_desk_dataset(root, seed: int = 0, test_fraction: float = 0.35) -> tuple[int, int]:
    """Write train/test IDX splits of the desk digits under ``root``."""
    from sklearn.datasets import load_digits

    n_src = len(load_digits().target)
    order = np.random.default_rng(seed).permutation(n_src)
    n_test = int(round(n_src * test_fraction))
    test = desk_digits(seed=seed + 1, sources=order[:n_test])
    train = desk_digits(seed=seed + 2, sources=order[n_test:])
    write_split(root, "test", test)
    write_split(root, "train", train)
    return len(train), len(test)
