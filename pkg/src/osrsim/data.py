"""Dataset ingestion, synthetic outlier generation, and the standardized split registry.

Images are kept as float32 arrays of shape (N, C, H, W), normalized with a
recorded per-dataset mean/std (default 0.5/0.5, i.e. pixel range [-1, 1] so
that a tanh-bounded generator matches the data range).
"""

from __future__ import annotations

import gzip
import json
import pickle
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F


class IdxFormatError(ValueError):
    """Raised when an IDX file has a bad magic number or truncated payload."""


class SplitNotFoundError(KeyError):
    """Raised when a (protocol, dataset, trial) triple is not in the registry."""


# ---------------------------------------------------------------------------
# IDX binary format (MNIST-style)
# ---------------------------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":  # gzip
            with gzip.open(f) as g:
                return g.read()
        return f.read()


def load_idx(path):
    """Load an IDX file (optionally gzip-compressed) into a numpy array.

    The format is: 2 zero bytes, a dtype code, a dimension-count byte,
    then one big-endian uint32 per dimension, then the raw payload.
    """
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    if buf[0] != 0 or buf[1] != 0:
        raise IdxFormatError(f"{path}: bad magic bytes {buf[:2]!r}")
    dtype_code, ndim = buf[2], buf[3]
    if dtype_code not in _IDX_DTYPES:
        raise IdxFormatError(f"{path}: unknown IDX dtype code 0x{dtype_code:02x}")
    header_len = 4 + 4 * ndim
    if len(buf) < header_len:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = np.frombuffer(buf, dtype=">u4", count=ndim, offset=4).astype(np.int64)
    dtype = _IDX_DTYPES[dtype_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = buf[header_len:]
    if len(payload) < expected:
        raise IdxFormatError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)))
    return arr.reshape(tuple(dims)).copy()


def write_idx(path, array):
    """Write a numpy array as an IDX file; gzip-compresses iff path ends in .gz."""
    array = np.ascontiguousarray(array)
    code = None
    for c, dt in _IDX_DTYPES.items():
        if dt == array.dtype or (array.dtype == np.uint8 and c == 0x08):
            code = c
            break
    if code is None:
        raise IdxFormatError(f"dtype {array.dtype} has no IDX code")
    header = bytes([0, 0, code, array.ndim])
    header += b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    blob = header + array.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # mtime=0 keeps the archive byte-reproducible
        with open(path, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as g:
                g.write(blob)
    else:
        path.write_bytes(blob)


# ---------------------------------------------------------------------------
# Split registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """One registry entry: which classes are known vs open for a trial."""

    protocol: str  # "auroc" or "f1"
    dataset: str
    trial: int
    known: tuple
    open: tuple

    def __post_init__(self):
        # cifar+ knowns index cifar10 while opens index cifar100, so integer
        # overlap is meaningless there; everywhere else the sets must be disjoint
        if not self.dataset.startswith("cifar+") and set(self.known) & set(self.open):
            raise ValueError("known and open class sets overlap")


_REGISTRY_CACHE = None


def _registry():
    global _REGISTRY_CACHE
    if _REGISTRY_CACHE is None:
        text = resources.files("osrsim").joinpath("splits.json").read_text()
        raw = json.loads(text)
        reg = {}
        for e in raw["entries"]:
            spec = SplitSpec(
                protocol=e["protocol"],
                dataset=e["dataset"],
                trial=e["trial"],
                known=tuple(e["known"]),
                open=tuple(e["open"]),
            )
            reg[(spec.protocol, spec.dataset, spec.trial)] = spec
        _REGISTRY_CACHE = reg
    return _REGISTRY_CACHE


def registry_lookup(protocol, dataset, trial):
    """Return the exact registry entry, or raise SplitNotFoundError."""
    key = (protocol, dataset, int(trial))
    reg = _registry()
    if key not in reg:
        raise SplitNotFoundError(
            f"no split registered for protocol={protocol!r} dataset={dataset!r} "
            f"trial={trial!r}"
        )
    return reg[key]


def registry_entries():
    """All registered splits, sorted by (protocol, dataset, trial)."""
    return sorted(_registry().values(), key=lambda s: (s.protocol, s.dataset, s.trial))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class DataPart:
    """One split role (train or test): images (N,C,H,W) float32 + labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree on sample count")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return DataPart(self.images[idx], self.labels[idx])


@dataclass
class Dataset:
    name: str
    train: DataPart
    test: DataPart
    num_classes: int
    mean: float = 0.5
    std: float = 0.5


def prepare_images(raw, channels=1, size=32, mean=0.5, std=0.5):
    """uint8 pixels (N,H,W) or (N,H,W,C) -> normalized float32 (N,channels,size,size).

    Grayscale inputs are replicated across the requested channel count; spatial
    resizing is bilinear.
    """
    if raw.ndim == 3:
        raw = raw[:, None, :, :]
    elif raw.ndim == 4:
        raw = raw.transpose(0, 3, 1, 2)
    else:
        raise ValueError(f"expected (N,H,W) or (N,H,W,C) pixels, got shape {raw.shape}")
    x = torch.from_numpy(np.ascontiguousarray(raw)).float() / 255.0
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    if x.shape[1] == 1 and channels > 1:
        x = x.repeat(1, channels, 1, 1)
    elif x.shape[1] != channels:
        raise ValueError(f"cannot map {x.shape[1]}-channel images to {channels} channels")
    x = (x - mean) / std
    return x.numpy().astype(np.float32)


def normalized_range(mean=0.5, std=0.5):
    """(lo, hi) of the pixel range after (x - mean) / std normalization."""
    return (0.0 - mean) / std, (1.0 - mean) / std


def load_mnist(root, channels=1, size=32, mean=0.5, std=0.5):
    """Load MNIST-layout IDX files (train-images-idx3-ubyte[.gz] etc.) from a directory."""
    root = Path(root)

    def part(images_name, labels_name):
        img_path = _first_existing(root, images_name)
        lab_path = _first_existing(root, labels_name)
        images = load_idx(img_path)
        labels = load_idx(lab_path).astype(np.int64)
        if images.ndim != 3:
            raise IdxFormatError(f"{img_path}: expected rank-3 image tensor")
        return DataPart(prepare_images(images, channels, size, mean, std), labels)

    return Dataset(
        name="mnist",
        train=part("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        test=part("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        num_classes=10,
        mean=mean,
        std=std,
    )


def _first_existing(root, stem):
    for candidate in (root / f"{stem}.gz", root / stem):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{root}: missing {stem}[.gz]")


def _load_cifar_pickles(files, label_key):
    images, labels = [], []
    for path in files:
        with open(path, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
        data = batch[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        images.append(data)
        labels.extend(batch[label_key])
    return np.concatenate(images), np.asarray(labels, dtype=np.int64)


def load_cifar10(root, size=32, mean=0.5, std=0.5):
    """Load the python-pickle CIFAR-10 batches from a directory."""
    root = Path(root)
    train_files = [root / f"data_batch_{i}" for i in range(1, 6)]
    imgs, labs = _load_cifar_pickles(train_files, b"labels")
    t_imgs, t_labs = _load_cifar_pickles([root / "test_batch"], b"labels")
    return Dataset(
        "cifar10",
        DataPart(prepare_images(imgs, 3, size, mean, std), labs),
        DataPart(prepare_images(t_imgs, 3, size, mean, std), t_labs),
        num_classes=10,
        mean=mean,
        std=std,
    )


def load_cifar100(root, size=32, mean=0.5, std=0.5):
    """Load the python-pickle CIFAR-100 train/test files (fine labels)."""
    root = Path(root)
    imgs, labs = _load_cifar_pickles([root / "train"], b"fine_labels")
    t_imgs, t_labs = _load_cifar_pickles([root / "test"], b"fine_labels")
    return Dataset(
        "cifar100",
        DataPart(prepare_images(imgs, 3, size, mean, std), labs),
        DataPart(prepare_images(t_imgs, 3, size, mean, std), t_labs),
        num_classes=100,
        mean=mean,
        std=std,
    )


def load_image_dir(path, channels=1, size=32, mean=0.5, std=0.5):
    """Path-based loader hook for folder datasets (e.g. Omniglot dumps).

    Expects <path>/<class_name>/*.png|jpg; labels follow the sorted class
    directory order. No downloading is attempted.
    """
    from PIL import Image

    path = Path(path)
    class_dirs = sorted(d for d in path.iterdir() if d.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"{path}: no class subdirectories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        for img_path in sorted(d.rglob("*")):
            if img_path.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}:
                continue
            img = Image.open(img_path).convert("L" if channels == 1 else "RGB")
            arr = np.asarray(img, dtype=np.uint8)
            images.append(arr)
            labels.append(label)
    raw = np.stack(images)
    return DataPart(
        prepare_images(raw, channels, size, mean, std),
        np.asarray(labels, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Synthetic outlier sets
# ---------------------------------------------------------------------------

def make_noise_dataset(n, seed, channels=1, size=32, mean=0.5, std=0.5):
    """Images whose pixels are i.i.d. standard normal, clipped to the normalized range."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = normalized_range(mean, std)
    pixels = rng.standard_normal((n, channels, size, size)).astype(np.float32)
    images = np.clip(pixels, lo, hi)
    return DataPart(images, np.zeros(n, dtype=np.int64))


def make_mnist_noise(part, seed, foreground_threshold=0.5, mean=0.5, std=0.5):
    """Superimpose noise on the background (non-digit) pixels of digit images.

    A pixel is foreground when its [0,1] intensity exceeds
    foreground_threshold * (per-image max); foreground pixels are preserved
    bit-exactly, background pixels get clipped standard-normal noise added.
    """
    rng = np.random.default_rng(seed)
    u = part.images * std + mean  # back to [0, 1]
    thresh = foreground_threshold * u.max(axis=(1, 2, 3), keepdims=True)
    foreground = u > thresh
    noise = rng.standard_normal(u.shape).astype(np.float32)
    noisy = np.clip(u + noise, 0.0, 1.0)
    u_out = np.where(foreground, u, noisy)
    images = ((u_out - mean) / std).astype(np.float32)
    return DataPart(images, part.labels.copy())


# ---------------------------------------------------------------------------
# Split construction
# ---------------------------------------------------------------------------

@dataclass
class DataSplit:
    """Materialized open-set scenario: closed train/test with remapped labels
    plus an open test pool (labels kept as original source indices)."""

    closed_train: DataPart
    closed_test: DataPart
    open_test: DataPart
    spec: SplitSpec
    class_map: dict  # original known index -> 0..K-1


def _select(part, classes, remap=None):
    mask = np.isin(part.labels, list(classes))
    images = part.images[mask]
    labels = part.labels[mask]
    if remap is not None:
        labels = np.asarray([remap[int(l)] for l in labels], dtype=np.int64)
    return DataPart(images, labels)


def build_split(sources, spec):
    """Turn a SplitSpec into closed train / closed test / open test parts.

    `sources` maps dataset name -> Dataset. CIFAR+ scenarios compose two
    sources (cifar10 knowns, cifar100 opens); everything else uses one.
    Known labels are remapped to 0..K-1 in ascending original order.
    """
    if isinstance(sources, Dataset):
        sources = {sources.name: sources}
    if spec.dataset.startswith("cifar+"):
        known_src = _require_source(sources, "cifar10", spec)
        open_src = _require_source(sources, "cifar100", spec)
    else:
        known_src = _require_source(sources, spec.dataset, spec)
        open_src = known_src

    for c in spec.known:
        if c >= known_src.num_classes:
            raise ValueError(f"known class {c} outside {known_src.name}'s label range")
    for c in spec.open:
        if c >= open_src.num_classes:
            raise ValueError(f"open class {c} outside {open_src.name}'s label range")

    class_map = {c: i for i, c in enumerate(sorted(spec.known))}
    closed_train = _select(known_src.train, spec.known, class_map)
    closed_test = _select(known_src.test, spec.known, class_map)
    open_test = _select(open_src.test, spec.open)
    return DataSplit(closed_train, closed_test, open_test, spec, class_map)


def _require_source(sources, name, spec):
    if name not in sources:
        raise KeyError(f"split {spec.dataset!r} needs dataset source {name!r}")
    return sources[name]
