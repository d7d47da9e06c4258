"""MNIST (IDX) and CIFAR-10 (binary batches) readers, plus an offline stand-in."""
from __future__ import annotations

import gzip
import hashlib
import logging
import shutil
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# canonical archives and their published MD5 digests
MNIST_MIRRORS = ["https://ossci-datasets.s3.amazonaws.com/mnist/",
                 "https://storage.googleapis.com/cvdf-datasets/mnist/"]
MNIST_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"


class DataError(ValueError):
    pass


@dataclass
class DatasetHandle:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    @property
    def num_classes(self) -> int:
        return 10


# -- IDX ---------------------------------------------------------------------

def _open_maybe_gz(path: Path) -> bytes:
    for cand in (path, path.with_name(path.name + ".gz")):
        if cand.exists():
            raw = cand.read_bytes()
            if raw[:2] == b"\x1f\x8b":
                try:
                    return gzip.decompress(raw)
                except (OSError, EOFError) as e:
                    raise DataError(f"{cand}: corrupt gzip stream ({e})") from None
            return raw
    raise DataError(f"missing file {path} (or {path.name}.gz)")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse one big-endian IDX file into a uint8 array."""
    path = Path(path)
    raw = _open_maybe_gz(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataError(f"{path}: truncated header")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    n = int(np.prod(dims))
    if len(raw) - hdr < n:
        raise DataError(f"{path}: truncated file ({len(raw) - hdr} of {n} data bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=hdr).reshape(dims)


def _normalize_gray(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    return ((x - MNIST_MEAN) / MNIST_STD)[:, None, :, :]


def load_mnist(directory) -> DatasetHandle:
    d = Path(directory)
    arrays = {}
    for key, fname in MNIST_FILES.items():
        magic = IDX_IMAGES_MAGIC if key.endswith("images") else IDX_LABELS_MAGIC
        arrays[key] = read_idx(d / fname, magic)
    for split in ("train", "test"):
        ni, nl = len(arrays[f"{split}_images"]), len(arrays[f"{split}_labels"])
        if ni != nl:
            raise DataError(f"{d}: {split} split has {ni} images but {nl} labels")
    return DatasetHandle(
        "mnist",
        _normalize_gray(arrays["train_images"]), arrays["train_labels"].astype(np.int64),
        _normalize_gray(arrays["test_images"]), arrays["test_labels"].astype(np.int64),
        (MNIST_MEAN,), (MNIST_STD,),
    )


# -- CIFAR-10 ----------------------------------------------------------------

def read_cifar_batch(path) -> Tuple[np.ndarray, np.ndarray]:
    """One binary batch -> (uint8 images N x 3 x 32 x 32, int64 labels)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _cifar_dir(directory: Path) -> Path:
    sub = directory / "cifar-10-batches-bin"
    return sub if sub.is_dir() else directory


def _normalize_rgb(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    m = np.asarray(CIFAR_MEAN).reshape(1, 3, 1, 1)
    s = np.asarray(CIFAR_STD).reshape(1, 3, 1, 1)
    return (x - m) / s


def load_cifar10(directory) -> DatasetHandle:
    d = _cifar_dir(Path(directory))
    parts = [read_cifar_batch(d / f"data_batch_{i}.bin") for i in range(1, 6)]
    xt, yt = read_cifar_batch(d / "test_batch.bin")
    return DatasetHandle(
        "cifar10",
        _normalize_rgb(np.concatenate([p[0] for p in parts])), np.concatenate([p[1] for p in parts]),
        _normalize_rgb(xt), yt, CIFAR_MEAN, CIFAR_STD,
    )


# -- offline stand-in --------------------------------------------------------

def load_digits28(test_size: int = 500, seed: int = 0) -> DatasetHandle:
    """scikit-learn's 8x8 handwritten digits, upscaled into MNIST geometry.

    Each digit is bilinearly resized to 20x20 and centred in a 28x28 frame,
    then normalized with the MNIST constants, so LeNet runs unchanged. It is
    a small (1,797 sample) stand-in for smoke runs when MNIST is absent.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    ds = load_digits()
    imgs = np.clip(zoom(ds.images / 16.0, (1, 2.5, 2.5), order=1), 0.0, 1.0)
    frame = np.zeros((len(imgs), 28, 28))
    frame[:, 4:24, 4:24] = imgs
    order = np.random.default_rng(seed).permutation(len(frame))
    x = ((frame - MNIST_MEAN) / MNIST_STD)[:, None][order]
    y = ds.target.astype(np.int64)[order]
    return DatasetHandle("digits", x[:-test_size], y[:-test_size], x[-test_size:], y[-test_size:],
                         (MNIST_MEAN,), (MNIST_STD,))


def load_dataset(name: str, directory: Optional[str] = None) -> DatasetHandle:
    if name == "mnist":
        return load_mnist(directory or "data/mnist")
    if name == "cifar10":
        return load_cifar10(directory or "data/cifar10")
    if name == "digits":
        return load_digits28()
    raise DataError(f"unknown dataset {name!r}")


# -- fetch -------------------------------------------------------------------

def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url: str, dest: Path, md5: str, timeout: float = 60.0) -> None:
    if dest.exists() and _md5(dest) == md5:
        return
    tmp = dest.with_name(dest.name + ".part")
    logger.info("downloading %s", url)
    with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as f:
        shutil.copyfileobj(resp, f)
    got = _md5(tmp)
    if got != md5:
        tmp.unlink()
        raise DataError(f"{url}: checksum mismatch (md5 {got}, expected {md5})")
    tmp.replace(dest)


def fetch(name: str, directory) -> Path:
    """Download a canonical archive over HTTPS, verify it, and unpack it."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if name == "mnist":
        for fname, md5 in MNIST_MD5.items():
            errors = []
            for base in MNIST_MIRRORS:
                try:
                    _download(base + fname, d / fname, md5)
                    break
                except (OSError, DataError) as e:
                    errors.append(f"{base}: {e}")
            else:
                raise DataError(f"could not fetch {fname}: " + "; ".join(errors))
        return d
    if name == "cifar10":
        archive = d / "cifar-10-binary.tar.gz"
        try:
            _download(CIFAR_URL, archive, CIFAR_MD5)
        except OSError as e:
            raise DataError(f"could not fetch {CIFAR_URL}: {e}") from None
        with tarfile.open(archive) as tar:
            members = [m for m in tar.getmembers() if m.isfile() and m.name.endswith(".bin")]
            for m in members:
                if Path(m.name).is_absolute() or ".." in Path(m.name).parts:
                    raise DataError(f"unsafe path in archive: {m.name}")
            tar.extractall(d, members=members)
        return d
    raise DataError(f"nothing to fetch for dataset {name!r}")
