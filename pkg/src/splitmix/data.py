"""Datasets: synthetic multi-domain generation, non-iid partitioning, loaders.

The synthetic generator produces Gaussian class clusters with per-domain
affine shifts and rotations, optionally rendered as single-channel images.
It is the desk-scale stand-in for multi-domain image benchmarks and is
oracle-checkable: for the isotropic two-class case the Bayes accuracy is
Phi(margin / 2).
"""

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

from splitmix import rngs
from splitmix.errors import ConfigError, DataFormatError


@dataclass
class LabeledDataset:
    x: np.ndarray                 # (N, ...) float64, values in [0, 1]
    y: np.ndarray                 # (N,) int64 class indices in [0, C)
    num_classes: int
    domain: int | None = None

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return LabeledDataset(self.x[idx], self.y[idx], self.num_classes, self.domain)

    def present_classes(self):
        return tuple(sorted(int(c) for c in np.unique(self.y)))


def _check(ds: LabeledDataset):
    if len(ds.x) != len(ds.y):
        raise DataFormatError(f"{len(ds.x)} samples vs {len(ds.y)} labels")
    if len(ds.y) and (ds.y.min() < 0 or ds.y.max() >= ds.num_classes):
        raise DataFormatError(
            f"labels outside [0, {ds.num_classes}): min {ds.y.min()} max {ds.y.max()}")
    return ds


# ---------------------------------------------------------------------------
# synthetic multi-domain clusters

def _rotation_matrix(dim, angle):
    """Block-diagonal Givens rotation by `angle` on consecutive coordinate pairs."""
    r = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        r[i, i] = c
        r[i, i + 1] = -s
        r[i + 1, i] = s
        r[i + 1, i + 1] = c
    return r


def synth_multidomain(num_classes, domains, n_per_domain, dim, *, margin=4.0,
                      noise=0.08, domain_shift=0.0, domain_rotation=0.0,
                      image_side=None, test_per_domain=0, seed=0):
    """Generate per-domain train (and optional test) datasets.

    Class means sit at 0.5 + (margin * noise / 2) * u_c for orthonormal (or,
    for two classes, antipodal) unit directions u_c, so the pairwise mean
    separation for the binary case is exactly margin * noise.  Domain d gets
    features rotated by d * domain_rotation and shifted by domain_shift along
    a fixed random direction; everything is clipped to [0, 1].
    """
    if min(num_classes, domains, n_per_domain, dim) < 1:
        raise ConfigError("dataset: classes, domains, samples and dim must be >= 1")
    if image_side is not None and image_side * image_side != dim:
        raise ConfigError(f"dataset.image_side: {image_side}^2 != feature dim {dim}")
    rng = rngs.rng_for(seed, rngs.DATA)

    if num_classes == 2:
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        directions = np.stack([u, -u])
    elif num_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        directions = q.T
    else:
        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = 0.5 + 0.5 * margin * noise * directions

    shift_dir = rng.standard_normal(dim)
    shift_dir /= np.linalg.norm(shift_dir)

    def make_split(n, dom, split_tag):
        split_rng = rngs.rng_for(seed, rngs.DATA, dom, split_tag)
        # balanced labels, shuffled
        y = np.arange(n) % num_classes
        split_rng.shuffle(y)
        z = means[y] + noise * split_rng.standard_normal((n, dim))
        rot = _rotation_matrix(dim, dom * domain_rotation)
        x = (z - 0.5) @ rot.T + 0.5 + domain_shift * dom * shift_dir
        x = np.clip(x, 0.0, 1.0)
        if image_side is not None:
            x = x.reshape(n, 1, image_side, image_side)
        return _check(LabeledDataset(x, y.astype(np.int64), num_classes, domain=dom))

    train = [make_split(n_per_domain, d, 0) for d in range(domains)]
    test = [make_split(test_per_domain, d, 1) for d in range(domains)] \
        if test_per_domain else None
    return train, test


def two_class_bayes_accuracy(margin):
    """Analytic Bayes accuracy Phi(margin/2) for the isotropic binary case."""
    from math import erf, sqrt
    return 0.5 * (1.0 + erf(margin / 2 / sqrt(2.0)))


# ---------------------------------------------------------------------------
# partitioning

def class_noniid_partition(ds: LabeledDataset, num_clients, classes_per_client, seed=0):
    """Give each client exactly `classes_per_client` classes; split each
    class's samples uniformly among its holders.  Returns a list of shards."""
    c = ds.num_classes
    if classes_per_client < 1 or classes_per_client > c:
        raise ConfigError(f"partitioner.classes_per_client: must be in [1, {c}]")
    if num_clients * classes_per_client < c:
        raise ConfigError(
            f"partitioner: {num_clients} clients x {classes_per_client} classes "
            f"cannot cover {c} classes")
    rng = rngs.rng_for(seed, rngs.PARTITION)
    perm = rng.permutation(c)
    holders = {cls: [] for cls in range(c)}
    for k in range(num_clients):
        for j in range(classes_per_client):
            holders[int(perm[(k * classes_per_client + j) % c])].append(k)

    client_idx = [[] for _ in range(num_clients)]
    for cls in range(c):
        cls_idx = np.where(ds.y == cls)[0]
        rng.shuffle(cls_idx)
        if len(holders[cls]) == 0:
            continue
        for owner, part in zip(holders[cls], np.array_split(cls_idx, len(holders[cls]))):
            client_idx[owner].extend(part.tolist())
    shards = []
    for k in range(num_clients):
        idx = np.sort(np.array(client_idx[k], dtype=np.int64))
        if len(idx) == 0:
            raise ConfigError(f"partitioner: client {k} received no samples")
        shards.append(ds.subset(idx))
    return shards


def feature_noniid_partition(domain_datasets, clients_per_domain, seed=0):
    """Uniformly split each domain dataset among its clients.

    clients_per_domain: an int (same count per domain) or a per-domain list.
    Shards keep their domain id; client order follows domain order.
    """
    if isinstance(clients_per_domain, int):
        clients_per_domain = [clients_per_domain] * len(domain_datasets)
    if len(clients_per_domain) != len(domain_datasets):
        raise ConfigError("partitioner.clients_per_domain: length must match domains")
    rng = rngs.rng_for(seed, rngs.PARTITION)
    shards = []
    for ds, n_clients in zip(domain_datasets, clients_per_domain):
        if n_clients < 1:
            raise ConfigError("partitioner.clients_per_domain: counts must be >= 1")
        perm = rng.permutation(len(ds))
        for part in np.array_split(perm, n_clients):
            if len(part) == 0:
                raise ConfigError("partitioner: a client received no samples")
            shards.append(ds.subset(np.sort(part)))
    return shards


def iid_partition(ds: LabeledDataset, num_clients, seed=0):
    rng = rngs.rng_for(seed, rngs.PARTITION)
    perm = rng.permutation(len(ds))
    return [ds.subset(np.sort(part)) for part in np.array_split(perm, num_clients)]


def epoch_batches(n, batch_size, rng):
    """Shuffled minibatch index lists; a trailing singleton is folded into the
    previous batch so batch statistics never degenerate to one sample."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train_val_split(ds: LabeledDataset, val_fraction=0.1, seed=0, client_id=0):
    """Seeded shuffle; the trailing fraction becomes the validation shard."""
    n = len(ds)
    rng = rngs.rng_for(seed, rngs.VALSPLIT, client_id)
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    n_val = min(max(n_val, 0), n - 1)  # keep at least one training sample
    return ds.subset(np.sort(perm[:n - n_val])), ds.subset(np.sort(perm[n - n_val:]))


# ---------------------------------------------------------------------------
# file loaders

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.int16,
               0x0C: np.int32, 0x0D: np.float32, 0x0E: np.float64}


def _read_idx(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise DataFormatError(f"{path}: bad IDX magic {head!r}")
        dtype_code, ndims = head[2], head[3]
        if dtype_code not in _IDX_DTYPES:
            raise DataFormatError(f"{path}: unknown IDX dtype 0x{dtype_code:02x}")
        dims = []
        for _ in range(ndims):
            raw = fh.read(4)
            if len(raw) != 4:
                raise DataFormatError(f"{path}: truncated dimension header")
            dims.append(struct.unpack(">I", raw)[0])
        dtype = _IDX_DTYPES[dtype_code]
        count = int(np.prod(dims)) if dims else 0
        payload = fh.read()
    expected = count * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    return np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder(">")).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None):
    """Classic big-endian IDX image/label pair, normalized to [0, 1]."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: labels must be 1-D, got {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"sample count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    x = images.astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    if x.ndim == 3:  # (N, H, W) -> single channel
        x = x[:, None, :, :]
    y = labels.astype(np.int64)
    c = int(num_classes) if num_classes else int(y.max()) + 1
    return _check(LabeledDataset(x, y, c))


def load_csv(path, num_classes=None):
    """CSV with a header row; first column is the label, the rest features."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        width = len(header)
        if width < 2:
            raise DataFormatError(f"{path}: need a label column plus features")
        rows = []
        for i, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DataFormatError(f"{path}: line {i} has {len(row)} fields, expected {width}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {i}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    y = arr[:, 0]
    if np.any(y != np.round(y)) or y.min() < 0:
        raise DataFormatError(f"{path}: labels must be non-negative integers")
    y = y.astype(np.int64)
    c = int(num_classes) if num_classes else int(y.max()) + 1
    return _check(LabeledDataset(arr[:, 1:], y, c))


def save_npz(path, ds: LabeledDataset):
    np.savez(path, x=ds.x, y=ds.y, num_classes=np.int64(ds.num_classes),
             domain=np.int64(-1 if ds.domain is None else ds.domain))


def load_npz(path):
    with np.load(path) as z:
        for key in ("x", "y", "num_classes"):
            if key not in z:
                raise DataFormatError(f"{path}: missing array {key!r}")
        domain = int(z["domain"]) if "domain" in z else -1
        ds = LabeledDataset(z["x"].astype(np.float64), z["y"].astype(np.int64),
                            int(z["num_classes"]), None if domain < 0 else domain)
    return _check(ds)


def load_dataset(path, format, labels_path=None, num_classes=None):
    if not os.path.exists(path):
        raise DataFormatError(f"{path}: no such file")
    if format == "idx_binary":
        if labels_path is None:
            raise ConfigError("dataset.labels: required for idx_binary format")
        return load_idx(path, labels_path, num_classes)
    if format == "csv":
        return load_csv(path, num_classes)
    if format == "internal":
        return load_npz(path)
    raise ConfigError(f"dataset.format: unknown format {format!r}")
