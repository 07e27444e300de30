"""Synthetic domain-shift problems, IDX ingestion and batch iteration."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons

from .autodiff import make_rng, seed_sequence

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainDataset:
    """Inputs of one domain plus optional labels.

    ``labels`` is what training may read.  Labels of a target domain are kept
    in ``held_out`` instead and are reachable only through
    :meth:`evaluation_labels`.
    """

    X: np.ndarray
    labels: np.ndarray | None = None
    domain: str = "source"
    provenance: str = ""
    held_out: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"inputs must be a 2-D matrix, got shape {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("inputs must be finite")
        object.__setattr__(self, "X", X)
        for name in ("labels", "held_out"):
            y = getattr(self, name)
            if y is not None:
                y = np.asarray(y, dtype=np.int64)
                if y.shape != (X.shape[0],):
                    raise ValueError(f"{name} must have one entry per row")
                if len(y) and y.min() < 0:
                    raise ValueError(f"{name} must be nonnegative class indices")
                object.__setattr__(self, name, y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def has_evaluation_labels(self) -> bool:
        return self.labels is not None or self.held_out is not None

    def evaluation_labels(self) -> np.ndarray:
        if self.labels is not None:
            return self.labels
        if self.held_out is not None:
            return self.held_out
        raise ValueError(f"{self.domain} dataset has no labels")

    def as_target(self) -> "DomainDataset":
        """Move labels behind the evaluation-only accessor."""
        held = self.labels if self.labels is not None else self.held_out
        return replace(self, labels=None, held_out=held, domain="target")

    def to_csv(self, path) -> None:
        """Header ``x0..x{d-1},label,domain``; unlabeled rows leave label empty."""
        labels = self.labels if self.labels is not None else self.held_out
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j}" for j in range(self.X.shape[1])] + ["label", "domain"])
            for i, row in enumerate(self.X):
                lab = "" if labels is None else int(labels[i])
                w.writerow([repr(float(v)) for v in row] + [lab, self.domain])


@dataclass(frozen=True)
class ShiftSpec:
    rotation: float = 0.0
    translation: tuple[float, ...] | None = None
    scaling: tuple[float, ...] | None = None
    noise_std: float = 0.0

    def __post_init__(self):
        if self.scaling is not None and min(self.scaling) <= 0:
            raise ValueError("scaling entries must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


def gen_two_moons(n: int, noise_std: float = 0.1, seed=0) -> DomainDataset:
    """Two interleaving half circles, ``n // 2`` points each; class 0 is the upper moon."""
    if n < 2 or n % 2:
        raise ValueError(f"n must be even and >= 2, got {n}")
    rs = int(seed_sequence(seed).generate_state(1)[0])
    X, y = make_moons(n_samples=n, noise=noise_std if noise_std > 0 else None,
                      random_state=rs, shuffle=True)
    return DomainDataset(X, y, provenance=f"two_moons(n={n}, noise_std={noise_std}, seed={seed})")


def gen_gaussian_mixture(k: int, n_per_class: int, means, cov_scale: float = 1.0,
                         seed=0) -> DomainDataset:
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if k < 2 or means.shape[0] != k:
        raise ValueError(f"need k >= 2 means, got k={k} and {means.shape[0]} means")
    if len(np.unique(means, axis=0)) != k:
        raise ValueError("component means must be distinct")
    rng = make_rng(seed)
    X = np.repeat(means, n_per_class, axis=0)
    X = X + cov_scale * rng.standard_normal(X.shape)
    y = np.repeat(np.arange(k), n_per_class)
    order = rng.permutation(len(y))
    return DomainDataset(X[order], y[order],
                         provenance=f"gaussian_mixture(k={k}, n_per_class={n_per_class}, "
                                    f"cov_scale={cov_scale}, seed={seed})")


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def apply_shift(data: DomainDataset, spec: ShiftSpec, seed=0) -> DomainDataset:
    """``x' = R(theta) (s * x) + t + noise`` as a target domain.

    Rotation acts on the first two coordinates.  Labels move to the
    evaluation-only slot.
    """
    X = data.X
    d = X.shape[1]
    if spec.scaling is not None:
        if len(spec.scaling) != d:
            raise ValueError(f"scaling has {len(spec.scaling)} entries for {d} features")
        X = X * np.asarray(spec.scaling, dtype=np.float64)
    if spec.rotation != 0.0:
        if d < 2:
            raise ValueError("rotation needs at least two features")
        X = X.copy()
        X[:, :2] = X[:, :2] @ rotation_matrix(spec.rotation).T
    if spec.translation is not None:
        if len(spec.translation) != d:
            raise ValueError(f"translation has {len(spec.translation)} entries for {d} features")
        X = X + np.asarray(spec.translation, dtype=np.float64)
    if spec.noise_std > 0:
        X = X + spec.noise_std * make_rng(seed).standard_normal(X.shape)
    out = data.as_target()
    return replace(out, X=X, provenance=f"{data.provenance} | shift({spec}, seed={seed})")


def rescale_inputs(data: DomainDataset, per_feature: bool = True) -> DomainDataset:
    """Affine map of the observed range onto [-1, 1].

    ``per_feature=False`` uses one global min/max, as for pixel data.
    Constant features map to 0.
    """
    X = data.X
    lo = X.min(axis=0) if per_feature else np.full(X.shape[1], X.min())
    hi = X.max(axis=0) if per_feature else np.full(X.shape[1], X.max())
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, 2.0 * (X - lo) / safe - 1.0, 0.0)
    return replace(data, X=np.clip(out, -1.0, 1.0))


def batch_iterator(n: int, batch_size: int, rng: np.random.Generator):
    """Index batches for one epoch: a fresh permutation, short tail dropped."""
    if batch_size > n:
        raise ValueError(f"batch_size={batch_size} exceeds dataset size {n}")
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


# -- IDX ---------------------------------------------------------------------------
# Big-endian header: two zero bytes, a type code (0x08 = unsigned byte), the
# number of dimensions, then one uint32 per dimension; payload is row-major.


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise IdxFormatError(f"{path}: bad magic {raw[:4].hex()}")
    if dtype != 0x08:
        raise IdxFormatError(f"{path}: unsupported element type 0x{dtype:02x}")
    if ndim not in (1, 3):
        raise IdxFormatError(f"{path}: unsupported IDX type with {ndim} dimensions")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for dim in dims:
        count *= dim
        if count > 2 ** 40:
            raise IdxFormatError(f"{path}: dimensions {dims} overflow")
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: payload has {len(raw) - header} bytes, header claims {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports 1-D labels and 3-D image stacks")
    data = array.astype(np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + data.tobytes(order="C"))


def load_idx(image_path, label_path=None, domain: str = "source") -> DomainDataset:
    images = read_idx(image_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{image_path}: expected an image file (magic 0x{IDX_IMAGES:08x})")
    X = images.reshape(images.shape[0], -1).astype(np.float64)
    labels = None
    if label_path is not None:
        labels = read_idx(label_path)
        if labels.ndim != 1:
            raise IdxFormatError(f"{label_path}: expected a label file (magic 0x{IDX_LABELS:08x})")
        if len(labels) != len(X):
            raise IdxFormatError(f"{label_path}: {len(labels)} labels for {len(X)} images")
    ds = DomainDataset(X, labels, domain="source", provenance=f"idx({image_path}, {label_path})")
    return ds.as_target() if domain == "target" else ds


def downscale_images(X: np.ndarray, side: int, factor: int = 2) -> np.ndarray:
    """Block-average ``side x side`` row-major images by ``factor``."""
    n = X.shape[0]
    new = side // factor
    imgs = X.reshape(n, side, side)[:, :new * factor, :new * factor]
    return imgs.reshape(n, new, factor, new, factor).mean(axis=(2, 4)).reshape(n, new * new)


def desk_subset(data: DomainDataset, max_rows: int = 2000, side: int = 28,
                target_side: int = 16, seed=0) -> DomainDataset:
    """Subsample rows and shrink square images to about ``target_side`` pixels."""
    rng = make_rng(seed)
    idx = np.sort(rng.permutation(len(data))[:max_rows])
    X = data.X[idx]
    factor = max(1, int(round(side / target_side)))
    if factor > 1:
        X = downscale_images(X, side, factor)
    if X.shape[1] != target_side ** 2:
        # crop/pad centrally to the requested side length
        cur = int(round(np.sqrt(X.shape[1])))
        imgs = X.reshape(len(X), cur, cur)
        out = np.zeros((len(X), target_side, target_side))
        c = min(cur, target_side)
        oi, ci = (target_side - c) // 2, (cur - c) // 2
        out[:, oi:oi + c, oi:oi + c] = imgs[:, ci:ci + c, ci:ci + c]
        X = out.reshape(len(X), -1)
    pick = lambda y: None if y is None else y[idx]
    return replace(data, X=X, labels=pick(data.labels), held_out=pick(data.held_out),
                   provenance=f"{data.provenance} | desk_subset({max_rows}, {target_side})")


def two_moons_task(n: int = 1000, noise_std: float = 0.1, rotation_deg: float = 35.0,
                   seed=0) -> tuple[DomainDataset, DomainDataset]:
    """Standard desk benchmark: a labeled moons source and a rotated, unlabeled
    moons target, each rescaled to [-1, 1]."""
    s_seed, t_seed, shift_seed = seed_sequence(seed).spawn(3)
    source = gen_two_moons(n, noise_std, s_seed)
    target = apply_shift(gen_two_moons(n, noise_std, t_seed),
                         ShiftSpec(rotation=np.deg2rad(rotation_deg)), shift_seed)
    return rescale_inputs(source), rescale_inputs(target)
