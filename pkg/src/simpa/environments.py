"""Few-shot episode generators.

* a multi-modal regression environment (sinusoid or linear tasks),
* N-way k-shot Gaussian-blob classification,
* N-way k-shot episodes drawn from a stored feature file.

Feature file layout (all integers little-endian uint32, vectors float64 LE)::

    b"SIMPAFT\\0"  version  n_classes  dim
    repeated n_classes times:  count  count*dim float64

plus a JSON sidecar ``<path>.json`` holding ``{"classes": [...names]}``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .stochastic import as_generator

X_RANGE = (-5.0, 5.0)
AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, np.pi)
SLOPE_RANGE = (-5.0, 5.0)
NOISE_SIGMA = 0.3

FEATURE_MAGIC = b"SIMPAFT\0"
FEATURE_VERSION = 1


@dataclass
class TaskBatch:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    kind: str = ""
    oracle_x: np.ndarray | None = None
    oracle_y: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def m_t(self) -> int:
        return len(self.support_x)

    @property
    def m_v(self) -> int:
        return len(self.query_x)


@dataclass(frozen=True)
class RegressionTaskSpec:
    kind: str
    A: float | None = None
    phi: float | None = None
    a: float | None = None
    b: float | None = None
    noise_sigma: float = NOISE_SIGMA

    def __post_init__(self):
        if self.kind == "sinusoid":
            if self.A is None or self.phi is None or self.a is not None or self.b is not None:
                raise ValueError("a sinusoid task needs exactly A and phi")
        elif self.kind == "linear":
            if self.a is None or self.b is None or self.A is not None or self.phi is not None:
                raise ValueError("a linear task needs exactly a and b")
        else:
            raise ValueError(f"unknown regression task kind {self.kind!r}")

    def mean(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "sinusoid":
            return self.A * np.sin(x + self.phi)
        return self.a * x + self.b

    def sample(self, x: np.ndarray, rng) -> np.ndarray:
        gen = as_generator(rng)
        return self.mean(x) + self.noise_sigma * gen.standard_normal(x.shape)


def sample_regression_spec(rng, noise_sigma: float = NOISE_SIGMA) -> RegressionTaskSpec:
    gen = as_generator(rng)
    if gen.random() < 0.5:
        return RegressionTaskSpec("sinusoid", A=gen.uniform(*AMPLITUDE_RANGE), phi=gen.uniform(*PHASE_RANGE), noise_sigma=noise_sigma)
    return RegressionTaskSpec("linear", a=gen.uniform(*SLOPE_RANGE), b=gen.uniform(*SLOPE_RANGE), noise_sigma=noise_sigma)


def make_regression_task(spec: RegressionTaskSpec, rng, m_t: int = 5, m_v: int = 15, n_oracle: int = 0) -> TaskBatch:
    gen = as_generator(rng)
    n = m_t + m_v + n_oracle
    x = gen.uniform(*X_RANGE, size=(n, 1))
    y = spec.sample(x, gen)
    batch = TaskBatch(x[:m_t], y[:m_t], x[m_t : m_t + m_v], y[m_t : m_t + m_v], kind=spec.kind, info={"spec": spec})
    if n_oracle:
        batch.oracle_x, batch.oracle_y = x[m_t + m_v :], y[m_t + m_v :]
    return batch


def sample_regression_task(rng, m_t: int = 5, m_v: int = 15, n_oracle: int = 0, noise_sigma: float = NOISE_SIGMA) -> TaskBatch:
    """One episode: kind with probability 1/2 each, x ~ U[-5, 5], Gaussian
    observation noise. ``n_oracle`` extra points form a hidden query set."""
    gen = as_generator(rng)
    spec = sample_regression_spec(gen, noise_sigma)
    return make_regression_task(spec, gen, m_t, m_v, n_oracle)


def _episode_from_pools(pools: Sequence[np.ndarray], k: int, m_v_per_class: int, gen, kind: str, info: dict) -> TaskBatch:
    """Labels 0..N-1 are assigned to the pools in a per-episode random order."""
    N = len(pools)
    labels = gen.permutation(N)
    sx, sy, qx, qy = [], [], [], []
    for pool, lab in zip(pools, labels):
        sx.append(pool[:k])
        qx.append(pool[k : k + m_v_per_class])
        sy += [lab] * k
        qy += [lab] * m_v_per_class
    return TaskBatch(
        np.concatenate(sx), np.asarray(sy, dtype=np.int64), np.concatenate(qx), np.asarray(qy, dtype=np.int64), kind=kind, info=info
    )


def sample_blob_classification_task(
    rng, N: int = 5, k: int = 1, m_v_per_class: int = 15, dim: int = 2, center_scale: float = 5.0, centers: np.ndarray | None = None
) -> TaskBatch:
    """N isotropic unit-variance Gaussian classes with centres drawn from
    N(0, center_scale^2 I) per task (or given explicitly)."""
    if N < 2:
        raise ValueError("N-way classification needs N >= 2")
    if k < 1 or m_v_per_class < 1:
        raise ValueError("need k >= 1 support and m_v_per_class >= 1 query points per class")
    gen = as_generator(rng)
    if centers is None:
        centers = center_scale * gen.standard_normal((N, dim))
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (N, dim):
        raise ValueError(f"centers must have shape {(N, dim)}")
    n = k + m_v_per_class
    pools = [c + gen.standard_normal((n, dim)) for c in centers]
    return _episode_from_pools(pools, k, m_v_per_class, gen, "blobs", {"centers": centers})


class FeatureFileError(ValueError):
    pass


def write_feature_file(path, features: Sequence[np.ndarray], class_names: Sequence[str] | None = None) -> None:
    """Write per-class feature matrices (each ``(count, dim)``) atomically."""
    path = Path(path)
    feats = [np.asarray(f, dtype="<f8") for f in features]
    if not feats:
        raise FeatureFileError("no classes to write")
    dim = feats[0].shape[1]
    if any(f.ndim != 2 or f.shape[1] != dim for f in feats):
        raise FeatureFileError("all classes must be (count, dim) with a common dim")
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(len(feats))]
    if len(names) != len(feats):
        raise FeatureFileError("one class name per class is required")
    parts = [FEATURE_MAGIC, struct.pack("<III", FEATURE_VERSION, len(feats), dim)]
    for f in feats:
        parts += [struct.pack("<I", f.shape[0]), f.tobytes(order="C")]
    _atomic_write(path, b"".join(parts))
    _atomic_write(Path(str(path) + ".json"), json.dumps({"classes": names}).encode())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_feature_file(path) -> tuple[list[np.ndarray], list[str]]:
    path = Path(path)
    raw = path.read_bytes()
    head = len(FEATURE_MAGIC) + 12
    if len(raw) < head or raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: not a feature file (bad or missing header)")
    version, n_classes, dim = struct.unpack_from("<III", raw, len(FEATURE_MAGIC))
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if n_classes == 0 or dim == 0:
        raise FeatureFileError(f"{path}: empty feature file")
    pos, feats = head, []
    for c in range(n_classes):
        if pos + 4 > len(raw):
            raise FeatureFileError(f"{path}: truncated before class {c}")
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        nbytes = count * dim * 8
        if pos + nbytes > len(raw):
            raise FeatureFileError(f"{path}: truncated inside class {c}")
        feats.append(np.frombuffer(raw, dtype="<f8", count=count * dim, offset=pos).reshape(count, dim).astype(np.float64))
        pos += nbytes
    if pos != len(raw):
        raise FeatureFileError(f"{path}: {len(raw) - pos} trailing bytes")
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        names = json.loads(sidecar.read_text()).get("classes")
        if not isinstance(names, list) or len(names) != n_classes:
            raise FeatureFileError(f"{sidecar}: class list does not match {n_classes} classes")
    else:
        names = [f"class_{i}" for i in range(n_classes)]
    return feats, names


class FeatureEpisodeSource:
    """N-way k-shot sampler over stored class feature matrices.

    Support and query rows are disjoint draws without replacement from the
    chosen classes; the row indices are kept in ``TaskBatch.info``.
    """

    def __init__(self, features: Sequence[np.ndarray], class_names: Sequence[str], N: int, k: int, m_v_per_class: int = 15):
        if N < 2 or k < 1 or m_v_per_class < 1:
            raise ValueError("invalid N, k or m_v_per_class")
        if N > len(features):
            raise ValueError(f"{N}-way episodes need at least {N} classes, file has {len(features)}")
        need = k + m_v_per_class
        short = [n for f, n in zip(features, class_names) if len(f) < need]
        if short:
            raise FeatureFileError(f"classes with fewer than k + m_v = {need} examples: {short}")
        self.features = list(features)
        self.class_names = list(class_names)
        self.N, self.k, self.m_v_per_class = N, k, m_v_per_class

    @property
    def dim(self) -> int:
        return self.features[0].shape[1]

    def sample(self, rng) -> TaskBatch:
        gen = as_generator(rng)
        classes = gen.choice(len(self.features), size=self.N, replace=False)
        pools, rows = [], []
        for c in classes:
            idx = gen.choice(len(self.features[c]), size=self.k + self.m_v_per_class, replace=False)
            pools.append(self.features[c][idx])
            rows.append((int(c), idx[: self.k].tolist(), idx[self.k :].tolist()))
        return _episode_from_pools(pools, self.k, self.m_v_per_class, gen, "features", {"rows": rows})


def load_feature_episodes(path, N: int = 5, k: int = 1, m_v_per_class: int = 15) -> FeatureEpisodeSource:
    feats, names = read_feature_file(path)
    return FeatureEpisodeSource(feats, names, N, k, m_v_per_class)
