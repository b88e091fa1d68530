"""Class embedding tables: unit vectors keyed by class name."""
from __future__ import annotations

import io
import math
from typing import BinaryIO, Iterable, Sequence, TextIO, Union

import numpy as np

# Vectors whose norm is already this close to 1 are stored untouched, which
# keeps load(save(table)) bit-exact.
_UNIT_TOL = 1e-15


class EmbeddingFormatError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class ClassEmbeddingTable:
    """Immutable ordered map from class name to a unit-norm vector."""

    def __init__(self, names: Sequence[str], vectors):
        names = tuple(names)
        vecs = np.array(vectors, dtype=np.float64)
        if not names:
            raise ValueError("embedding table needs at least one class")
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names in embedding table")
        if vecs.ndim != 2 or vecs.shape[0] != len(names):
            raise ValueError(f"expected {len(names)} vectors, got array of shape {vecs.shape}")
        vecs = np.stack([_unit(v, name) for name, v in zip(names, vecs)])
        vecs.setflags(write=False)
        self._names = names
        self._vectors = vecs
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        return self._index[name]

    def vector(self, name: str) -> np.ndarray:
        return self._vectors[self._index[name]]

    def subset(self, names: Iterable[str]) -> "ClassEmbeddingTable":
        names = list(names)
        return ClassEmbeddingTable(names, [self.vector(n) for n in names])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassEmbeddingTable):
            return NotImplemented
        return self._names == other._names and np.array_equal(self._vectors, other._vectors)

    def __repr__(self) -> str:
        return f"ClassEmbeddingTable(k={len(self)}, dim={self.dim})"


def _unit(v: np.ndarray, name: str) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if not math.isfinite(norm) or norm == 0.0:
        raise ValueError(f"embedding for {name!r} cannot be normalised (norm={norm})")
    if abs(norm - 1.0) <= _UNIT_TOL:
        return v.copy()
    return v / norm


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    c = float(u @ v) / (nu * nv)
    return min(1.0, max(-1.0, c))


def synth_embeddings(
    class_names: Sequence[str],
    dim: int,
    seed: int,
    similarity_pairs: Sequence[tuple[str, str, float]] = (),
) -> ClassEmbeddingTable:
    """Deterministic embeddings with controlled pairwise proximity.

    Every class gets its own direction from a random orthonormal basis, so
    unpaired classes are exactly orthogonal. For a pair ``(a, b, c)`` the
    vector of ``a`` is rotated toward ``b`` inside the plane spanned by the
    two basis directions until their cosine equals ``c``.
    """
    names = list(class_names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate class names")
    if dim < len(names):
        raise CapacityError(f"dim={dim} cannot hold {len(names)} mutually orthogonal classes")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, len(names))))
    # fix QR sign ambiguity so the basis depends only on the seed
    basis = (q * np.sign(np.diag(r))).T

    pos = {n: i for i, n in enumerate(names)}
    derived = {}
    for a, b, c in similarity_pairs:
        if a not in pos or b not in pos:
            raise ValueError(f"pair ({a!r}, {b!r}) names an unknown class")
        if a == b:
            raise ValueError(f"class {a!r} paired with itself")
        if not -1.0 < c < 1.0:
            raise ValueError(f"target cosine {c} outside (-1, 1)")
        if a in derived:
            raise ValueError(f"class {a!r} rotated by more than one pair")
        derived[a] = (b, float(c))

    vectors: dict[str, np.ndarray] = {}

    def resolve(name: str, trail: tuple[str, ...]) -> np.ndarray:
        if name in vectors:
            return vectors[name]
        if name in trail:
            raise ValueError(f"cyclic similarity pairs through {name!r}")
        own = basis[pos[name]]
        if name in derived:
            anchor_name, c = derived[name]
            anchor = resolve(anchor_name, trail + (name,))
            # orthogonalise own direction against the anchor before rotating
            perp = own - (own @ anchor) * anchor
            perp /= np.linalg.norm(perp)
            own = c * anchor + math.sqrt(1.0 - c * c) * perp
        vectors[name] = own
        return own

    return ClassEmbeddingTable(names, [resolve(n, ()) for n in names])


def load_embeddings(source: Union[BinaryIO, TextIO, bytes, str]) -> ClassEmbeddingTable:
    """Parse the ``dim=<int>`` / ``<name> <v1> ... <v_dim>`` text format."""
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = text.splitlines()
    if not lines:
        raise EmbeddingFormatError("line 1: empty embedding file")
    head = lines[0].strip()
    if not head.startswith("dim="):
        raise EmbeddingFormatError(f"line 1: expected 'dim=<int>', got {head!r}")
    try:
        dim = int(head[4:])
    except ValueError:
        raise EmbeddingFormatError(f"line 1: bad dimension {head[4:]!r}") from None
    if dim <= 0:
        raise EmbeddingFormatError(f"line 1: dimension must be positive, got {dim}")

    names, vecs = [], []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        name, values = parts[0], parts[1:]
        if len(values) != dim:
            raise EmbeddingFormatError(
                f"line {lineno}: class {name!r} has {len(values)} values, expected dim={dim}"
            )
        if name in seen:
            raise EmbeddingFormatError(f"line {lineno}: duplicate class name {name!r}")
        try:
            vec = np.array([float(x) for x in values])
        except ValueError as exc:
            raise EmbeddingFormatError(f"line {lineno}: {exc}") from None
        norm = float(np.linalg.norm(vec))
        if not math.isfinite(norm) or norm == 0.0:
            raise EmbeddingFormatError(f"line {lineno}: class {name!r} has a zero or non-finite vector")
        seen.add(name)
        names.append(name)
        vecs.append(vec)
    if not names:
        raise EmbeddingFormatError("no class records after the dim line")
    return ClassEmbeddingTable(names, vecs)


def save_embeddings(table: ClassEmbeddingTable, sink: Union[TextIO, None] = None) -> str:
    """Write ``table`` in the text format :func:`load_embeddings` reads."""
    for name in table.names:
        if not name or any(ch.isspace() for ch in name):
            raise EmbeddingFormatError(f"class name {name!r} is empty or contains whitespace")
    buf = io.StringIO()
    buf.write(f"dim={table.dim}\n")
    for name, vec in zip(table.names, table.vectors):
        buf.write(name + " " + " ".join(repr(float(x)) for x in vec) + "\n")
    text = buf.getvalue()
    if sink is not None:
        sink.write(text)
    return text
