"""Class-label embedding tables: file ingestion, synthesis, cosine classification."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ConfigurationError


def normalize_name(name: str) -> str:
    return name.strip().lower().replace(" ", "_")


@dataclass(frozen=True)
class SimilarityGroup:
    """Names to be placed within `angle_deg` of a shared anchor direction."""
    names: tuple[str, ...]
    angle_deg: float


@dataclass
class LabelEmbeddingTable:
    """Immutable mapping class name -> unit-norm vector."""

    names: list[str]
    vectors: np.ndarray   # (n, d), rows unit-norm
    provenance: str = "unknown"
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.names) != self.vectors.shape[0]:
            raise DataError("names/vectors length mismatch")
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate class names in embedding table")
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return normalize_name(name) in self._index

    def get(self, name: str) -> np.ndarray:
        key = normalize_name(name)
        if key not in self._index:
            raise KeyError(f"class {name!r} not in embedding table")
        return self.vectors[self._index[key]]

    def index_of(self, name: str) -> int:
        return self._index[normalize_name(name)]


def _normalize_rows(vectors: np.ndarray, context: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise DataError(f"{context}: zero vector cannot be normalized")
    # Rows already unit-norm pass through untouched so save/load round-trips
    # bit-exactly; re-dividing by a norm of 1 + eps would perturb the last bits.
    scale = np.where(np.abs(norms - 1.0) < 1e-12, 1.0, norms)
    return vectors / scale[:, None]


def load_embeddings(path: str) -> LabelEmbeddingTable:
    """Parse the text format: header "d <dim>", then "name v1 ... v<dim>" per row."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty embedding file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "d":
        raise DataError(f"{path}: bad header {lines[0]!r}, expected 'd <dim>'")
    try:
        dim = int(header[1])
    except ValueError as e:
        raise DataError(f"{path}: bad dimension in header") from e
    names: list[str] = []
    rows: list[np.ndarray] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
        name = normalize_name(parts[0])
        if name in names:
            raise DataError(f"{path}:{lineno}: duplicate class name {name!r}")
        try:
            rows.append(np.array([float(v) for v in parts[1:]], dtype=np.float64))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: malformed float") from e
        names.append(name)
    if not rows:
        raise DataError(f"{path}: no embedding rows")
    vectors = _normalize_rows(np.stack(rows), path)
    return LabelEmbeddingTable(names=names, vectors=vectors, provenance=f"file:{path}")


def save_embeddings(table: LabelEmbeddingTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"d {table.dim}\n")
        for name, row in zip(table.names, table.vectors):
            f.write(name + " " + " ".join(repr(float(v)) for v in row) + "\n")


def _hashed_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def synthesize_embeddings(class_names: list[str], d: int, seed: int,
                          similarity_groups: list[SimilarityGroup] | None = None
                          ) -> LabelEmbeddingTable:
    """Deterministic unit vectors derived from hash(seed, name).

    Names in a similarity group land within angle_deg of that group's anchor
    direction, which controls how close related classes are.
    """
    if d < 2:
        raise ConfigurationError(f"embedding dimension must be >= 2, got {d}")
    names = [normalize_name(n) for n in class_names]
    group_of: dict[str, tuple[int, SimilarityGroup]] = {}
    for gi, group in enumerate(similarity_groups or []):
        for n in group.names:
            group_of[normalize_name(n)] = (gi, group)

    rows = []
    for name in names:
        base = _unit(_hashed_rng(seed, "name", name).standard_normal(d))
        if name not in group_of:
            rows.append(base)
            continue
        gi, group = group_of[name]
        anchor = _unit(_hashed_rng(seed, "group", gi).standard_normal(d))
        theta = float(np.deg2rad(group.angle_deg))
        if theta == 0.0:
            rows.append(anchor)
            continue
        # Rotate the anchor toward an orthogonal direction derived from the name.
        ortho = base - np.dot(base, anchor) * anchor
        if np.linalg.norm(ortho) < 1e-12:
            rows.append(anchor)
            continue
        ortho = _unit(ortho)
        alpha = _hashed_rng(seed, "angle", name).uniform(0.0, theta)
        rows.append(np.cos(alpha) * anchor + np.sin(alpha) * ortho)
    vectors = _normalize_rows(np.stack(rows), "synthesize_embeddings")
    return LabelEmbeddingTable(names=names, vectors=vectors, provenance="synthetic")


def semantic_classify(m: np.ndarray, table: LabelEmbeddingTable) -> tuple[str, np.ndarray]:
    """Nearest class by cosine similarity; ties broken by table order."""
    m = np.asarray(m, dtype=np.float64)
    norm = np.linalg.norm(m)
    if norm == 0:
        raise ValueError("cannot classify a zero vector (cosine undefined)")
    if len(table) == 0:
        raise ValueError("empty embedding table")
    scores = table.vectors @ (m / norm)
    return table.names[int(np.argmax(scores))], scores


def sample_negative(true_class: str, table: LabelEmbeddingTable,
                    rng: np.random.Generator) -> str:
    """Uniform draw over classes != true_class."""
    if len(table) < 2:
        raise ValueError("need at least 2 classes to sample a negative")
    key = normalize_name(true_class)
    candidates = [n for n in table.names if n != key]
    return candidates[int(rng.integers(0, len(candidates)))]
