"""Cohort ingestion: tile embeddings and patient metadata.

Two embedding file formats are supported and round-trip losslessly:

* CSV with header ``tile_id,slide_id,patient_id,dim_0,...,dim_{D-1}``
  (UTF-8, '.' decimal separator).
* Binary: magic ``PHA1``, little-endian u32 dimension, u64 record count,
  then per record three length-prefixed UTF-8 strings (u16 length) for
  tile/slide/patient ids followed by D little-endian f32 values.

Vectors are stored as f32 on disk and promoted to f64 in memory; all
downstream arithmetic is 64-bit.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"PHA1"


class CohortFormatError(ValueError):
    """Malformed embedding or metadata file."""


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Immutable set of tile embeddings with tile/slide/patient identity."""

    tile_ids: tuple[str, ...]
    slide_ids: tuple[str, ...]
    patient_ids: tuple[str, ...]
    vectors: np.ndarray  # (n, D) float64

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2:
            raise CohortFormatError("vectors must be a 2-D array")
        object.__setattr__(self, "vectors", vec)
        n = vec.shape[0]
        if not (len(self.tile_ids) == len(self.slide_ids) == len(self.patient_ids) == n):
            raise CohortFormatError("id columns and vectors disagree in length")
        if len(set(self.tile_ids)) != n:
            raise CohortFormatError("duplicate tile_id in embedding set")
        if not np.all(np.isfinite(vec)):
            row = int(np.argwhere(~np.isfinite(vec).all(axis=1))[0, 0])
            raise CohortFormatError(f"non-finite value at row {row}")
        slide_owner: dict[str, str] = {}
        for slide, patient in zip(self.slide_ids, self.patient_ids):
            prev = slide_owner.setdefault(slide, patient)
            if prev != patient:
                raise CohortFormatError(
                    f"slide {slide!r} mapped to patients {prev!r} and {patient!r}"
                )
        self.vectors.setflags(write=False)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, indices: np.ndarray) -> "EmbeddingSet":
        """New EmbeddingSet restricted to the given tile indices (order kept)."""
        idx = np.asarray(indices, dtype=np.intp)
        return EmbeddingSet(
            tile_ids=tuple(self.tile_ids[i] for i in idx),
            slide_ids=tuple(self.slide_ids[i] for i in idx),
            patient_ids=tuple(self.patient_ids[i] for i in idx),
            vectors=self.vectors[idx].copy(),
        )

    def for_patients(self, patients: set[str]) -> "EmbeddingSet":
        idx = np.array([i for i, p in enumerate(self.patient_ids) if p in patients], dtype=np.intp)
        return self.subset(idx)

    def slides_of(self) -> dict[str, str]:
        """slide_id -> patient_id mapping."""
        return {s: p for s, p in zip(self.slide_ids, self.patient_ids)}

    def equals(self, other: "EmbeddingSet") -> bool:
        """Bit-exact equality of identifiers, order, and vectors."""
        return (
            self.tile_ids == other.tile_ids
            and self.slide_ids == other.slide_ids
            and self.patient_ids == other.patient_ids
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.vectors, other.vectors)
        )


def _l2_normalize(vec: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vec, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise CohortFormatError("cannot l2-normalize a zero vector")
    return vec / norms


def load_embeddings(path: str | Path, format: str = "csv", normalize: bool = False) -> EmbeddingSet:
    """Load embeddings from ``path`` in the declared format ('csv' or 'binary').

    ``normalize=True`` applies l2-normalization to every vector at load time
    (off by default).
    """
    if format == "csv":
        emb = _load_embeddings_csv(Path(path))
    elif format == "binary":
        emb = _load_embeddings_binary(Path(path))
    else:
        raise CohortFormatError(f"unknown embedding format {format!r}")
    if normalize:
        emb = EmbeddingSet(emb.tile_ids, emb.slide_ids, emb.patient_ids, _l2_normalize(emb.vectors))
    return emb


def _load_embeddings_csv(path: Path) -> EmbeddingSet:
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError(f"{path}: empty file") from None
        if header[:3] != ["tile_id", "slide_id", "patient_id"]:
            raise CohortFormatError(f"{path}: malformed header {header[:3]}")
        dim_cols = header[3:]
        expected = [f"dim_{i}" for i in range(len(dim_cols))]
        if not dim_cols or dim_cols != expected:
            raise CohortFormatError(f"{path}: malformed dimension columns in header")
        dim = len(dim_cols)

        tiles: list[str] = []
        slides: list[str] = []
        patients: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=1):
            if len(row) != 3 + dim:
                raise CohortFormatError(
                    f"{path}: inconsistent row width at row {lineno} "
                    f"(got {len(row)}, expected {3 + dim})"
                )
            try:
                values = [float(v) for v in row[3:]]
            except ValueError:
                raise CohortFormatError(f"{path}: unparseable value at row {lineno}") from None
            if not all(math.isfinite(v) for v in values):
                raise CohortFormatError(f"{path}: non-finite value at row {lineno}")
            tiles.append(row[0])
            slides.append(row[1])
            patients.append(row[2])
            rows.append(values)

    if len(set(tiles)) != len(tiles):
        seen: set[str] = set()
        for i, t in enumerate(tiles, start=1):
            if t in seen:
                raise CohortFormatError(f"{path}: duplicate tile_id {t!r} at row {i}")
            seen.add(t)
    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return EmbeddingSet(tuple(tiles), tuple(slides), tuple(patients), vectors)


def _load_embeddings_binary(path: Path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != BINARY_MAGIC:
        raise CohortFormatError(f"{path}: bad magic bytes, not a {BINARY_MAGIC.decode()} file")
    dim = struct.unpack_from("<I", data, 4)[0]
    count = struct.unpack_from("<Q", data, 8)[0]
    offset = 16

    tiles: list[str] = []
    slides: list[str] = []
    patients: list[str] = []
    vectors = np.empty((count, dim), dtype=np.float64)
    try:
        for rec in range(count):
            ids = []
            for _ in range(3):
                (slen,) = struct.unpack_from("<H", data, offset)
                offset += 2
                ids.append(data[offset : offset + slen].decode("utf-8"))
                offset += slen
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
            offset += 4 * dim
            if not np.all(np.isfinite(vec)):
                raise CohortFormatError(f"{path}: non-finite value at row {rec + 1}")
            tiles.append(ids[0])
            slides.append(ids[1])
            patients.append(ids[2])
            vectors[rec] = vec.astype(np.float64)
    except struct.error:
        raise CohortFormatError(f"{path}: truncated record at row {len(tiles) + 1}") from None
    if offset != len(data):
        raise CohortFormatError(f"{path}: trailing bytes after last record")
    return EmbeddingSet(tuple(tiles), tuple(slides), tuple(patients), vectors)


def save_embeddings(emb: EmbeddingSet, path: str | Path, format: str = "csv") -> None:
    """Write embeddings to ``path`` in 'csv' or 'binary' format.

    Values pass through f32 in both formats so that save/load round-trips
    bit-exactly and both formats load to equal EmbeddingSets.
    """
    path = Path(path)
    if format == "csv":
        as32 = emb.vectors.astype(np.float32)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["tile_id", "slide_id", "patient_id"] + [f"dim_{i}" for i in range(emb.dim)]
            )
            for i in range(emb.n):
                writer.writerow(
                    [emb.tile_ids[i], emb.slide_ids[i], emb.patient_ids[i]]
                    + [repr(float(v)) for v in as32[i]]
                )
    elif format == "binary":
        parts = [BINARY_MAGIC, struct.pack("<I", emb.dim), struct.pack("<Q", emb.n)]
        as32 = emb.vectors.astype("<f4")
        for i in range(emb.n):
            for s in (emb.tile_ids[i], emb.slide_ids[i], emb.patient_ids[i]):
                raw = s.encode("utf-8")
                parts.append(struct.pack("<H", len(raw)))
                parts.append(raw)
            parts.append(as32[i].tobytes())
        path.write_bytes(b"".join(parts))
    else:
        raise CohortFormatError(f"unknown embedding format {format!r}")


@dataclass(frozen=True, eq=False)
class CohortMetadata:
    """Per-patient labels: binary subtype and/or survival time + event.

    Subtype and survival columns are individually optional; tasks that need
    a missing column fail via :meth:`require`, not at load time.
    """

    patient_ids: tuple[str, ...]
    subtype: np.ndarray | None = None  # {0,1} int
    time: np.ndarray | None = None  # months, > 0
    event: np.ndarray | None = None  # {0,1} int
    _index: dict[str, int] = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        n = len(self.patient_ids)
        if len(set(self.patient_ids)) != n:
            raise CohortFormatError("duplicate patient_id in metadata")
        if (self.time is None) != (self.event is None):
            raise CohortFormatError("time and event columns must come together")
        if self.subtype is not None:
            sub = np.asarray(self.subtype, dtype=np.int64)
            if sub.shape != (n,) or not np.isin(sub, (0, 1)).all():
                raise CohortFormatError("subtype_label outside {0,1}")
            object.__setattr__(self, "subtype", sub)
        if self.time is not None:
            t = np.asarray(self.time, dtype=np.float64)
            e = np.asarray(self.event, dtype=np.int64)
            if t.shape != (n,) or e.shape != (n,):
                raise CohortFormatError("survival columns disagree in length")
            if not np.all(np.isfinite(t)) or np.any(t <= 0):
                raise CohortFormatError("non-positive survival time")
            if not np.isin(e, (0, 1)).all():
                raise CohortFormatError("event indicator outside {0,1}")
            object.__setattr__(self, "time", t)
            object.__setattr__(self, "event", e)
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.patient_ids)})

    @property
    def n(self) -> int:
        return len(self.patient_ids)

    def require(self, task: str) -> None:
        """Raise unless the columns needed by ``task`` are present."""
        if task == "subtype" and self.subtype is None:
            raise CohortFormatError("metadata has no subtype_label column")
        if task == "survival" and self.time is None:
            raise CohortFormatError("metadata has no time/event columns")
        if task not in ("subtype", "survival"):
            raise ValueError(f"unknown task {task!r}")

    def rows_for(self, patients: list[str] | tuple[str, ...]) -> np.ndarray:
        """Row indices for the given patients; missing patient is an error."""
        try:
            return np.array([self._index[p] for p in patients], dtype=np.intp)
        except KeyError as exc:
            raise CohortFormatError(f"patient {exc.args[0]!r} has no metadata row") from None

    def summary(self) -> dict:
        out: dict = {"n_patients": self.n}
        if self.subtype is not None:
            out["n_subtype_1"] = int(self.subtype.sum())
            out["n_subtype_0"] = int(self.n - self.subtype.sum())
        if self.time is not None:
            out["n_events"] = int(self.event.sum())
            out["n_censored"] = int(self.n - self.event.sum())
            out["median_time"] = float(np.median(self.time))
        return out


METADATA_COLUMNS = ("patient_id", "subtype_label", "time", "event")


def load_metadata(path: str | Path) -> CohortMetadata:
    """Load patient metadata from CSV with header drawn from
    ``patient_id,subtype_label,time,event`` (label and survival columns
    individually optional)."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError(f"{path}: empty file") from None
        unknown = [c for c in header if c not in METADATA_COLUMNS]
        if "patient_id" not in header or unknown:
            raise CohortFormatError(f"{path}: malformed metadata header {header}")
        col = {name: header.index(name) for name in header}
        has_subtype = "subtype_label" in col
        has_time = "time" in col
        has_event = "event" in col
        if has_time != has_event:
            raise CohortFormatError(f"{path}: time and event columns must come together")

        patients: list[str] = []
        subtype: list[int] = []
        time: list[float] = []
        event: list[int] = []
        for lineno, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise CohortFormatError(f"{path}: inconsistent row width at row {lineno}")
            patients.append(row[col["patient_id"]])
            try:
                if has_subtype:
                    subtype.append(int(row[col["subtype_label"]]))
                if has_time:
                    time.append(float(row[col["time"]]))
                    event.append(int(row[col["event"]]))
            except ValueError:
                raise CohortFormatError(f"{path}: unparseable value at row {lineno}") from None
            if has_time and (not math.isfinite(time[-1]) or time[-1] <= 0):
                raise CohortFormatError(f"{path}: non-positive survival time at row {lineno}")
            if has_time and event[-1] not in (0, 1):
                raise CohortFormatError(f"{path}: event outside {{0,1}} at row {lineno}")
            if has_subtype and subtype[-1] not in (0, 1):
                raise CohortFormatError(f"{path}: subtype_label outside {{0,1}} at row {lineno}")
        seen: set[str] = set()
        for i, p in enumerate(patients, start=1):
            if p in seen:
                raise CohortFormatError(f"{path}: duplicate patient_id {p!r} at row {i}")
            seen.add(p)
    return CohortMetadata(
        patient_ids=tuple(patients),
        subtype=np.array(subtype, dtype=np.int64) if has_subtype else None,
        time=np.array(time, dtype=np.float64) if has_time else None,
        event=np.array(event, dtype=np.int64) if has_time else None,
    )


def save_metadata(meta: CohortMetadata, path: str | Path) -> None:
    path = Path(path)
    header = ["patient_id"]
    if meta.subtype is not None:
        header.append("subtype_label")
    if meta.time is not None:
        header += ["time", "event"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, p in enumerate(meta.patient_ids):
            row: list = [p]
            if meta.subtype is not None:
                row.append(int(meta.subtype[i]))
            if meta.time is not None:
                row += [repr(float(meta.time[i])), int(meta.event[i])]
            writer.writerow(row)


def check_metadata_covers(emb: EmbeddingSet, meta: CohortMetadata) -> None:
    """Every patient in ``emb`` must have a metadata row."""
    meta.rows_for(sorted(set(emb.patient_ids)))
