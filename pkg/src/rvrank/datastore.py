"""Dataset loading, validation and the on-disk feature formats.

A dataset bundle is three files:

* a metadata CSV with header ``index,role,identity,cloth,camera`` listing
  every image across the five splits (train ``T``, validation query ``VQ``,
  validation gallery ``VG``, test query ``Q``, test gallery ``G``),
* a global feature file (magic ``RVR1``) holding one f32 row per image,
* an optional part feature file (magic ``RVP1``) holding, per image, K
  presence-flagged part vectors.

Binary payloads are little-endian f32, row-major, in metadata row order.
Rows in the metadata file are sorted by role (in the order T, VQ, VG, Q, G)
and then by index; indices are dense 0..n-1 within each role.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

ROLES = ("T", "VQ", "VG", "Q", "G")
_ROLE_RANK = {role: i for i, role in enumerate(ROLES)}

METADATA_HEADER = ("index", "role", "identity", "cloth", "camera")

FEATURE_MAGIC = b"RVR1"
PARTS_MAGIC = b"RVP1"

#: Number of part slots assumed when a bundle has no part feature file.
DEFAULT_PART_COUNT = 15


class BundleFormatError(ValueError):
    """A dataset file violates the on-disk format contract."""


class PartEntry(NamedTuple):
    """One part slot of an image: a presence flag and a (Dp,) f32 vector.

    When ``present`` is False the vector is all zeros and carries no
    information; downstream code must consult the flag, never the values.
    """

    present: bool
    vector: np.ndarray


@dataclass(frozen=True)
class ImageRecord:
    """A single image: metadata plus its global and part features."""

    index: int
    identity: int
    cloth: int
    camera: int
    global_feature: np.ndarray
    part_features: tuple[PartEntry, ...]


@dataclass(frozen=True)
class Violation:
    """One invariant failure found by :func:`validate_bundle`."""

    role: str
    index: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"[{self.role}:{self.index}] {self.field}: {self.message}"


@dataclass
class DatasetBundle:
    """All five splits of a dataset plus the shared dimensions (D, Dp, K)."""

    splits: dict[str, list[ImageRecord]]
    dims: tuple[int, int, int]

    @property
    def feature_dim(self) -> int:
        return self.dims[0]

    @property
    def part_dim(self) -> int:
        return self.dims[1]

    @property
    def part_count(self) -> int:
        return self.dims[2]

    def records(self) -> list[ImageRecord]:
        """All records in canonical (role, index) order."""
        out: list[ImageRecord] = []
        for role in ROLES:
            out.extend(self.splits.get(role, []))
        return out

    def resolve(self, role: str, index: int) -> ImageRecord:
        """Look up one record by (role, index); raises KeyError if missing."""
        if role not in self.splits:
            raise KeyError(f"unknown role {role!r}")
        split = self.splits[role]
        if not 0 <= index < len(split):
            raise KeyError(f"index {index} out of range for role {role} (n={len(split)})")
        return split[index]


# ---------------------------------------------------------------------------
# metadata CSV


def _read_metadata_rows(path: Path) -> list[tuple[int, str, int, int, int]]:
    rows: list[tuple[int, str, int, int, int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header_seen = False
        for lineno, raw in enumerate(reader, start=1):
            if not raw or (raw[0].startswith("#")):
                continue
            if not header_seen:
                if tuple(raw) != METADATA_HEADER:
                    raise BundleFormatError(
                        f"{path}: malformed header on line {lineno}: expected "
                        f"{','.join(METADATA_HEADER)!r}, got {','.join(raw)!r}"
                    )
                header_seen = True
                continue
            if len(raw) != 5:
                raise BundleFormatError(
                    f"{path}: line {lineno}: expected 5 fields, got {len(raw)}"
                )
            index_s, role, identity_s, cloth_s, camera_s = raw
            if role not in _ROLE_RANK:
                raise BundleFormatError(
                    f"{path}: line {lineno}: unknown role token {role!r} "
                    f"(expected one of {', '.join(ROLES)})"
                )
            try:
                parsed = (int(index_s), role, int(identity_s), int(cloth_s), int(camera_s))
            except ValueError as exc:
                raise BundleFormatError(f"{path}: line {lineno}: {exc}") from None
            rows.append(parsed)
        if not header_seen:
            raise BundleFormatError(f"{path}: missing header row")
    return rows


def _check_metadata_order(path: Path, rows: list[tuple[int, str, int, int, int]]) -> None:
    counts: dict[str, int] = {role: 0 for role in ROLES}
    prev_key = (-1, -1)
    for row_no, (index, role, _, _, _) in enumerate(rows):
        key = (_ROLE_RANK[role], index)
        if key <= prev_key:
            raise BundleFormatError(
                f"{path}: row {row_no} ({role}:{index}) out of order; rows must be "
                "sorted by role (T, VQ, VG, Q, G) then index"
            )
        if index != counts[role]:
            raise BundleFormatError(
                f"{path}: row {row_no}: role {role} expected dense index "
                f"{counts[role]}, got {index}"
            )
        counts[role] += 1
        prev_key = key


# ---------------------------------------------------------------------------
# binary feature files


def _read_exact(fh, n: int, path: Path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise BundleFormatError(
            f"{path}: truncated while reading {what}: wanted {n} bytes, got {len(data)}"
        )
    return data


def read_feature_file(path: str | Path) -> np.ndarray:
    """Read a global feature file into an (N, D) float32 array."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != FEATURE_MAGIC:
            raise BundleFormatError(
                f"{path}: bad magic at offset 0: expected {FEATURE_MAGIC!r}, got {magic!r}"
            )
        n, d = struct.unpack("<II", _read_exact(fh, 8, path, "header"))
        payload = fh.read()
    expected = n * d * 4
    if len(payload) != expected:
        raise BundleFormatError(
            f"{path}: payload length mismatch: header declares {n}x{d} f32 "
            f"({expected} bytes), file holds {len(payload)} bytes after the header"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n, d)


def write_feature_file(path: str | Path, features: np.ndarray) -> None:
    """Write an (N, D) array as a global feature file (f32, little-endian)."""
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", features.shape[0], features.shape[1]))
        fh.write(features.tobytes())


def read_parts_file(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a part feature file.

    Returns ``(present, vectors)`` where ``present`` is an (N, K) bool array
    and ``vectors`` is an (N, K, Dp) float32 array.  Vectors whose presence
    flag is 0 are normalised to all-zero regardless of the stored payload.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != PARTS_MAGIC:
            raise BundleFormatError(
                f"{path}: bad magic at offset 0: expected {PARTS_MAGIC!r}, got {magic!r}"
            )
        n, k, dp = struct.unpack("<III", _read_exact(fh, 12, path, "header"))
        payload = fh.read()
    record = np.dtype([("flag", "u1"), ("vec", "<f4", (dp,))])
    expected = n * k * record.itemsize
    if len(payload) != expected:
        raise BundleFormatError(
            f"{path}: payload length mismatch: header declares {n}x{k} parts of "
            f"dim {dp} ({expected} bytes), file holds {len(payload)} bytes"
        )
    raw = np.frombuffer(payload, dtype=record).reshape(n, k)
    flags = raw["flag"]
    bad = np.argwhere(flags > 1)
    if bad.size:
        i, j = bad[0]
        raise BundleFormatError(
            f"{path}: record {i} part {j}: presence flag must be 0 or 1, got {flags[i, j]}"
        )
    present = flags.astype(bool)
    vectors = raw["vec"].copy()
    vectors[~present] = 0.0
    return present, vectors


def write_parts_file(path: str | Path, present: np.ndarray, vectors: np.ndarray) -> None:
    """Write (N, K) presence flags and (N, K, Dp) vectors as a part file.

    Absent slots are stored with zero-filled vectors.
    """
    present = np.asarray(present, dtype=bool)
    vectors = np.asarray(vectors, dtype="<f4")
    if present.ndim != 2 or vectors.ndim != 3 or vectors.shape[:2] != present.shape:
        raise ValueError(
            f"inconsistent shapes: present {present.shape}, vectors {vectors.shape}"
        )
    n, k = present.shape
    dp = vectors.shape[2]
    record = np.dtype([("flag", "u1"), ("vec", "<f4", (dp,))])
    out = np.zeros((n, k), dtype=record)
    out["flag"] = present.astype("u1")
    stored = np.where(present[:, :, None], vectors, np.float32(0.0))
    out["vec"] = stored
    with open(path, "wb") as fh:
        fh.write(PARTS_MAGIC)
        fh.write(struct.pack("<III", n, k, dp))
        fh.write(out.tobytes())


# ---------------------------------------------------------------------------
# bundle assembly


def load_bundle(
    metadata_path: str | Path,
    feature_path: str | Path,
    parts_path: str | Path | None = None,
    expected_dims: tuple[int, int, int] | None = None,
) -> DatasetBundle:
    """Load a dataset bundle from its metadata, feature and part files.

    Raises :class:`BundleFormatError` on malformed headers, unknown role
    tokens, row/payload count mismatches, non-finite feature values, or an
    ``expected_dims`` mismatch.  When ``parts_path`` is None every record
    gets ``DEFAULT_PART_COUNT`` absent part slots of dimension zero.
    """
    metadata_path = Path(metadata_path)
    feature_path = Path(feature_path)
    rows = _read_metadata_rows(metadata_path)
    _check_metadata_order(metadata_path, rows)

    features = read_feature_file(feature_path)
    if features.shape[0] != len(rows):
        raise BundleFormatError(
            f"{feature_path}: holds {features.shape[0]} rows but "
            f"{metadata_path} lists {len(rows)} images"
        )
    bad_rows = np.flatnonzero(~np.isfinite(features).all(axis=1))
    if bad_rows.size:
        r = int(bad_rows[0])
        raise BundleFormatError(
            f"{feature_path}: non-finite value in feature row {r} "
            f"(metadata {rows[r][1]}:{rows[r][0]})"
        )

    if parts_path is not None:
        parts_path = Path(parts_path)
        present, vectors = read_parts_file(parts_path)
        if present.shape[0] != len(rows):
            raise BundleFormatError(
                f"{parts_path}: holds {present.shape[0]} records but "
                f"{metadata_path} lists {len(rows)} images"
            )
        finite = np.isfinite(vectors).all(axis=2) | ~present
        bad = np.argwhere(~finite)
        if bad.size:
            i, j = bad[0]
            raise BundleFormatError(
                f"{parts_path}: non-finite value in record {int(i)} part {int(j)} "
                f"(metadata {rows[int(i)][1]}:{rows[int(i)][0]})"
            )
        k, dp = present.shape[1], vectors.shape[2]
    else:
        k, dp = DEFAULT_PART_COUNT, 0
        present = np.zeros((len(rows), k), dtype=bool)
        vectors = np.zeros((len(rows), k, dp), dtype="<f4")

    dims = (features.shape[1], dp, k)
    if expected_dims is not None and tuple(expected_dims) != dims:
        raise BundleFormatError(
            f"dimension mismatch: expected (D, Dp, K) = {tuple(expected_dims)}, "
            f"files hold {dims}"
        )

    splits: dict[str, list[ImageRecord]] = {role: [] for role in ROLES}
    for row_no, (index, role, identity, cloth, camera) in enumerate(rows):
        parts = tuple(
            PartEntry(bool(present[row_no, j]), vectors[row_no, j]) for j in range(k)
        )
        splits[role].append(
            ImageRecord(index, identity, cloth, camera, features[row_no], parts)
        )
    return DatasetBundle(splits=splits, dims=dims)


def validate_bundle(bundle: DatasetBundle) -> list[Violation]:
    """Check bundle invariants; returns one :class:`Violation` per failure.

    Covers: negative identity/cloth/camera labels, non-dense or unsorted
    indices, feature/part shapes that disagree with ``bundle.dims``,
    non-finite values, and part tuples of the wrong length.
    """
    out: list[Violation] = []
    d, dp, k = bundle.dims
    for role in ROLES:
        for pos, rec in enumerate(bundle.splits.get(role, [])):
            if rec.index != pos:
                out.append(Violation(role, rec.index, "index",
                                     f"expected dense index {pos}"))
            for field in ("identity", "cloth", "camera"):
                if getattr(rec, field) < 0:
                    out.append(Violation(role, rec.index, field,
                                         f"negative value {getattr(rec, field)}"))
            gf = np.asarray(rec.global_feature)
            if gf.shape != (d,):
                out.append(Violation(role, rec.index, "global_feature",
                                     f"shape {gf.shape} != ({d},)"))
            elif not np.isfinite(gf).all():
                out.append(Violation(role, rec.index, "global_feature",
                                     "non-finite value"))
            if len(rec.part_features) != k:
                out.append(Violation(role, rec.index, "part_features",
                                     f"{len(rec.part_features)} slots, dims declare K={k}"))
                continue
            for j, entry in enumerate(rec.part_features):
                vec = np.asarray(entry.vector)
                if vec.shape != (dp,):
                    out.append(Violation(role, rec.index, "part_features",
                                         f"part {j} shape {vec.shape} != ({dp},)"))
                elif entry.present and not np.isfinite(vec).all():
                    out.append(Violation(role, rec.index, "part_features",
                                         f"part {j} non-finite value"))
    return out


def write_bundle(
    bundle: DatasetBundle,
    metadata_path: str | Path,
    feature_path: str | Path,
    parts_path: str | Path | None = None,
    config_comment: str | None = None,
) -> None:
    """Write a bundle back to disk in canonical form.

    The canonical form is byte-stable: rows in (role, index) order, plain
    integer formatting, ``\\n`` newlines, payloads in metadata row order.
    ``config_comment`` (if given) is emitted as a leading ``#`` line of the
    metadata CSV.
    """
    records = bundle.records()
    d, dp, k = bundle.dims
    with open(metadata_path, "w", newline="") as fh:
        if config_comment is not None:
            fh.write(f"# {config_comment}\n")
        fh.write(",".join(METADATA_HEADER) + "\n")
        for role in ROLES:
            for rec in bundle.splits.get(role, []):
                fh.write(f"{rec.index},{role},{rec.identity},{rec.cloth},{rec.camera}\n")

    features = np.zeros((len(records), d), dtype="<f4")
    for row_no, rec in enumerate(records):
        features[row_no] = rec.global_feature
    write_feature_file(feature_path, features)

    if parts_path is not None:
        present = np.zeros((len(records), k), dtype=bool)
        vectors = np.zeros((len(records), k, dp), dtype="<f4")
        for row_no, rec in enumerate(records):
            for j, entry in enumerate(rec.part_features):
                present[row_no, j] = entry.present
                if entry.present:
                    vectors[row_no, j] = entry.vector
        write_parts_file(parts_path, present, vectors)


def build_bundle(
    rows: list[tuple[int, str, int, int, int]],
    features: np.ndarray,
    present: np.ndarray | None = None,
    vectors: np.ndarray | None = None,
) -> DatasetBundle:
    """Assemble a bundle from in-memory arrays (row order = metadata order).

    ``rows`` entries are (index, role, identity, cloth, camera).  Arrays are
    cast to float32 so an assembled bundle round-trips bit-for-bit through
    :func:`write_bundle` / :func:`load_bundle`.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.shape[0] != len(rows):
        raise ValueError(f"{features.shape[0]} feature rows for {len(rows)} metadata rows")
    if (present is None) != (vectors is None):
        raise ValueError("present and vectors must be given together")
    if present is not None:
        present = np.asarray(present, dtype=bool)
        vectors = np.asarray(vectors, dtype=np.float32)
        k, dp = present.shape[1], vectors.shape[2]
        vectors = np.where(present[:, :, None], vectors, np.float32(0.0))
    else:
        k, dp = DEFAULT_PART_COUNT, 0
        present = np.zeros((len(rows), k), dtype=bool)
        vectors = np.zeros((len(rows), k, dp), dtype=np.float32)

    splits: dict[str, list[ImageRecord]] = {role: [] for role in ROLES}
    for row_no, (index, role, identity, cloth, camera) in enumerate(rows):
        if role not in _ROLE_RANK:
            raise ValueError(f"row {row_no}: unknown role token {role!r}")
        parts = tuple(
            PartEntry(bool(present[row_no, j]), vectors[row_no, j]) for j in range(k)
        )
        splits[role].append(
            ImageRecord(index, identity, cloth, camera, features[row_no], parts)
        )
    order_key = lambda rec: rec.index
    for role in ROLES:
        splits[role].sort(key=order_key)
    return DatasetBundle(splits=splits, dims=(features.shape[1], dp, k))
