"""Clinical records, canonical prompt text, and text embeddings.

A record's preoperative fields are rendered into one deterministic sentence
(fixed field order, fixed one-decimal numeric formatting). The sentence is
embedded either by character-trigram feature hashing or by a lookup table
loaded from a JSON file. Postoperative scores never enter the prompt: the
embedding is a pure function of preoperative data.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import IoFailure, MalformedHeader, UnknownSubject, ZeroVector

SEXES = ("male", "female")

# Optional assessment scales serialized into the prompt, in fixed order.
SCALE_NAMES = ("moca", "mmse", "hamd")

MISSING_TOKEN = "not recorded"


@dataclass
class ClinicalRecord:
    """Preoperative profile of one subject, plus the postoperative motor score
    when known. updrs3_post is only used to derive outcome labels; it is never
    serialized into prompts."""

    subject_id: str
    age: float
    sex: str
    disease_duration: float
    updrs3_pre: float
    scores: dict[str, float] = field(default_factory=dict)
    updrs3_post: float | None = None

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.age < 0 or self.disease_duration < 0:
            raise ValueError("age and disease_duration must be nonnegative")
        if self.updrs3_pre < 0:
            raise ValueError("updrs3_pre must be nonnegative")
        unknown = set(self.scores) - set(SCALE_NAMES)
        if unknown:
            raise ValueError(f"unknown scale names: {sorted(unknown)}")


def record_to_dict(rec: ClinicalRecord) -> dict:
    out = {
        "subject_id": rec.subject_id,
        "age": rec.age,
        "sex": rec.sex,
        "disease_duration": rec.disease_duration,
        "updrs3_pre": rec.updrs3_pre,
    }
    if rec.scores:
        out["scores"] = dict(sorted(rec.scores.items()))
    if rec.updrs3_post is not None:
        out["updrs3_post"] = rec.updrs3_post
    return out


def record_from_dict(raw: dict) -> ClinicalRecord:
    try:
        return ClinicalRecord(
            subject_id=str(raw["subject_id"]),
            age=float(raw["age"]),
            sex=raw["sex"],
            disease_duration=float(raw["disease_duration"]),
            updrs3_pre=float(raw["updrs3_pre"]),
            scores={k: float(v) for k, v in raw.get("scores", {}).items()},
            updrs3_post=None if raw.get("updrs3_post") is None else float(raw["updrs3_post"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"bad clinical record: {exc}") from exc


def serialize_prompt(rec: ClinicalRecord) -> str:
    """Canonical one-sentence description of the preoperative profile.

    The template, field order, and one-decimal number formatting are frozen:
    the same record always yields byte-identical text. Missing optional
    scales render as a fixed placeholder token.
    """
    parts = [
        f"age {rec.age:.1f} years",
        f"sex {rec.sex}",
        f"disease duration {rec.disease_duration:.1f} years",
        f"baseline motor score {rec.updrs3_pre:.1f}",
    ]
    for name in SCALE_NAMES:
        value = rec.scores.get(name)
        rendered = MISSING_TOKEN if value is None else f"{value:.1f}"
        parts.append(f"{name} {rendered}")
    return "Preoperative profile: " + "; ".join(parts) + "."


class HashingEmbedder:
    """Character-trigram feature hashing into a fixed-width vector.

    Each trigram of the prompt is hashed (keyed by the seed) to a bucket and
    a sign; the accumulated vector is L2-normalized. Deterministic in
    (text, dim, seed) across platforms.
    """

    kind = "hashing"

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self.seed = int(seed)
        self._key = self.seed.to_bytes(8, "little", signed=True)

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": self.seed}

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        raw = text.encode("utf-8")
        if len(raw) < 3:
            raise ZeroVector("prompt shorter than one trigram")
        for pos in range(len(raw) - 2):
            digest = hashlib.blake2b(raw[pos : pos + 3], digest_size=9, key=self._key).digest()
            bucket = int.from_bytes(digest[:8], "little") % self.dim
            sign = 1.0 if digest[8] & 1 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ZeroVector("trigram hashes cancelled to the zero vector")
        return vec / norm

    def embed(self, rec: ClinicalRecord) -> np.ndarray:
        return self.embed_text(serialize_prompt(rec))


class FileEmbedder:
    """Embeddings looked up by subject id from a JSON table.

    The file maps subject_id -> list of floats; all vectors must share one
    dimension. Vectors are L2-normalized on load.
    """

    kind = "file"

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        try:
            with open(self.path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read embeddings {self.path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise MalformedHeader(f"embeddings {self.path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or not raw:
            raise MalformedHeader(f"embeddings {self.path} must be a nonempty JSON object")
        self.table: dict[str, np.ndarray] = {}
        dim = None
        for sid, vals in raw.items():
            vec = np.asarray(vals, dtype=np.float64)
            if vec.ndim != 1:
                raise MalformedHeader(f"embedding for {sid!r} is not a flat vector")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise MalformedHeader(
                    f"embedding for {sid!r} has dim {vec.size}, expected {dim}"
                )
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise ZeroVector(f"embedding for {sid!r} is the zero vector")
            self.table[sid] = vec / norm
        self.dim = int(dim)

    def describe(self) -> dict:
        return {"kind": self.kind, "path": self.path, "dim": self.dim}

    def embed(self, rec: ClinicalRecord) -> np.ndarray:
        try:
            return self.table[rec.subject_id]
        except KeyError:
            raise UnknownSubject(f"no embedding for subject {rec.subject_id!r}") from None


Embedder = HashingEmbedder | FileEmbedder


def embedder_from_description(desc: dict) -> Embedder:
    """Reconstruct an embedder from its describe() dictionary."""
    kind = desc.get("kind")
    if kind == "hashing":
        return HashingEmbedder(dim=int(desc["dim"]), seed=int(desc["seed"]))
    if kind == "file":
        return FileEmbedder(desc["path"])
    raise MalformedHeader(f"unknown embedder kind {kind!r}")


# ---------------------------------------------------------------------------
# cohort manifests: one record per line plus paths to the subject's volumes


@dataclass
class SubjectEntry:
    """Manifest row: the clinical record plus file paths for imaging data.

    Paths are stored relative to the manifest location and resolved on read.
    """

    record: ClinicalRecord
    t1_path: str
    field_path: str


def write_manifest(entries: list[SubjectEntry], path: str | os.PathLike) -> None:
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in entries:
                row = record_to_dict(entry.record)
                row["t1_path"] = os.path.relpath(os.path.abspath(entry.t1_path), base)
                row["field_path"] = os.path.relpath(os.path.abspath(entry.field_path), base)
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
                fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path: str | os.PathLike) -> list[SubjectEntry]:
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedHeader(f"{path}:{lineno}: bad JSON: {exc}") from exc
        record = record_from_dict(raw)
        try:
            t1_path = os.path.normpath(os.path.join(base, raw["t1_path"]))
            field_path = os.path.normpath(os.path.join(base, raw["field_path"]))
        except KeyError as exc:
            raise MalformedHeader(f"{path}:{lineno}: missing {exc}") from exc
        entries.append(SubjectEntry(record=record, t1_path=t1_path, field_path=field_path))
    return entries
