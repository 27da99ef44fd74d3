"""Corpora of segment-level acoustic features.

An utterance is an ordered stack of fixed-width feature rows (one per
250 ms segment) plus speaker, corpus, emotion and binary valence.  Feature
files are UTF-8 CSV::

    corpus_id,speaker_id,utterance_id,segment_index,emotion,f000,...,f087[,valence]

with one row per segment.  The optional ``valence`` column
(``negative``/``positive``) is cross-checked against the valence table.
"""

from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionDriftError,
    DuplicateSegmentError,
    FeatureFileError,
    InputShapeError,
    UnmappedEmotionError,
    ValenceMismatchError,
)

FIXED_COLUMNS = ("corpus_id", "speaker_id", "utterance_id", "segment_index", "emotion")


class Valence(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1

    @property
    def sign(self) -> int:
        return 1 if self is Valence.POSITIVE else -1

    @classmethod
    def parse(cls, text: str) -> "Valence":
        t = str(text).strip().lower()
        if t in ("negative", "neg", "0", "-1"):
            return cls.NEGATIVE
        if t in ("positive", "pos", "1", "+1"):
            return cls.POSITIVE
        raise ValueError(f"not a valence: {text!r}")


@dataclass(frozen=True)
class CorpusInfo:
    name: str
    language: str
    negative: tuple
    positive: tuple


# Binary valence mapping of the categorical labels of the four corpora.
VALENCE_TABLE = {
    "EMO-DB": CorpusInfo(
        "EMO-DB", "German",
        ("Anger", "Sadness", "Fear", "Disgust", "Boredom"),
        ("Neutral", "Happiness"),
    ),
    "SAVEE": CorpusInfo(
        "SAVEE", "English",
        ("Anger", "Sadness", "Fear", "Disgust"),
        ("Neutral", "Happiness", "Surprise"),
    ),
    "EMOVO": CorpusInfo(
        "EMOVO", "Italian",
        ("Anger", "Sadness", "Fear", "Disgust"),
        ("Neutral", "Joy", "Surprise"),
    ),
    "URDU": CorpusInfo(
        "URDU", "Urdu",
        ("Angry", "Sad"),
        ("Neutral", "Happy"),
    ),
}


def _corpus_key(corpus_id: str) -> str:
    return re.sub(r"[^a-z0-9]", "", corpus_id.lower())


_BY_KEY = {_corpus_key(k): v for k, v in VALENCE_TABLE.items()}


def corpus_info(corpus_id: str) -> CorpusInfo | None:
    """Table entry for ``corpus_id`` ("EMO-DB", "emodb" and "Emo-DB" all match)."""
    return _BY_KEY.get(_corpus_key(corpus_id))


def map_valence(corpus_id: str, emotion: str) -> Valence:
    info = corpus_info(corpus_id)
    if info is None:
        raise UnmappedEmotionError(corpus_id, emotion)
    label = emotion.strip().lower()
    if label in (e.lower() for e in info.negative):
        return Valence.NEGATIVE
    if label in (e.lower() for e in info.positive):
        return Valence.POSITIVE
    raise UnmappedEmotionError(corpus_id, emotion)


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    speaker_id: str
    corpus_id: str
    features: np.ndarray  # (n_segments, feature_dim), rows in segment order
    emotion: str
    valence: Valence

    def __post_init__(self):
        if not self.speaker_id:
            raise FeatureFileError(f"utterance {self.id!r} has an empty speaker id")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or len(feats) == 0:
            raise InputShapeError(f"utterance {self.id!r} needs a non-empty (segments, dim) array")
        if not np.all(np.isfinite(feats)):
            raise FeatureFileError(f"utterance {self.id!r} has non-finite feature values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "valence", Valence(self.valence))

    @property
    def key(self) -> str:
        """Globally unique id; utterance ids only need be unique within a corpus."""
        return f"{self.corpus_id}/{self.id}"

    @property
    def speaker_key(self) -> str:
        return f"{self.corpus_id}/{self.speaker_id}"

    @property
    def n_segments(self) -> int:
        return len(self.features)


@dataclass(frozen=True, eq=False)
class Corpus:
    id: str
    language: str
    utterances: tuple
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        for u in self.utterances:
            if u.features.shape[1] != self.feature_dim:
                raise InputShapeError(
                    f"utterance {u.key} has {u.features.shape[1]} features, corpus declares {self.feature_dim}"
                )

    def __len__(self) -> int:
        return len(self.utterances)

    def speakers(self) -> list[str]:
        return sorted({u.speaker_key for u in self.utterances})

    def subset(self, speakers: Iterable[str]) -> "Corpus":
        keep = set(speakers)
        return Corpus(self.id, self.language, tuple(u for u in self.utterances if u.speaker_key in keep),
                      self.feature_dim)

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """All segment rows stacked, and for each row the index of its utterance."""
        if not self.utterances:
            return np.zeros((0, self.feature_dim)), np.zeros(0, dtype=int)
        x = np.vstack([u.features for u in self.utterances])
        owner = np.repeat(np.arange(len(self.utterances)), [u.n_segments for u in self.utterances])
        return x, owner

    def n_segments(self) -> int:
        return sum(u.n_segments for u in self.utterances)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for u in self.utterances:
            h.update(f"{u.key}|{u.speaker_key}|{u.emotion}|{int(u.valence)}".encode())
            h.update(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
        return h.hexdigest()


def merge_corpora(corpora: Sequence[Corpus], corpus_id: str | None = None) -> Corpus:
    """Union of several corpora; a single corpus is returned unchanged."""
    if len(corpora) == 1 and corpus_id is None:
        return corpora[0]
    dims = {c.feature_dim for c in corpora}
    if len(dims) != 1:
        raise InputShapeError(f"cannot merge corpora with feature widths {sorted(dims)}")
    utts = tuple(u for c in corpora for u in c.utterances)
    name = corpus_id or "+".join(c.id for c in corpora)
    return Corpus(name, "+".join(c.language for c in corpora), utts, dims.pop())


# -- feature files --------------------------------------------------------------------

def feature_columns(dim: int) -> list[str]:
    return [f"f{i:03d}" for i in range(dim)]


def load_corpus(path, feature_dim: int | None = None) -> Corpus:
    """Read a feature CSV.  ``feature_dim``, if given, must match the header."""
    path = Path(path)
    if not path.is_file():
        raise FeatureFileError("no such feature file", path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureFileError("empty file", path, 1) from None
        header = [h.strip() for h in header]
        if tuple(header[:5]) != FIXED_COLUMNS:
            raise FeatureFileError(f"header must start with {','.join(FIXED_COLUMNS)}", path, 1)
        rest = header[5:]
        has_valence = bool(rest) and rest[-1] == "valence"
        feat_cols = rest[:-1] if has_valence else rest
        dim = len(feat_cols)
        if dim == 0 or feat_cols != feature_columns(dim):
            raise FeatureFileError("feature columns must be f000, f001, ... in order", path, 1)
        if feature_dim is not None and dim != feature_dim:
            raise DimensionDriftError(f"header declares {dim} features, expected {feature_dim}", path, 1)

        groups: dict[str, dict] = {}
        corpus_ids = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                got = len(row) - 5 - (1 if has_valence else 0)
                raise DimensionDriftError(f"row has {got} feature values, header declares {dim}", path, lineno)
            cid, spk, uid, seg, emo = (c.strip() for c in row[:5])
            corpus_ids.add(cid)
            if len(corpus_ids) > 1:
                raise FeatureFileError(f"file mixes corpora {sorted(corpus_ids)}", path, lineno)
            try:
                seg_idx = int(seg)
                values = [float(v) for v in row[5:5 + dim]]
            except ValueError as exc:
                raise FeatureFileError(f"unparseable value ({exc})", path, lineno) from None
            if seg_idx < 0:
                raise FeatureFileError("segment_index must be non-negative", path, lineno)
            try:
                valence = map_valence(cid, emo)
            except UnmappedEmotionError as exc:
                raise FeatureFileError(str(exc), path, lineno) from None
            if has_valence and row[-1].strip():
                try:
                    declared = Valence.parse(row[-1])
                except ValueError as exc:
                    raise FeatureFileError(str(exc), path, lineno) from None
                if declared is not valence:
                    raise ValenceMismatchError(
                        f"valence {row[-1].strip()!r} contradicts the mapping of {emo!r} "
                        f"for {cid} ({valence.name.lower()})", path, lineno)
            g = groups.setdefault(uid, {"speaker": spk, "emotion": emo, "rows": {}, "line": lineno})
            if g["speaker"] != spk or g["emotion"].lower() != emo.lower():
                raise FeatureFileError(f"utterance {uid!r} changes speaker or emotion between rows", path, lineno)
            if seg_idx in g["rows"]:
                raise DuplicateSegmentError(f"duplicate segment {seg_idx} for utterance {uid!r}", path, lineno)
            g["rows"][seg_idx] = values

    if not groups:
        raise FeatureFileError("no data rows", path)
    cid = corpus_ids.pop()
    utts = []
    for uid, g in groups.items():
        order = sorted(g["rows"])
        utts.append(Utterance(
            id=uid,
            speaker_id=g["speaker"],
            corpus_id=cid,
            features=np.array([g["rows"][k] for k in order]),
            emotion=g["emotion"],
            valence=map_valence(cid, g["emotion"]),
        ))
    info = corpus_info(cid)
    return Corpus(cid, info.language if info else "unknown", tuple(utts), dim)


def write_corpus(corpus: Corpus, path, with_valence: bool = True) -> None:
    """Write ``corpus`` in the feature-file format; floats round-trip exactly."""
    header = list(FIXED_COLUMNS) + feature_columns(corpus.feature_dim)
    if with_valence:
        header.append("valence")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for u in corpus.utterances:
            for k, row in enumerate(u.features):
                line = [u.corpus_id, u.speaker_id, u.id, k, u.emotion] + [repr(float(v)) for v in row]
                if with_valence:
                    line.append(u.valence.name.lower())
                w.writerow(line)


# -- standardisation ----------------------------------------------------------------------

STD_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: frozenset = field(default_factory=frozenset)  # utterance keys, when known

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != len(self.mean):
            raise InputShapeError(f"standardizer fitted on {len(self.mean)} features, got {x.shape[-1]}")
        return (x - self.mean) / self.std


def fit_standardizer(segments, fitted_on: Iterable[str] = ()) -> Standardizer:
    """Per-dimension z-scoring; the standard deviation is floored at 1e-8."""
    x = np.asarray(segments, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise InputShapeError("a standardizer needs at least two segments")
    return Standardizer(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR), frozenset(fitted_on))


def apply_standardizer(std: Standardizer, segment) -> np.ndarray:
    return std.apply(segment)
