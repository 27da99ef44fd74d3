"""Synthetic multi-corpus generator for desk-scale experiments.

Each segment is drawn as::

    x = scale * (class_mean[valence] + speaker_offset + utterance_offset + noise) + offset

with ``noise ~ N(0, class_cov[valence])``.  ``scale`` and ``offset`` form
the per-corpus domain shift.  Emotions are drawn uniformly from the
corpus's valence table entry so every utterance respects the mapping.

Spec files are YAML::

    defaults:            # merged into every corpus entry
      feature_dim: 88
      n_speakers: 10
      utterances_per_speaker: 20
      segments_per_utterance: 5
      negative_mean: {0-9: -0.5}
      positive_mean: {0-9: 0.5}
    corpora:
      - corpus_id: EMO-DB
      - corpus_id: URDU
        shift_offset: {0-9: 2.0}

Vectors may be a scalar (broadcast), a full list, or a mapping from an
index or inclusive ``a-b`` range to a value (unlisted entries default).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from .corpus import Corpus, Utterance, Valence, corpus_info
from .errors import SpecError

_RANGE = re.compile(r"^\s*(\d+)\s*(?:-\s*(\d+))?\s*$")


@dataclass
class SyntheticSpec:
    corpus_id: str
    n_speakers: int = 10
    utterances_per_speaker: int | None = None
    n_utterances: int | None = None
    segments_per_utterance: int | tuple = 5
    feature_dim: int = 88
    negative_mean: object = 0.0
    positive_mean: object = 0.0
    negative_cov: object = 1.0
    positive_cov: object = 1.0
    positive_fraction: float = 0.5
    speaker_effect: float = 0.0
    utterance_effect: float = 0.0
    shift_scale: object = 1.0
    shift_offset: object = 0.0
    language: str | None = None

    def utterance_counts(self) -> list[int]:
        """Utterances per speaker; a total is spread as evenly as possible."""
        if self.n_utterances is not None:
            base, extra = divmod(self.n_utterances, self.n_speakers)
            return [base + (1 if s < extra else 0) for s in range(self.n_speakers)]
        per = self.utterances_per_speaker if self.utterances_per_speaker is not None else 20
        return [per] * self.n_speakers


def _vector(value, dim: int, default: float, name: str) -> np.ndarray:
    if value is None:
        return np.full(dim, default)
    if isinstance(value, (int, float)):
        return np.full(dim, float(value))
    if isinstance(value, dict):
        out = np.full(dim, default)
        for key, v in value.items():
            m = _RANGE.match(str(key))
            if not m:
                raise SpecError(f"{name}: bad index or range {key!r}")
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) is not None else lo
            if hi < lo or hi >= dim:
                raise SpecError(f"{name}: range {key!r} outside 0..{dim - 1}")
            out[lo:hi + 1] = float(v)
        return out
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (dim,):
        raise SpecError(f"{name}: expected {dim} values, got shape {arr.shape}")
    return arr


def _covariance(value, dim: int, name: str) -> np.ndarray:
    """Cholesky factor of a scalar / diagonal / full covariance."""
    if isinstance(value, (int, float)):
        cov = np.eye(dim) * float(value)
    else:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape == (dim,):
            cov = np.diag(arr)
        elif arr.shape == (dim, dim):
            cov = arr
        else:
            raise SpecError(f"{name}: covariance must be a scalar, {dim} variances or a {dim}x{dim} matrix")
    if not np.allclose(cov, cov.T):
        raise SpecError(f"{name}: covariance is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise SpecError(f"{name}: covariance is not positive definite") from None


def validate(spec: SyntheticSpec) -> None:
    info = corpus_info(spec.corpus_id)
    if info is None:
        raise SpecError(f"corpus_id: {spec.corpus_id!r} has no valence mapping; use one of EMO-DB, SAVEE, EMOVO, URDU")
    if spec.n_speakers < 1:
        raise SpecError(f"n_speakers: must be positive, got {spec.n_speakers}")
    if spec.feature_dim < 1:
        raise SpecError(f"feature_dim: must be positive, got {spec.feature_dim}")
    if spec.n_utterances is not None and spec.utterances_per_speaker is not None:
        raise SpecError("n_utterances: give either n_utterances or utterances_per_speaker, not both")
    if spec.n_utterances is not None and spec.n_utterances < spec.n_speakers:
        raise SpecError("n_utterances: must be at least n_speakers")
    if spec.utterances_per_speaker is not None and spec.utterances_per_speaker < 1:
        raise SpecError("utterances_per_speaker: must be positive")
    seg = spec.segments_per_utterance
    lo, hi = (seg, seg) if isinstance(seg, int) else tuple(seg)
    if lo < 1 or hi < lo:
        raise SpecError(f"segments_per_utterance: must be positive, got {seg!r}")
    if not 0.0 < spec.positive_fraction < 1.0:
        raise SpecError("positive_fraction: must lie strictly between 0 and 1")
    for name in ("speaker_effect", "utterance_effect"):
        if getattr(spec, name) < 0:
            raise SpecError(f"{name}: must be non-negative")


def generate_synthetic_corpus(spec: SyntheticSpec, rng: np.random.Generator) -> Corpus:
    validate(spec)
    d = spec.feature_dim
    info = corpus_info(spec.corpus_id)
    means = {
        Valence.NEGATIVE: _vector(spec.negative_mean, d, 0.0, "negative_mean"),
        Valence.POSITIVE: _vector(spec.positive_mean, d, 0.0, "positive_mean"),
    }
    chol = {
        Valence.NEGATIVE: _covariance(spec.negative_cov, d, "negative_cov"),
        Valence.POSITIVE: _covariance(spec.positive_cov, d, "positive_cov"),
    }
    emotions = {Valence.NEGATIVE: info.negative, Valence.POSITIVE: info.positive}
    scale = _vector(spec.shift_scale, d, 1.0, "shift_scale")
    offset = _vector(spec.shift_offset, d, 0.0, "shift_offset")
    seg = spec.segments_per_utterance
    seg_lo, seg_hi = (seg, seg) if isinstance(seg, int) else tuple(seg)

    utts = []
    for s, count in enumerate(spec.utterance_counts()):
        speaker = f"spk{s + 1:02d}"
        spk_offset = rng.normal(0.0, spec.speaker_effect, d) if spec.speaker_effect else np.zeros(d)
        n_pos = int(round(count * spec.positive_fraction))
        if count >= 2:
            n_pos = min(max(n_pos, 1), count - 1)  # both classes for every speaker
        labels = np.array([Valence.POSITIVE] * n_pos + [Valence.NEGATIVE] * (count - n_pos))
        labels = labels[rng.permutation(count)]
        for j, lab in enumerate(labels):
            valence = Valence(int(lab))
            n_seg = int(rng.integers(seg_lo, seg_hi + 1))
            centre = means[valence] + spk_offset
            if spec.utterance_effect:
                centre = centre + rng.normal(0.0, spec.utterance_effect, d)
            noise = rng.standard_normal((n_seg, d)) @ chol[valence].T
            x = scale * (centre + noise) + offset
            emotion = emotions[valence][int(rng.integers(len(emotions[valence])))]
            utts.append(Utterance(f"{speaker}_u{j + 1:03d}", speaker, info.name, x, emotion, valence))
    return Corpus(info.name, spec.language or info.language, tuple(utts), d)


# -- spec files ------------------------------------------------------------------------

_SPEC_FIELDS = {f.name for f in fields(SyntheticSpec)}


def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _line_map(v, path + (k.value,), out)
            out.setdefault(path + (k.value, "__key__"), k.start_mark.line + 1)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


def parse_synthetic_specs(text: str, source=None) -> list[SyntheticSpec]:
    """Parse a multi-corpus spec document; errors carry the offending line."""
    try:
        data = yaml.safe_load(text)
        lines = _line_map(yaml.compose(text)) if text.strip() else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SpecError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source,
                        mark.line + 1 if mark else None) from None
    if not isinstance(data, dict) or not isinstance(data.get("corpora"), list) or not data["corpora"]:
        raise SpecError("spec needs a non-empty 'corpora' list", source, 1)
    defaults = data.get("defaults") or {}
    if not isinstance(defaults, dict):
        raise SpecError("'defaults' must be a mapping", source, lines.get(("defaults",)))
    for key in defaults:
        if key not in _SPEC_FIELDS:
            raise SpecError(f"unknown field {key!r}", source, lines.get(("defaults", key, "__key__")))

    specs = []
    for i, entry in enumerate(data["corpora"]):
        where = lines.get(("corpora", i))
        if not isinstance(entry, dict):
            raise SpecError("each corpus entry must be a mapping", source, where)
        for key in entry:
            if key not in _SPEC_FIELDS:
                raise SpecError(f"unknown field {key!r}", source, lines.get(("corpora", i, key, "__key__"), where))
        merged = {**defaults, **entry}
        if "corpus_id" not in merged:
            raise SpecError("corpus entry lacks corpus_id", source, where)
        if isinstance(merged.get("segments_per_utterance"), list):
            merged["segments_per_utterance"] = tuple(merged["segments_per_utterance"])
        try:
            spec = SyntheticSpec(**merged)
            validate(spec)
            # surface vector/covariance errors now rather than at generation time
            d = spec.feature_dim
            for name in ("negative_mean", "positive_mean", "shift_scale", "shift_offset"):
                _vector(getattr(spec, name), d, 0.0, name)
            for name in ("negative_cov", "positive_cov"):
                _covariance(getattr(spec, name), d, name)
        except SpecError as exc:
            field_name = next((f for f in _SPEC_FIELDS if str(exc).startswith(f + ":")), None)
            line = lines.get(("corpora", i, field_name)) if field_name else None
            if line is None and field_name:
                line = lines.get(("defaults", field_name))
            raise SpecError(str(exc), source, line or where) from None
        except (TypeError, ValueError) as exc:
            raise SpecError(f"bad corpus entry: {exc}", source, where) from None
        specs.append(spec)
    seen = set()
    for i, s in enumerate(specs):
        key = corpus_info(s.corpus_id).name
        if key in seen:
            raise SpecError(f"duplicate corpus id {s.corpus_id!r}", source, lines.get(("corpora", i)))
        seen.add(key)
    return specs


def load_synthetic_specs(path) -> list[SyntheticSpec]:
    path = Path(path)
    if not path.is_file():
        raise SpecError("no such spec file", path)
    return parse_synthetic_specs(path.read_text(encoding="utf-8"), path)
