import numpy as np
import pytest

from langadapt.corpus import map_valence
from langadapt.errors import SpecError
from langadapt.synthetic import SyntheticSpec, generate_synthetic_corpus, load_synthetic_specs, parse_synthetic_specs


def test_urdu_sized_corpus_matches_counts():
    c = generate_synthetic_corpus(SyntheticSpec("URDU", n_speakers=38, n_utterances=400, feature_dim=4),
                                  np.random.default_rng(0))
    assert len(c) == 400
    assert len(c.speakers()) == 38


def test_counts_and_segments_exact():
    spec = SyntheticSpec("EMOVO", n_speakers=3, utterances_per_speaker=7, segments_per_utterance=4, feature_dim=5)
    c = generate_synthetic_corpus(spec, np.random.default_rng(1))
    assert len(c) == 21 and c.n_segments() == 84
    assert c.segments()[0].shape == (84, 5)


def test_generation_is_seed_deterministic():
    spec = SyntheticSpec("SAVEE", feature_dim=6, speaker_effect=0.5, utterance_effect=0.2)
    a = generate_synthetic_corpus(spec, np.random.default_rng(7))
    b = generate_synthetic_corpus(spec, np.random.default_rng(7))
    c = generate_synthetic_corpus(spec, np.random.default_rng(8))
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_every_utterance_respects_the_mapping_and_speakers_see_both_classes():
    c = generate_synthetic_corpus(SyntheticSpec("EMO-DB", n_speakers=5, utterances_per_speaker=6, feature_dim=2),
                                  np.random.default_rng(0))
    for u in c.utterances:
        assert map_valence(u.corpus_id, u.emotion) is u.valence
    for s in c.speakers():
        assert {u.valence for u in c.utterances if u.speaker_key == s} == {0, 1}


def test_affine_shift_moves_the_mean():
    base = dict(n_speakers=4, utterances_per_speaker=50, feature_dim=3)
    a = generate_synthetic_corpus(SyntheticSpec("URDU", **base), np.random.default_rng(0))
    b = generate_synthetic_corpus(SyntheticSpec("URDU", shift_scale=2.0, shift_offset={"1-2": 3.0}, **base),
                                  np.random.default_rng(0))
    xa, xb = a.segments()[0], b.segments()[0]
    np.testing.assert_allclose(xb, 2.0 * xa + np.array([0.0, 3.0, 3.0]), atol=1e-12)


def test_class_means_are_placed():
    spec = SyntheticSpec("URDU", n_speakers=4, utterances_per_speaker=100, feature_dim=2,
                         negative_mean=[-3, 0], positive_mean=[3, 0], negative_cov=0.25, positive_cov=0.25)
    c = generate_synthetic_corpus(spec, np.random.default_rng(0))
    x, owner = c.segments()
    y = np.array([int(u.valence) for u in c.utterances])[owner]
    assert abs(x[y == 0, 0].mean() + 3) < 0.05 and abs(x[y == 1, 0].mean() - 3) < 0.05


@pytest.mark.parametrize("kwargs", [
    {"n_speakers": 0},
    {"feature_dim": 0},
    {"segments_per_utterance": 0},
    {"utterances_per_speaker": 0},
    {"n_utterances": 3, "n_speakers": 5},
    {"n_utterances": 10, "utterances_per_speaker": 2},
    {"positive_fraction": 1.0},
    {"speaker_effect": -1.0},
    {"negative_cov": [[1.0, 2.0], [2.0, 1.0]], "feature_dim": 2},
    {"negative_cov": [[1.0, 0.5], [0.0, 1.0]], "feature_dim": 2},
    {"positive_mean": {"0-9": 1.0}, "feature_dim": 4},
])
def test_invalid_specs(kwargs):
    with pytest.raises(SpecError):
        generate_synthetic_corpus(SyntheticSpec("URDU", **kwargs), np.random.default_rng(0))


def test_unknown_corpus_id_rejected():
    with pytest.raises(SpecError, match="valence mapping"):
        generate_synthetic_corpus(SyntheticSpec("IEMOCAP"), np.random.default_rng(0))


SPEC = """\
defaults:
  feature_dim: 8
  n_speakers: 3
  utterances_per_speaker: 4
  negative_mean: {0-3: -1.0}
  positive_mean: {0-3: 1.0}
corpora:
  - corpus_id: EMO-DB
  - corpus_id: URDU
    shift_offset: {4-7: 2.0}
    n_speakers: 5
"""


def test_yaml_defaults_merge():
    specs = parse_synthetic_specs(SPEC)
    assert [s.corpus_id for s in specs] == ["EMO-DB", "URDU"]
    assert specs[0].n_speakers == 3 and specs[1].n_speakers == 5
    assert specs[1].feature_dim == 8


@pytest.mark.parametrize("bad,line", [
    (SPEC.replace("    n_speakers: 5", "    n_speakerz: 5"), 11),
    (SPEC.replace("{4-7: 2.0}", "{4-9: 2.0}"), 10),
    (SPEC.replace("  n_speakers: 3", "  n_speakers: -3"), 3),
    (SPEC + "  - corpus_id: URDU\n", 12),
    ("corpora:\n  - corpus_id: EMO-DB\n   bad: [\n", 3),
])
def test_yaml_errors_carry_line(bad, line):
    with pytest.raises(SpecError) as info:
        parse_synthetic_specs(bad, "spec.yaml")
    assert info.value.line == line
    assert f"spec.yaml:{line}" in str(info.value)


def test_yaml_without_corpora():
    with pytest.raises(SpecError, match="corpora"):
        parse_synthetic_specs("defaults: {}\n")


def test_missing_spec_file(tmp_path):
    with pytest.raises(SpecError, match="no such spec file"):
        load_synthetic_specs(tmp_path / "missing.yaml")
