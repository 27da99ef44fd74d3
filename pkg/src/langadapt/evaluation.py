"""Speaker-independent evaluation: folds, UAR, posterior averaging, experiments.

Three experiment designs share one pipeline:

* ``run_baseline``      train and test within one corpus, speaker-disjoint folds
* ``run_cross_lingual`` train on a labelled source corpus, test on an unlabelled target
* ``run_multilingual``  pool every corpus except one, test on the held-out one

Labels are only ever read through a :class:`LabelStore`.  Test-fold and
target-corpus labels are sealed until scoring; a read on a training path
raises :class:`~langadapt.errors.LeakageError` and every read is logged.
"""

from __future__ import annotations

import hashlib
import logging
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .adversarial import AdaptConfig, adapt_source_encoder
from .autoencoder import SOURCE, TARGET, TrainConfig, build_autoencoder, encode, train_autoencoder
from .corpus import Corpus, Valence, fit_standardizer, merge_corpora
from .errors import DataError, DegenerateDataError, EmptyBatchError, FoldError, LangAdaptError, LeakageError
from .nn import RmsPropState
from .svm import SvmTrainConfig, decision_function, platt_calibrate, predict_proba, train_smo

log = logging.getLogger(__name__)


class FeatureCondition(str, Enum):
    RAW = "raw"
    LATENT = "latent"
    FUSED = "fused"


ALL_CONDITIONS = (FeatureCondition.RAW, FeatureCondition.LATENT, FeatureCondition.FUSED)


def parse_conditions(value) -> list[FeatureCondition]:
    if isinstance(value, FeatureCondition):
        return [value]
    if isinstance(value, str):
        if value == "all":
            return list(ALL_CONDITIONS)
        return [FeatureCondition(value)]
    out = [FeatureCondition(v) for v in value]
    return [c for c in ALL_CONDITIONS if c in out]


# -- seeds ---------------------------------------------------------------------------

def derive_seed(seed: int, *names) -> int:
    """Stable per-component seed; the same names always give the same seed."""
    key = [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def derive_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


# -- metrics --------------------------------------------------------------------------

def confusion_counts(true_labels, predicted_labels, labels=(0, 1)) -> np.ndarray:
    """Rows are true classes, columns predictions, both in ``labels`` order."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    out = np.zeros((len(labels), len(labels)), dtype=int)
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            out[i, j] = int(np.sum((t == a) & (p == b)))
    return out


def per_class_recall(true_labels, predicted_labels, labels=None) -> dict:
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if len(t) != len(p):
        raise DataError(f"{len(t)} true labels but {len(p)} predictions")
    classes = list(labels) if labels is not None else sorted(set(t.tolist()))
    out = {}
    for c in classes:
        mask = t == c
        if not np.any(mask):
            raise DataError(f"class {c!r} has no instances in the true labels")
        out[c] = float(np.mean(p[mask] == c))
    return out


def uar(true_labels, predicted_labels, labels=None) -> float:
    """Unweighted average recall: the plain mean of per-class recalls.

    With ``labels`` given, every listed class must occur in ``true_labels``;
    otherwise the classes present in ``true_labels`` are used.
    """
    rec = per_class_recall(true_labels, predicted_labels, labels)
    if not rec:
        raise DataError("UAR of an empty label set")
    return float(np.mean(list(rec.values())))


def aggregate_utterance(segment_posteriors) -> tuple[float, Valence]:
    """Mean of segment posteriors; positive only if strictly above 0.5."""
    p = np.asarray(segment_posteriors, dtype=np.float64).ravel()
    if p.size == 0:
        raise EmptyBatchError("cannot aggregate an utterance with no segments")
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise DataError("segment posteriors must lie in [0, 1]")
    # exact rational mean, rounded once: duplicating every segment leaves it bit-identical
    post = float(sum(map(Fraction, p.tolist())) / p.size)
    return post, (Valence.POSITIVE if post > 0.5 else Valence.NEGATIVE)


# -- folds ----------------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list  # (train speakers, test speakers) frozenset pairs
    scheme: str

    def __post_init__(self):
        for k, (train, test) in enumerate(self.folds):
            check_speaker_disjoint(train, test, k)
        if self.scheme == "loso":
            tests = [t for _, t in self.folds]
            if any(len(t) != 1 for t in tests) or len(set().union(*tests)) != len(tests):
                raise DataError("leave-one-speaker-out folds must each test one distinct speaker")

    def __len__(self) -> int:
        return len(self.folds)


def check_speaker_disjoint(train_speakers, test_speakers, fold: int | None = None) -> None:
    overlap = set(train_speakers) & set(test_speakers)
    if overlap:
        where = f"fold {fold}: " if fold is not None else ""
        raise LeakageError(f"{where}speakers in both train and test: {sorted(overlap)}")


def leave_one_speaker_out(speakers: Iterable[str]) -> FoldPlan:
    spk = sorted(set(speakers))
    if len(spk) < 2:
        raise DegenerateDataError("leave-one-speaker-out needs at least two speakers")
    return FoldPlan([(frozenset(spk) - {s}, frozenset({s})) for s in spk], "loso")


def grouped_folds(
    speakers: Iterable[str],
    n_folds: int,
    rng: np.random.Generator,
    test_size: int | None = None,
) -> FoldPlan:
    """Speaker-grouped folds.

    Without ``test_size`` this is a k-way partition of the speakers.  With
    it, each fold tests ``test_size`` speakers drawn from a shuffled cycle,
    so test sets stay disjoint across folds until the speakers run out
    (e.g. 38 speakers, 5 folds of 30 train / 8 test).
    """
    spk = sorted(set(speakers))
    if n_folds < 1 or len(spk) < 2:
        raise DegenerateDataError("grouped folds need n_folds >= 1 and at least two speakers")
    if test_size is None:
        if n_folds > len(spk):
            raise DegenerateDataError(f"cannot split {len(spk)} speakers into {n_folds} folds")
        order = [spk[i] for i in rng.permutation(len(spk))]
        parts = np.array_split(np.arange(len(spk)), n_folds)
        tests = [frozenset(order[i] for i in part) for part in parts]
    else:
        if not 1 <= test_size < len(spk):
            raise DegenerateDataError(f"test_size must be in 1..{len(spk) - 1}")
        stream: list[str] = []
        tests = []
        for _ in range(n_folds):
            chosen: list[str] = []
            while len(chosen) < test_size:
                if not stream:
                    stream = [spk[i] for i in rng.permutation(len(spk))]
                s = stream.pop(0)
                if s not in chosen:
                    chosen.append(s)
            tests.append(frozenset(chosen))
    all_spk = frozenset(spk)
    scheme = f"grouped-{n_folds}" + (f"x{test_size}" if test_size else "")
    return FoldPlan([(all_spk - t, t) for t in tests], scheme)


# -- label access -------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelRead:
    purpose: str
    corpora: tuple
    count: int
    sealed_count: int  # how many of the keys were sealed at the time of the read


class LabelStore:
    """Valence labels behind an audit log.

    Sealed keys may only be read with ``purpose="scoring"`` after
    :meth:`open_for_scoring`; any other read of a sealed key raises
    :class:`LeakageError`.
    """

    def __init__(self, corpora: Iterable[Corpus]):
        self._labels: dict[str, Valence] = {}
        self._corpus: dict[str, str] = {}
        for c in corpora:
            for u in c.utterances:
                self._labels[u.key] = u.valence
                self._corpus[u.key] = u.corpus_id
        self._sealed: set[str] = set()
        self._scoring: set[str] = set()
        self.log: list[LabelRead] = []

    def add(self, corpus: Corpus) -> None:
        for u in corpus.utterances:
            self._labels[u.key] = u.valence
            self._corpus[u.key] = u.corpus_id

    def seal(self, keys: Iterable[str]) -> None:
        keys = set(keys)
        self._sealed |= keys
        self._scoring -= keys

    def open_for_scoring(self, keys: Iterable[str]) -> None:
        self._scoring |= set(keys) & self._sealed

    def release(self, keys: Iterable[str]) -> None:
        """Unseal scored keys, e.g. a finished fold whose speakers train later folds."""
        keys = set(keys)
        self._sealed -= keys
        self._scoring -= keys

    def read(self, keys: Sequence[str], purpose: str) -> np.ndarray:
        sealed = [k for k in keys if k in self._sealed]
        if sealed:
            if purpose != "scoring":
                raise LeakageError(f"{len(sealed)} sealed labels requested for {purpose!r} (e.g. {sealed[0]})")
            closed = [k for k in sealed if k not in self._scoring]
            if closed:
                raise LeakageError(f"{len(closed)} sealed labels read before scoring was opened (e.g. {closed[0]})")
        corpora = tuple(sorted({self._corpus[k] for k in keys}))
        self.log.append(LabelRead(purpose, corpora, len(keys), len(sealed)))
        return np.array([int(self._labels[k]) for k in keys], dtype=int)

    def reads_of(self, corpus_id: str) -> list[LabelRead]:
        return [r for r in self.log if corpus_id in r.corpora]


# -- configuration -------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    latent_dim: int = 512
    hidden_dim: int = 256
    dropout_rate: float = 0.5
    autoencoder: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    svm: SvmTrainConfig = field(default_factory=SvmTrainConfig)
    c_grid: tuple = (1.0,)
    gamma_grid: tuple = ("auto",)
    folds: int | None = None  # None: leave one speaker out
    test_speakers: int | None = None  # with folds: speakers per test set (30/8-style resamples)
    transductive: bool = True  # target autoencoder sees every target utterance
    shared_init: bool = True  # both autoencoders start from the same weights

    def __post_init__(self):
        if isinstance(self.autoencoder, dict):
            self.autoencoder = TrainConfig(**self.autoencoder)
        if isinstance(self.adapt, dict):
            self.adapt = AdaptConfig(**self.adapt)
        if isinstance(self.svm, dict):
            self.svm = SvmTrainConfig(**self.svm)
        self.c_grid = tuple(float(c) for c in self.c_grid)
        self.gamma_grid = tuple(g if g == "auto" else float(g) for g in self.gamma_grid)
        if not self.c_grid or not self.gamma_grid:
            raise ValueError("c_grid and gamma_grid must be non-empty")

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, tuple):
                return [clean(x) for x in v]
            if isinstance(v, list):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items() if k != "cache"}
            return v
        return clean(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _nested_update(cfg, overrides: dict):
    for k, v in overrides.items():
        cur = getattr(cfg, k)
        if is_dataclass(cur) and isinstance(v, dict):
            _nested_update(cur, v)
        else:
            setattr(cfg, k, v)


# -- reports --------------------------------------------------------------------------------

@dataclass
class EvalReport:
    experiment: str
    source: str
    target: str
    condition: FeatureCondition
    fold_uars: list
    confusion: list  # pooled over folds; rows true (neg, pos), cols predicted
    n_test_utterances: int
    fold_scheme: str = "single"
    diagnostics: dict = field(default_factory=dict)

    @property
    def mean_uar(self) -> float:
        return float(np.mean(self.fold_uars))

    @property
    def per_class_recall(self) -> dict:
        c = np.asarray(self.confusion)
        out = {}
        for i, v in enumerate(Valence):
            total = c[i].sum()
            out[v.name.lower()] = float(c[i, i] / total) if total else float("nan")
        return out


# -- classifier -------------------------------------------------------------------------------

@dataclass
class _Table:
    """Segment rows of a corpus with their utterance/speaker bookkeeping."""

    corpus: Corpus
    x: np.ndarray
    owner: np.ndarray  # utterance index per segment row

    @classmethod
    def of(cls, corpus: Corpus) -> "_Table":
        x, owner = corpus.segments()
        return cls(corpus, x, owner)

    @property
    def keys(self) -> list[str]:
        return [u.key for u in self.corpus.utterances]

    @property
    def segment_speakers(self) -> np.ndarray:
        spk = np.array([u.speaker_key for u in self.corpus.utterances])
        return spk[self.owner]


def _validation_split(speakers: np.ndarray, owner: np.ndarray, y: np.ndarray, rng) -> np.ndarray:
    """Boolean mask of segments held out for model selection and calibration.

    One training speaker with both classes is held out; with a single
    training speaker a fifth of its utterances is held out instead.
    """
    uniq = sorted(set(speakers.tolist()))
    candidates = [s for s in uniq if len(set(y[speakers == s].tolist())) == 2]
    if len(uniq) >= 2 and candidates:
        rest_ok = []
        for s in candidates:
            rest = y[speakers != s]
            if len(set(rest.tolist())) == 2:
                rest_ok.append(s)
        if rest_ok:
            chosen = rest_ok[int(rng.integers(len(rest_ok)))]
            return speakers == chosen
    utts = np.unique(owner)
    held = rng.permutation(utts)[: max(1, len(utts) // 5)]
    mask = np.isin(owner, held)
    if len(set(y[mask].tolist())) < 2 or len(set(y[~mask].tolist())) < 2:
        raise DegenerateDataError("cannot form a validation split containing both classes")
    return mask


def fit_posterior_svm(x, y01, speakers, owner, cfg: ExperimentConfig, rng) -> tuple:
    """Select (C, gamma) on a held-out speaker, then Platt-calibrate there.

    Returns the calibrated model and the selection record.
    """
    y = np.where(np.asarray(y01) == 1, 1.0, -1.0)
    if len(set(y.tolist())) < 2:
        raise DegenerateDataError("training data contains a single class")
    val = _validation_split(np.asarray(speakers), np.asarray(owner), y, rng)
    best = None
    for c in cfg.c_grid:
        for g in cfg.gamma_grid:
            scfg = SvmTrainConfig(c_reg=c, gamma=g, kkt_tolerance=cfg.svm.kkt_tolerance,
                                  max_passes=cfg.svm.max_passes)
            model = train_smo(x[~val], y[~val], scfg)
            pred = np.where(decision_function(model, x[val]) > 0, 1.0, -1.0)
            score = uar(y[val], pred)
            if best is None or score > best[0]:
                best = (score, c, g, model)
    score, c, g, model = best
    model = platt_calibrate(model, x[val], y[val])
    return model, {"c_reg": c, "gamma": g, "validation_uar": score}


def _utterance_predictions(model, x, owner, n_utts) -> tuple[np.ndarray, np.ndarray]:
    post = predict_proba(model, x)
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(n_utts + 1))
    means, pred = np.empty(n_utts), np.empty(n_utts, dtype=int)
    for i in range(n_utts):
        means[i], v = aggregate_utterance(post[order[bounds[i]:bounds[i + 1]]])
        pred[i] = int(v)
    return means, pred


# -- pipeline pieces ----------------------------------------------------------------------------

_AE_CACHE: "OrderedDict[tuple, object]" = OrderedDict()
_AE_CACHE_SIZE = 16


def clear_autoencoder_cache() -> None:
    _AE_CACHE.clear()


def _cached_autoencoder(init, x, train_cfg: TrainConfig, seed: int, domain: str):
    """Train ``init`` on ``x``; identical requests reuse the earlier result.

    Training is a pure function of (initial weights, data, config, seed), so
    pairwise and multilingual runs that share a corpus share its autoencoder.
    """
    key = (init.encoder.fingerprint(), init.decoder.fingerprint(),
           hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest(), x.shape,
           repr(asdict(train_cfg)), seed)
    hit = _AE_CACHE.get(key)
    if hit is None:
        hit = train_autoencoder(init, x, train_cfg, np.random.default_rng(seed))
        _AE_CACHE[key] = hit
        while len(_AE_CACHE) > _AE_CACHE_SIZE:
            _AE_CACHE.popitem(last=False)
    else:
        _AE_CACHE.move_to_end(key)
    ae = hit.autoencoder.copy()
    ae.domain = domain
    return type(hit)(ae, hit.initial_loss, list(hit.history))


def train_autoencoder_pair(xs, xt, cfg: ExperimentConfig):
    """Train the source and target autoencoders; returns two ``TrainResult``."""
    d = xs.shape[1]
    init = build_autoencoder(derive_rng(cfg.seed, "ae-init"), d, cfg.latent_dim, cfg.hidden_dim,
                             cfg.dropout_rate, SOURCE)
    if cfg.shared_init:
        t_init = init.copy()
        t_init.domain = TARGET
    else:
        t_init = build_autoencoder(derive_rng(cfg.seed, "ae-init-target"), d, cfg.latent_dim,
                                   cfg.hidden_dim, cfg.dropout_rate, TARGET)
    train_seed = derive_seed(cfg.seed, "ae-train")
    ae_s = _cached_autoencoder(init, xs, cfg.autoencoder, train_seed, SOURCE)
    ae_t = _cached_autoencoder(t_init, xt, cfg.autoencoder, train_seed, TARGET)
    return ae_s, ae_t


def adapt_pair(source_ae, target_ae, xs, xt, cfg: ExperimentConfig):
    """Adversarial stage with the experiment's derived seed and fresh optimiser state."""
    adapt_cfg = AdaptConfig(**{**asdict(cfg.adapt), "seed": derive_seed(cfg.seed, "adapt")})
    adapt_cfg.optimizer = cfg.adapt.optimizer.fresh()
    if cfg.adapt.encoder_optimizer is not None:
        adapt_cfg.encoder_optimizer = cfg.adapt.encoder_optimizer.fresh()
    return adapt_source_encoder(source_ae, target_ae, xs, xt, adapt_cfg)


def _train_pair(xs, xt_adapt, cfg: ExperimentConfig):
    """Train both autoencoders and adapt the source encoder."""
    ae_s, ae_t = train_autoencoder_pair(xs, xt_adapt, cfg)
    adapted = adapt_pair(ae_s.autoencoder, ae_t.autoencoder, xs, xt_adapt, cfg)
    return ae_s, ae_t, adapted


def _latent_blocks(source_enc, target_enc, xs, xt):
    ls = encode(source_enc, xs).values
    lt = encode(target_enc, xt).values
    lstd = fit_standardizer(ls)
    return lstd.apply(ls), lstd.apply(lt)


def _features(condition, raw_s, raw_t, lat_s, lat_t):
    if condition is FeatureCondition.RAW:
        return raw_s, raw_t
    if condition is FeatureCondition.LATENT:
        return lat_s, lat_t
    return np.hstack([raw_s, lat_s]), np.hstack([raw_t, lat_t])


def _score(store: LabelStore, test: _Table, post_pred) -> tuple[float, np.ndarray]:
    keys = test.keys
    store.open_for_scoring(keys)
    truth = store.read(keys, "scoring")
    _, pred = post_pred
    return uar(truth, pred), confusion_counts(truth, pred)


# -- experiments ------------------------------------------------------------------------------

def fold_plan(corpus: Corpus, cfg: ExperimentConfig) -> FoldPlan:
    speakers = corpus.speakers()
    if cfg.folds is None:
        return leave_one_speaker_out(speakers)
    return grouped_folds(speakers, cfg.folds, derive_rng(cfg.seed, "folds", corpus.id), cfg.test_speakers)


def run_baseline(
    corpus: Corpus,
    cfg: ExperimentConfig,
    condition: FeatureCondition = FeatureCondition.RAW,
    store: LabelStore | None = None,
) -> EvalReport:
    """Within-corpus, speaker-independent evaluation."""
    condition = FeatureCondition(condition)
    store = store or LabelStore([corpus])
    plan = fold_plan(corpus, cfg)
    fold_uars, confusion, n_test, selections = [], np.zeros((2, 2), dtype=int), 0, []
    for k, (train_spk, test_spk) in enumerate(plan.folds):
        try:
            check_speaker_disjoint(train_spk, test_spk, k)
            train, test = _Table.of(corpus.subset(train_spk)), _Table.of(corpus.subset(test_spk))
            store.seal(test.keys)
            fold_seed = derive_seed(cfg.seed, "fold", k)
            std = fit_standardizer(train.x, fitted_on=train.keys)
            if std.fitted_on & set(test.keys):
                raise LeakageError(f"fold {k}: standardizer saw test utterances")
            raw_s, raw_t = std.apply(train.x), std.apply(test.x)
            lat_s = lat_t = None
            if condition is not FeatureCondition.RAW:
                fold_cfg = _with_seed(cfg, fold_seed)
                ae = train_autoencoder(
                    build_autoencoder(derive_rng(fold_seed, "ae-init"), raw_s.shape[1], cfg.latent_dim,
                                      cfg.hidden_dim, cfg.dropout_rate),
                    raw_s, fold_cfg.autoencoder, derive_rng(fold_seed, "ae-train", SOURCE)).autoencoder
                lat_s, lat_t = _latent_blocks(ae, ae, raw_s, raw_t)
            fs, ft = _features(condition, raw_s, raw_t, lat_s, lat_t)
            y = store.read(train.keys, "train")[train.owner]
            model, sel = fit_posterior_svm(fs, y, train.segment_speakers, train.owner, cfg,
                                           derive_rng(fold_seed, "svm"))
            selections.append(sel)
            pp = _utterance_predictions(model, ft, test.owner, len(test.corpus))
            u, conf = _score(store, test, pp)
            store.release(test.keys)
        except LangAdaptError as exc:
            raise FoldError(k, exc) from exc
        fold_uars.append(u)
        confusion += conf
        n_test += len(test.corpus)
    return EvalReport("baseline", corpus.id, corpus.id, condition, fold_uars, confusion.tolist(), n_test,
                      plan.scheme, {"disjoint_folds_checked": len(plan), "selections": selections})


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return ExperimentConfig.from_dict(d)


def run_cross_lingual(
    source: Corpus,
    target: Corpus,
    condition="all",
    cfg: ExperimentConfig | None = None,
    store: LabelStore | None = None,
    experiment: str = "cross-lingual",
) -> list[EvalReport]:
    """Train on ``source``; score on ``target`` whose labels stay sealed until scoring.

    Returns one report per requested condition (raw, latent, fused order).
    """
    cfg = cfg or ExperimentConfig()
    conditions = parse_conditions(condition)
    if source.feature_dim != target.feature_dim:
        raise DataError(f"source has {source.feature_dim} features, target {target.feature_dim}")
    src, tgt = _Table.of(source), _Table.of(target)
    if set(src.keys) & set(tgt.keys):
        raise LeakageError("source and target share utterances")
    check_speaker_disjoint(source.speakers(), target.speakers())
    store = store or LabelStore([source, target])
    store.seal(tgt.keys)

    # the standardizer is fitted on source segments only
    std = fit_standardizer(src.x, fitted_on=src.keys)
    raw_s, raw_t = std.apply(src.x), std.apply(tgt.x)

    score_mask = np.ones(len(target), dtype=bool)
    adapt_rows = np.ones(len(tgt.x), dtype=bool)
    if not cfg.transductive:
        # first half of the shuffled target speakers feeds adaptation, the rest is scored
        spk = target.speakers()
        order = [spk[i] for i in derive_rng(cfg.seed, "inductive-split").permutation(len(spk))]
        adapt_spk = set(order[: max(1, len(order) // 2)])
        if len(adapt_spk) == len(spk):
            raise DegenerateDataError("inductive split needs at least two target speakers")
        in_adapt = np.array([u.speaker_key in adapt_spk for u in target.utterances])
        score_mask = ~in_adapt
        adapt_rows = in_adapt[tgt.owner]

    diagnostics: dict = {"speaker_disjoint": True}
    lat_s = lat_t = None
    if any(c is not FeatureCondition.RAW for c in conditions):
        ae_s, ae_t, adapted = _train_pair(raw_s, raw_t[adapt_rows], cfg)
        lat_s, lat_t = _latent_blocks(adapted.source_ae, ae_t.autoencoder, raw_s, raw_t)
        h = adapted.history
        diagnostics.update({
            "ae_source_loss": [ae_s.initial_loss, ae_s.history[-1] if ae_s.history else ae_s.initial_loss],
            "ae_target_loss": [ae_t.initial_loss, ae_t.history[-1] if ae_t.history else ae_t.initial_loss],
            "pre_probe_accuracy": h.pre_probe_accuracy,
            "final_probe_accuracy": h.probe_accuracy[-1] if h.probe_accuracy else h.pre_probe_accuracy,
            "adapt_warnings": list(h.warnings),
        })
        diagnostics["adaptation"] = h

    y = store.read(src.keys, "train")[src.owner]
    predictions = {}
    for cond in conditions:
        fs, ft = _features(cond, raw_s, raw_t, lat_s, lat_t)
        model, sel = fit_posterior_svm(fs, y, src.segment_speakers, src.owner, cfg, derive_rng(cfg.seed, "svm", cond.value))
        predictions[cond] = (_utterance_predictions(model, ft, tgt.owner, len(target)), sel)

    scored = _Table.of(Corpus(target.id, target.language,
                              tuple(u for u, m in zip(target.utterances, score_mask) if m), target.feature_dim))
    reports = []
    for cond in conditions:
        (post, pred), sel = predictions[cond]
        u, conf = _score(store, scored, (post[score_mask], pred[score_mask]))
        reports.append(EvalReport(experiment, source.id, target.id, cond, [u], conf.tolist(),
                                  int(score_mask.sum()), "single", {**diagnostics, "selection": sel}))
    return reports


def run_multilingual(
    corpora: Sequence[Corpus],
    held_out_id: str,
    condition="all",
    cfg: ExperimentConfig | None = None,
    store: LabelStore | None = None,
) -> list[EvalReport]:
    """One-language-out: every other corpus pooled as the labelled source."""
    if len(corpora) < 2:
        raise DataError("multilingual training needs at least two corpora")
    targets = [c for c in corpora if c.id == held_out_id]
    if len(targets) != 1:
        raise DataError(f"held-out corpus {held_out_id!r} not found exactly once among {[c.id for c in corpora]}")
    sources = [c for c in corpora if c.id != held_out_id]
    source = merge_corpora(sources)
    return run_cross_lingual(source, targets[0], condition, cfg, store,
                             experiment="multilingual" if len(sources) > 1 else "cross-lingual")


def standardized_pair(source: Corpus, target: Corpus):
    """Segment matrices of both corpora z-scored with statistics of the source."""
    if source.feature_dim != target.feature_dim:
        raise DataError(f"source has {source.feature_dim} features, target {target.feature_dim}")
    xs, xt = source.segments()[0], target.segments()[0]
    std = fit_standardizer(xs, fitted_on=[u.key for u in source.utterances])
    return std.apply(xs), std.apply(xt)


def adaptation_trace(source: Corpus, target: Corpus, cfg: ExperimentConfig | None = None):
    """Run only the autoencoder and adaptation stages; returns the adaptation history.

    Uses the same standardisation, seeds and weights as the latent condition
    of :func:`run_cross_lingual`, and reads no labels at all.
    """
    cfg = cfg or ExperimentConfig()
    xs, xt = standardized_pair(source, target)
    return _train_pair(xs, xt, cfg)[2].history
