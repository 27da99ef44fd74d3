"""Acceptance criteria, each at its stated tolerance and runtime limit.

A summary line per criterion is printed at the end of the pytest run.
"""

import time

import numpy as np
import pytest
from oracles import qp_decision, qp_dual_svm

from langadapt.adversarial import AdaptConfig
from langadapt.autoencoder import TrainConfig, build_autoencoder, train_autoencoder
from langadapt.cli import main
from langadapt.corpus import Valence, map_valence
from langadapt.evaluation import (
    ExperimentConfig,
    FeatureCondition,
    LabelStore,
    adapt_pair,
    aggregate_utterance,
    fold_plan,
    run_baseline,
    run_cross_lingual,
    run_multilingual,
    standardized_pair,
    train_autoencoder_pair,
    uar,
)
from langadapt.nn import Activation, RmsPropState, build_net, forward, grad_check, squared_error, weighted_sum
from langadapt.svm import SvmTrainConfig, decision_function, kkt_violation, train_smo
from langadapt.synthetic import SyntheticSpec, generate_synthetic_corpus

# two Gaussian valence classes, separated along the first ten coordinates
CLASSES = dict(negative_mean={"0-9": -0.5}, positive_mean={"0-9": 0.5})
MEAN_SHIFT = {"6-15": 2.0}

_ACTS = [Activation.RELU, Activation.SIGMOID, Activation.LINEAR]


def _free_of_relu_kinks(net, x, margin=1e-4):
    # central differences straddling a ReLU kink measure the kink, not the gradient
    _, tape = forward(net, x)
    return all(np.min(np.abs(z)) > margin for z, layer in zip(tape.pre, net.layers)
               if layer.activation is Activation.RELU)


def _draw(rng, dims, acts, batch=2):
    while True:
        net = build_net(dims, acts, rng, dropout_rate=0.0)
        x = rng.normal(size=(batch, dims[0]))
        if _free_of_relu_kinks(net, x):
            return net, x


# -- 1 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient correctness (grad_check < 1e-4, h = 1e-5, < 1 min)")
def test_criterion_1_gradients(record_property):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    errors, covered = [], set()
    for i in range(24):
        n_layers = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(1, 97, size=n_layers + 1)]
        acts = [_ACTS[(i + j) % 3] for j in range(n_layers)]
        covered.update(acts)
        net, x = _draw(rng, dims, acts)
        out, _ = forward(net, x)
        errors.append(grad_check(net, squared_error(rng.normal(size=out.shape)), x, h=1e-5))

    # the 88 -> 64 -> 32 encoder from the examples, then a discriminator on its codes
    for _ in range(4):
        while True:
            enc = build_net([88, 64, 32], [Activation.RELU, Activation.LINEAR], rng, dropout_rate=0.0)
            disc = build_net([32, 48, 24, 1], [Activation.RELU, Activation.RELU, Activation.SIGMOID], rng,
                             dropout_rate=0.0)
            x = rng.normal(size=(2, 88))
            codes, _ = forward(enc, x)
            if _free_of_relu_kinks(enc, x) and _free_of_relu_kinks(disc, codes):
                break
        errors.append(grad_check(enc, squared_error(rng.normal(size=(2, 32))), x, h=1e-5))
        errors.append(grad_check([enc, disc], weighted_sum([1.0]), x, h=1e-5))
    elapsed = time.perf_counter() - start

    record_property("detail", f"{len(errors)} checks, max rel err {max(errors):.2e}, {elapsed:.0f}s")
    assert covered == set(_ACTS)
    assert max(errors) < 1e-4
    assert elapsed < 60


# -- 2 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(2, "SMO vs exact dual QP within 1e-3, KKT audit at 1e-3 (< 1 min)")
def test_criterion_2_smo_matches_qp(record_property):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_gap = worst_kkt = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 11))
        d = int(rng.integers(1, 5))
        x = rng.normal(size=(n, d))
        y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        y[:2] = (1.0, -1.0)
        c = float(rng.uniform(0.1, 10.0))
        gamma = float(rng.uniform(0.1, 2.0))
        model = train_smo(x, y, SvmTrainConfig(c_reg=c, gamma=gamma, kkt_tolerance=1e-6))
        alpha, bias, _ = qp_dual_svm(x, y, c, gamma)
        probes = np.vstack([x, rng.normal(size=(10, d)) * 1.5])
        gap = np.max(np.abs(decision_function(model, probes) - qp_decision(x, y, alpha, bias, gamma, probes)))
        worst_gap = max(worst_gap, float(gap))
        worst_kkt = max(worst_kkt, kkt_violation(model, x, y))
    elapsed = time.perf_counter() - start

    record_property("detail", f"max |f_smo - f_qp| {worst_gap:.1e}, max KKT violation {worst_kkt:.1e}, "
                              f"{elapsed:.0f}s")
    assert worst_gap < 1e-3
    assert worst_kkt < 1e-3
    assert elapsed < 60


# -- 3 ---------------------------------------------------------------------------------------

VALENCE_TABLE_ROWS = {
    "EMO-DB": (["Anger", "Sadness", "Fear", "Disgust", "Boredom"], ["Neutral", "Happiness"]),
    "SAVEE": (["Anger", "Sadness", "Fear", "Disgust"], ["Neutral", "Happiness", "Surprise"]),
    "EMOVO": (["Anger", "Sadness", "Fear", "Disgust"], ["Neutral", "Joy", "Surprise"]),
    "URDU": (["Angry", "Sad"], ["Neutral", "Happy"]),
}


@pytest.mark.criterion(3, "UAR and aggregation examples exact; valence table verbatim")
def test_criterion_3_metric_units(record_property):
    assert uar([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert uar([1] * 5 + [0] * 5, [1, 1, 1, 1, 0] + [0, 0, 0, 1, 1]) == 0.7  # recalls 0.8 and 0.6
    truth = [1] * 9 + [0]
    assert uar(truth, [1] * 10) == 0.5
    assert np.mean(np.array(truth) == 1) == 0.9  # plain accuracy of the same predictor

    assert aggregate_utterance([0.9, 0.2, 0.7]) == (0.6, Valence.POSITIVE)
    assert aggregate_utterance([0.5]) == (0.5, Valence.NEGATIVE)
    for p in (0.0, 0.13, 0.5000001, 1.0):
        assert aggregate_utterance([p])[0] == p

    cells = 0
    for corpus_id, (negative, positive) in VALENCE_TABLE_ROWS.items():
        for emotion in negative:
            assert map_valence(corpus_id, emotion) is Valence.NEGATIVE
        for emotion in positive:
            assert map_valence(corpus_id, emotion) is Valence.POSITIVE
        cells += len(negative) + len(positive)
    record_property("detail", f"{cells} valence cells")


# -- 4 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(4, "autoencoder on rank-5 88-dim data: final loss < 0.2 x initial in 50 epochs (< 2 min)")
def test_criterion_4_autoencoder_converges(record_property):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    x = rng.normal(size=(1000, 5)) @ rng.normal(size=(5, 88)) / np.sqrt(5)
    assert np.linalg.matrix_rank(x) == 5
    ae = build_autoencoder(np.random.default_rng(1))
    result = train_autoencoder(ae, x, TrainConfig(epochs=50), np.random.default_rng(2))
    elapsed = time.perf_counter() - start

    ratio = result.history[-1] / result.initial_loss
    record_property("detail", f"loss {result.initial_loss:.3f} -> {result.history[-1]:.4f} "
                              f"(ratio {ratio:.4f}), {elapsed:.0f}s")
    assert len(result.history) == 50
    assert ratio < 0.2
    assert elapsed < 120


# -- 5 ---------------------------------------------------------------------------------------

def _synthetic_pair(seed, shift, n_speakers, utterances=20):
    common = dict(n_speakers=n_speakers, utterances_per_speaker=utterances, segments_per_utterance=5, **CLASSES)
    source = generate_synthetic_corpus(SyntheticSpec("EMO-DB", **common), np.random.default_rng(seed))
    target = generate_synthetic_corpus(SyntheticSpec("URDU", shift_offset=shift, **common),
                                       np.random.default_rng(seed + 100))
    return source, target


def _equilibrium(shift):
    source, target = _synthetic_pair(0, shift, n_speakers=50)
    xs, xt = standardized_pair(source, target)
    cfg = ExperimentConfig(seed=0, autoencoder=TrainConfig(epochs=6),
                           adapt=AdaptConfig(epochs=20, probe_size=150, encoder_optimizer=RmsPropState(2e-5)))
    ae_s, ae_t = train_autoencoder_pair(xs, xt, cfg)
    frozen = [ae_t.autoencoder.encoder.fingerprint(), ae_t.autoencoder.decoder.fingerprint(),
              ae_s.autoencoder.decoder.fingerprint()]
    adapted = adapt_pair(ae_s.autoencoder, ae_t.autoencoder, xs, xt, cfg)
    after = [ae_t.autoencoder.encoder.fingerprint(), ae_t.autoencoder.decoder.fingerprint(),
             adapted.source_ae.decoder.fingerprint()]
    assert after == frozen
    assert adapted.source_ae.encoder.fingerprint() != ae_s.autoencoder.encoder.fingerprint()
    h = adapted.history
    return h.pre_probe_accuracy, h.probe_accuracy[-1]


@pytest.mark.criterion(5, "adversarial equilibrium on identical and mean-shift pairs (< 5 min)")
def test_criterion_5_equilibrium(record_property):
    start = time.perf_counter()
    _, same_post = _equilibrium(0.0)
    shift_pre, shift_post = _equilibrium(MEAN_SHIFT)
    elapsed = time.perf_counter() - start

    record_property("detail", f"identical post {same_post:.3f}; mean-shift pre {shift_pre:.3f} "
                              f"post {shift_post:.3f}; {elapsed:.0f}s")
    assert 0.4 <= same_post <= 0.6
    assert shift_pre > 0.9
    assert 0.4 <= shift_post <= 0.65
    assert elapsed < 300


# -- 6 ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cross_run():
    source, target = _synthetic_pair(0, MEAN_SHIFT, n_speakers=10)
    cfg = ExperimentConfig(seed=0, autoencoder=TrainConfig(epochs=30),
                           adapt=AdaptConfig(epochs=60, probe_size=150, encoder_optimizer=RmsPropState(2e-5)))
    store = LabelStore([source, target])
    start = time.perf_counter()
    reports = run_cross_lingual(source, target, "all", cfg, store)
    elapsed = time.perf_counter() - start
    return dict(source=source, target=target, reports={r.condition: r for r in reports},
                store=store, elapsed=elapsed)


@pytest.mark.criterion(6, "mean-shift cross-lingual task: latent >= 0.85, raw <= 0.65, fused >= latent - 0.02 (< 10 min)")
def test_criterion_6_adaptation_benefit(cross_run, record_property):
    r = cross_run["reports"]
    raw, latent, fused = (r[c].mean_uar for c in FeatureCondition)
    record_property("detail", f"raw {raw:.3f}, latent {latent:.3f}, fused {fused:.3f}, {cross_run['elapsed']:.0f}s")
    assert raw <= 0.65
    assert latent >= 0.85
    assert fused >= latent - 0.02
    assert cross_run["elapsed"] < 600


# -- 7 ---------------------------------------------------------------------------------------

SHIFTS = {"EMO-DB": 0.0, "SAVEE": {"6-15": 2.0}, "EMOVO": {"3-12": -2.0}, "URDU": {"8-17": 2.5}}


@pytest.fixture(scope="module")
def multilingual_runs():
    seed = 0
    common = dict(n_speakers=8, utterances_per_speaker=15, segments_per_utterance=5, **CLASSES)
    corpora = [generate_synthetic_corpus(SyntheticSpec(cid, shift_offset=shift, **common),
                                         np.random.default_rng([seed, i]))
               for i, (cid, shift) in enumerate(SHIFTS.items())]
    cfg = ExperimentConfig(seed=seed, autoencoder=TrainConfig(epochs=30),
                           adapt=AdaptConfig(epochs=80, probe_size=150, encoder_optimizer=RmsPropState(2e-5)))
    start = time.perf_counter()
    runs = []
    for target in corpora:
        pairwise = []
        for source in corpora:
            if source is not target:
                store = LabelStore([source, target])
                report = run_cross_lingual(source, target, "latent", cfg, store)[0]
                pairwise.append(report.mean_uar)
                runs.append(dict(kind="pair", source=[source], target=target, report=report, store=store))
        store = LabelStore(corpora)
        multi = run_multilingual(corpora, target.id, "latent", cfg, store)[0]
        runs.append(dict(kind="multi", source=[c for c in corpora if c is not target], target=target,
                         report=multi, store=store, pairwise=pairwise))
    return dict(runs=runs, elapsed=time.perf_counter() - start)


@pytest.mark.criterion(7, "multilingual latent UAR >= mean pairwise latent UAR on >= 3 of 4 targets (< 15 min)")
def test_criterion_7_multilingual_ordering(multilingual_runs, record_property):
    wins, parts = 0, []
    for run in multilingual_runs["runs"]:
        if run["kind"] != "multi":
            continue
        multi, pair = run["report"].mean_uar, float(np.mean(run["pairwise"]))
        wins += multi >= pair
        parts.append(f"{run['target'].id} {multi:.3f} vs {pair:.3f}")
    record_property("detail", f"{wins}/4 targets: " + ", ".join(parts) + f"; {multilingual_runs['elapsed']:.0f}s")
    assert wins >= 3
    assert multilingual_runs["elapsed"] < 900


# -- 8 ---------------------------------------------------------------------------------------

def _assert_target_firewall(store, target):
    reads = store.reads_of(target.id)
    assert reads, "target labels were never scored"
    first_target = store.log.index(reads[0])
    assert all(target.id not in r.corpora for r in store.log[:first_target])
    # every target read happened at scoring time, against sealed keys opened for scoring
    assert all(r.purpose == "scoring" and r.corpora == (target.id,) and r.sealed_count == r.count for r in reads)
    return len(reads)


@pytest.mark.criterion(8, "speaker disjointness in every fold; zero target-label reads before scoring")
def test_criterion_8_leakage_audits(cross_run, multilingual_runs, record_property):
    experiments = [dict(source=[cross_run["source"]], target=cross_run["target"], store=cross_run["store"],
                        report=r) for r in cross_run["reports"].values()]
    experiments += multilingual_runs["runs"]
    for run in experiments:
        target_speakers = set(run["target"].speakers())
        for source in run["source"]:
            assert not set(source.speakers()) & target_speakers
        assert run["report"].diagnostics["speaker_disjoint"] is True
        _assert_target_firewall(run["store"], run["target"])

    # within-corpus baselines: URDU-style 30/8 resamples and leave-one-speaker-out
    urdu = generate_synthetic_corpus(SyntheticSpec("URDU", n_speakers=38, n_utterances=400, feature_dim=10,
                                                   negative_mean=-0.5, positive_mean=0.5),
                                     np.random.default_rng(0))
    folds = 0
    for cfg, corpus in [(ExperimentConfig(folds=5, test_speakers=8), urdu),
                        (ExperimentConfig(), cross_run["target"])]:
        store = LabelStore([corpus])
        report = run_baseline(corpus, cfg, store=store)
        plan = fold_plan(corpus, cfg)
        for train_spk, test_spk in plan.folds:
            assert not set(train_spk) & set(test_spk)
            assert set(train_spk) | set(test_spk) == set(corpus.speakers())
        assert report.diagnostics["disjoint_folds_checked"] == len(plan) == len(report.fold_uars)
        # each fold reads its training labels, then its own sealed test labels at scoring time
        assert [r.purpose for r in store.log] == ["train", "scoring"] * len(plan)
        assert all(r.sealed_count == 0 for r in store.log[0::2])
        assert all(r.sealed_count == r.count for r in store.log[1::2])
        folds += len(plan)
    record_property("detail", f"{len(experiments)} cross-corpus runs and {folds} baseline folds audited")


# -- 9 ---------------------------------------------------------------------------------------

SPEC = """\
defaults:
  feature_dim: 12
  n_speakers: 6
  utterances_per_speaker: 6
  segments_per_utterance: 3
  negative_mean: {0-3: -0.8}
  positive_mean: {0-3: 0.8}
corpora:
  - corpus_id: EMO-DB
  - corpus_id: SAVEE
    shift_offset: {4-8: 2.0}
  - corpus_id: URDU
    shift_scale: 1.5
"""

EXP = """\
hidden_dim: 16
latent_dim: 16
autoencoder: {epochs: 4, batch_size: 16}
adapt: {epochs: 4, batch_size: 16, warmup_steps: 5, probe_size: 16, discriminator_hidden: [16, 8]}
"""


@pytest.mark.criterion(9, "replay from the emitted manifest is byte-identical")
def test_criterion_9_replay(tmp_path, record_property):
    (tmp_path / "spec.yaml").write_text(SPEC)
    (tmp_path / "exp.yaml").write_text(EXP)
    data = tmp_path / "data"
    assert main(["generate", "--config", str(tmp_path / "spec.yaml"), "--seed", "5", "--out", str(data)]) == 0
    emo, savee, urdu = (str(data / f"{c}.csv") for c in ("EMO-DB", "SAVEE", "URDU"))
    commands = {
        "baseline": ["baseline", "--source", urdu, "--condition", "all"],
        "cross": ["cross", "--source", emo, "--target", savee],
        "multi": ["multi", "--source", emo, savee, "--target", urdu, "--condition", "latent"],
        "trace": ["adapt-trace", "--source", emo, "--target", urdu],
    }
    compared = 0
    for name, argv in commands.items():
        out, again = tmp_path / name, tmp_path / f"{name}-replay"
        assert main(argv + ["--config", str(tmp_path / "exp.yaml"), "--seed", "2", "--out", str(out)]) == 0
        assert main(["replay", str(out / "manifest.json"), "--out", str(again)]) == 0
        produced = sorted(p.name for p in out.iterdir())
        assert produced == sorted(p.name for p in again.iterdir())
        for fname in produced:
            assert (again / fname).read_bytes() == (out / fname).read_bytes(), f"{name}/{fname}"
        compared += len(produced)
    record_property("detail", f"{len(commands)} commands, {compared} files byte-identical")
