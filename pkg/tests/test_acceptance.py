"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import dataclasses
import itertools
import json
import time
from fractions import Fraction

import numpy as np
import pytest

from jointtag.cli import EXIT_OK, main
from jointtag.corpus import GeneratorConfig, generate_synthetic
from jointtag.crf import build_bilou_mask, CrfLayer, log_partition, nll_and_grad, viterbi
from jointtag.encoder import CharVocab, HashedEmbeddings
from jointtag.evaluation import micro_identity_check, unprefixed_span_match
from jointtag.models import (
    Architecture,
    EncoderConfig,
    JointTagger,
    Mode,
    ModelConfig,
    REFERENCE_LOSS_WEIGHTS,
    gold_columns,
    make_heads,
)
from jointtag.numerics import ParameterStore, check_gradients, log_sum_exp
from jointtag.tags import (
    Span,
    TagSequence,
    bilou_scheme,
    decode_bilou,
    encode_bilou,
    unprefixed_scheme,
    validate_bilou,
)
from jointtag.training import Regime, TrainConfig, apply_regime, evaluate, train


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"

    return emit


# ---------------------------------------------------------------- 1. CRF oracle


def enumerate_paths(A, P):
    n, k = P.shape
    paths = np.array(list(itertools.product(range(k), repeat=n)))
    scores = A[k, paths[:, 0]] + A[paths[:, -1], k + 1] + P[np.arange(n), paths].sum(axis=1)
    if n > 1:
        scores = scores + A[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return paths, scores


def test_criterion_1_crf_oracle(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, mismatches = 0.0, 0
    for trial in range(500):
        n, k = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        if trial % 2:
            A, P = rng.normal(0, 2, (k + 2, k + 2)), rng.normal(0, 2, (n, k))
        else:  # small integers produce exact ties
            A, P = rng.integers(-1, 2, (k + 2, k + 2)).astype(float), rng.integers(-1, 2, (n, k)).astype(float)
        paths, scores = enumerate_paths(A, P)
        z_ref = float(log_sum_exp(scores))
        worst = max(worst, abs(log_partition(A, P) - z_ref) / max(1.0, abs(z_ref)))
        winners = paths[scores == scores.max()]
        # lowest index at the latest differing position
        best = min(map(tuple, winners), key=lambda p: tuple(reversed(p)))
        mismatches += tuple(int(i) for i in viterbi(A, P)) != best
    elapsed = time.perf_counter() - t0
    verdict(1, "CRF oracle equivalence", worst <= 1e-8 and mismatches == 0 and elapsed < 30,
            f"max rel err {worst:.2e}, viterbi mismatches {mismatches}/500, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2. gradient checks


def test_criterion_2_gradient_checks(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    failures = []
    for n, k in [(1, 2), (2, 3), (3, 4), (4, 3), (4, 4)]:
        store = ParameterStore()
        store.add("A", rng.normal(size=(k + 2, k + 2)))
        store.add("P", rng.normal(size=(n, k)))
        gold = rng.integers(0, k, n)

        def loss(s, gold=gold):
            value, dP, dA = nll_and_grad(s["A"].value, s["P"].value, gold)
            s["A"].grad += dA
            s["P"].grad += dP
            return value

        report = check_gradients(loss, store, step=1e-5, tolerance=1e-4)
        if not report.passed:
            failures.append(f"nll n={n} k={k}")

    corpus = generate_synthetic(
        GeneratorConfig(sentences=30, max_entities=1, max_entity_len=2, filler_vocab=3, include_modality=True), 2)
    sentences = [s for s in corpus.sentences() if len(s) <= 4][:2]
    assert sentences, "no short sentence in the probe corpus"
    tensors, worst = 0, 0.0
    for arch in Architecture:
        heads = make_heads(arch, corpus.schemes, ("polarity", "modality"), (0.7, 1.3, 0.4))
        config = ModelConfig(arch, heads, 2, EncoderConfig(hidden_size=3, char_emb_dim=2, char_out_dim=2), seed=2)
        model = JointTagger(config, CharVocab.from_texts(w for s in sentences for w in s.words), HashedEmbeddings(4))
        for _, p in model.store.items():
            p.value += rng.normal(0.0, 0.3, p.value.shape)
        for sent in sentences:
            gold = gold_columns(sent, heads)
            report = check_gradients(lambda st: model.loss_and_grad(sent, gold).total_loss, model.store, 1e-5, 1e-4)
            tensors += len(report.max_rel_error)
            worst = max(worst, report.worst[1])
            if not report.passed:
                failures.append(f"{arch.value} n={len(sent)}")
    elapsed = time.perf_counter() - t0
    verdict(2, "finite-difference gradients", not failures and elapsed < 120,
            f"{tensors} model tensors, worst rel err {worst:.1e}, failures {failures or 'none'}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3. BILOU codec


def test_criterion_3_bilou_codec(verdict):
    rng = np.random.default_rng(3)
    cats = ["problem", "test", "treatment"]
    scheme = bilou_scheme(cats)
    round_trip_errors = 0
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        spans, pos = [], 0
        while pos < n:
            pos += int(rng.integers(0, 3))
            if pos >= n:
                break
            end = min(n - 1, pos + int(rng.integers(0, 4)))
            spans.append(Span(pos, end, str(rng.choice(cats))))
            pos = end + 1
        seq = encode_bilou(spans, n, scheme)
        round_trip_errors += decode_bilou(seq, "strict") != spans
    lenient_errors = 0
    for _ in range(1000):
        seq = TagSequence(scheme, tuple(int(i) for i in rng.integers(0, len(scheme), int(rng.integers(1, 15)))))
        try:
            for s in decode_bilou(seq, "lenient"):
                assert 0 <= s.start <= s.end < len(seq)
        except Exception:
            lenient_errors += 1
    layer = CrfLayer(len(scheme), build_bilou_mask(scheme))
    invalid = 0
    for _ in range(1000):
        P = rng.normal(0, 5, (int(rng.integers(1, 12)), len(scheme)))
        try:
            validate_bilou(TagSequence(scheme, tuple(int(i) for i in layer.viterbi(P))))
        except ValueError:
            invalid += 1
    verdict(3, "BILOU codec", round_trip_errors == lenient_errors == invalid == 0,
            f"round-trip errors {round_trip_errors}, lenient errors {lenient_errors}, invalid viterbi {invalid}")


# ---------------------------------------------------------------- 4. micro identity


def test_criterion_4_micro_identity(verdict):
    report = micro_identity_check([1, 2, 3, 2, 3, 3, 1, 2, 2], [3, 2, 1, 2, 2, 3, 3, 1, 2])
    example_ok = report.precision == report.recall == report.f1 == Fraction(4, 9)
    rng = np.random.default_rng(4)
    failures = 0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        gold, pred = rng.integers(1, 6, n).tolist(), rng.integers(1, 6, n).tolist()
        r = micro_identity_check(gold, pred)
        agree = Fraction(sum(g == p for g, p in zip(gold, pred)), n)
        failures += not (r.holds and r.f1 == agree)
    verdict(4, "micro P = R = F1 identity", example_ok and failures == 0,
            f"example P/R/F1 = {report.precision}/{report.recall}/{report.f1}, random failures {failures}/1000")


# ---------------------------------------------------------------- 5. un-prefixed matcher


ATTR = unprefixed_scheme(["NEG", "POS"])

# (entity spans, attribute labels, expected kept spans)
MATCHER_CASES = [
    ("exact unit", [(1, 1)], "O NEG O", [(1, 1, "NEG")]),
    ("exact multi", [(0, 2)], "NEG NEG NEG O", [(0, 2, "NEG")]),
    ("sub-span left", [(0, 2)], "NEG NEG O O", []),
    ("sub-span right", [(0, 2)], "O NEG NEG O", []),
    ("sub-span middle", [(0, 2)], "O NEG O O", []),
    ("super-span right", [(0, 1)], "NEG NEG NEG O", []),
    ("super-span left", [(1, 2)], "NEG NEG NEG O", []),
    ("adjacent same value merges", [(0, 0), (1, 1)], "NEG NEG O", []),
    ("adjacent different values", [(0, 0), (1, 1)], "NEG POS O", [(0, 0, "NEG"), (1, 1, "POS")]),
    ("boundary shifted", [(1, 2)], "O O NEG NEG", []),
    ("mixed values inside entity", [(0, 1)], "NEG POS O", []),
    ("run outside any entity", [(0, 0)], "O O POS", []),
    ("no attribute", [(0, 1)], "O O O", []),
    ("two entities one matched", [(0, 1), (3, 3)], "POS POS NEG O", [(0, 1, "POS")]),
    ("no entities", [], "NEG NEG", []),
]


def test_criterion_5_unprefixed_matcher(verdict):
    wrong = []
    for name, entities, labels, expected in MATCHER_CASES:
        seq = TagSequence.from_labels(ATTR, labels.split())
        got = unprefixed_span_match([Span(s, e, "problem") for s, e in entities], seq)
        extents = set(entities)
        postcondition = all((s.start, s.end) in extents for s in got) and all(
            set(seq.labels[s.start : s.end + 1]) == {s.category}
            and (s.start == 0 or seq.labels[s.start - 1] != s.category)
            and (s.end == len(seq) - 1 or seq.labels[s.end + 1] != s.category)
            for s in got
        )
        if [tuple(s) for s in got] != expected or not postcondition:
            wrong.append(name)
    verdict(5, "un-prefixed exact-extent matcher", not wrong and len(MATCHER_CASES) >= 12,
            f"{len(MATCHER_CASES)} cases, wrong {wrong or 'none'}")


# ---------------------------------------------------------------- 6. overfit convergence


OVERFIT_CORPUS = generate_synthetic(GeneratorConfig(sentences=50), seed=7)


def overfit_config(arch, regime):
    # lr and batch differ from the library defaults; see README
    return TrainConfig(architecture=arch, regime=regime, epochs=200, batch_size=8, lr=1e-2, hidden_size=32,
                       tag_embedding_dim=8, embedding_dim=32, seed=0, target_f1=0.99)


@pytest.mark.parametrize("arch", list(Architecture), ids=lambda a: a.value)
def test_criterion_6_overfit(verdict, arch):
    lines, ok = [], True
    t0 = time.perf_counter()
    for regime in Regime:
        cfg = overfit_config(arch, regime)
        result = train(cfg, OVERFIT_CORPUS)
        report = evaluate(result.model, apply_regime(OVERFIT_CORPUS, regime))
        ner, pol = report.heads["ner"].micro.f1, report.heads["polarity"].micro.f1
        again = train(overfit_config(arch, regime), OVERFIT_CORPUS)
        deterministic = again.log == result.log and all(
            p.value.tobytes() == q.value.tobytes() for (_, p), (_, q) in zip(result.model.store.items(),
                                                                             again.model.store.items()))
        ok &= ner >= 0.99 and pol >= 0.95 and deterministic
        lines.append(f"{regime.value}: ner {ner:.3f} polarity {pol:.3f} at epoch {len(result.log)}"
                     f"{'' if deterministic else ' NONDETERMINISTIC'}")
    elapsed = time.perf_counter() - t0
    verdict(6, f"overfit convergence [{arch.value}]", ok and elapsed < 600, "; ".join(lines) + f"; {elapsed:.0f}s")


# ---------------------------------------------------------------- 7. teacher forcing


def test_criterion_7_teacher_forcing(verdict):
    corpus = generate_synthetic(GeneratorConfig(sentences=20, include_modality=True), seed=8)
    problems = []
    for arch in (Architecture.CRF_SMAX_TF, Architecture.N_CRF_TF):
        heads = make_heads(arch, corpus.schemes, ("polarity", "modality"))
        model = JointTagger(ModelConfig(arch, heads, 4, EncoderConfig(hidden_size=6), seed=1),
                            CharVocab.from_texts(w for s in corpus.sentences() for w in s.words), HashedEmbeddings(8))
        k = len(model.ner_head.scheme)
        for sent in corpus.sentences():
            gold = gold_columns(sent, heads)
            rng = np.random.default_rng(sent.index)

            def perturb(tags, rng=rng):
                return (tags + rng.integers(1, k, len(tags))) % k

            base = model.forward(sent, Mode.TRAIN, gold)
            hooked = model.forward(sent, Mode.TRAIN, gold, ner_hook=perturb)
            for h in ("polarity", "modality"):
                if hooked.losses[h] != base.losses[h]:
                    problems.append(f"{arch.value} train loss moved")
                if not np.array_equal(hooked.attribute_inputs[h], base.attribute_inputs[h]):
                    problems.append(f"{arch.value} train inputs moved")
            ev = model.forward(sent, Mode.EVAL)
            ev_hooked = model.forward(sent, Mode.EVAL, ner_hook=perturb)
            d = model.config.tag_embedding_dim
            emb = model.tag_embedding.forward(np.asarray(ev.predictions["ner"].indices))
            if not np.array_equal(ev.attribute_inputs["polarity"][:, -d:], emb):
                problems.append(f"{arch.value} eval inputs not from viterbi")
            if np.array_equal(ev_hooked.attribute_inputs["polarity"], ev.attribute_inputs["polarity"]):
                problems.append(f"{arch.value} eval inputs ignore viterbi")
    verdict(7, "teacher-forcing contract", not problems, f"violations {sorted(set(problems)) or 'none'}")


# ---------------------------------------------------------------- 8. loss-weight degeneracy


@pytest.mark.parametrize("arch", list(Architecture), ids=lambda a: a.value)
def test_criterion_8_zero_weight_degeneracy(verdict, arch):
    corpus = generate_synthetic(GeneratorConfig(sentences=20, include_modality=True), seed=9)
    base = TrainConfig(architecture=arch, epochs=4, batch_size=4, lr=1e-2, hidden_size=8, tag_embedding_dim=4,
                       embedding_dim=8, seed=5)
    joint = train(dataclasses.replace(base, attributes=("polarity", "modality"), loss_weights=(1.0, 0.0, 0.0)), corpus)
    single = train(dataclasses.replace(base, attributes=()), corpus)
    same_log = [(r["loss_ner"], r["dev_f1_ner"]) for r in joint.log] == [(r["loss_ner"], r["dev_f1_ner"])
                                                                         for r in single.log]
    shared = dict(single.model.store.items())
    joint_params = dict(joint.model.store.items())
    differing = [n for n, p in shared.items() if p.value.tobytes() != joint_params[n].value.tobytes()]
    verdict(8, f"zero-weight degeneracy [{arch.value}]", same_log and not differing and joint.best_epoch ==
            single.best_epoch, f"log identical {same_log}, differing shared params {differing or 'none'}")


# ---------------------------------------------------------------- 9. reproduction apparatus


def test_criterion_9_apparatus(verdict, tmp_path):
    small = ["--epochs", "2", "--batch-size", "8", "--lr", "0.01", "--hidden-size", "8", "--tag-embedding-dim", "4",
             "--embedding-dim", "8"]
    train_path, dev_path = tmp_path / "train.txt", tmp_path / "dev.txt"
    problems = []
    for path, seed, n in ((train_path, 1, 40), (dev_path, 2, 15)):
        if main(["gen-corpus", "--out", str(path), "--seed", str(seed), "--sentences", str(n), "--modality"]):
            problems.append(f"gen-corpus {path.name}")
    common = ["--train", str(train_path), "--dev", str(dev_path), *small]

    code = main(["ablate", *common, "--run-dir", str(tmp_path / "abl"), "--sweep", "1,0", "0.5,0.5", "0,1"])
    rows = (tmp_path / "abl" / "ablation.tsv").read_text().splitlines() if code == EXIT_OK else []
    if len(rows) != 5:
        problems.append("ablate")

    runs = []
    for (arch, n_heads), weights in sorted(REFERENCE_LOSS_WEIGHTS.items(), key=lambda kv: kv[0][0].value):
        attrs = ("polarity", "modality")[: n_heads - 1]
        for regime in Regime:
            run = tmp_path / f"{arch.value}_{n_heads}_{regime.value}"
            code = main(["train", *common, "--architecture", arch.value, "--attributes", ",".join(attrs),
                         "--loss-weights", ",".join(map(str, weights)), "--regime", regime.value,
                         "--run-dir", str(run)])
            if code != EXIT_OK or json.loads((run / "config.json").read_text())["loss_weights"] != list(weights):
                problems.append(f"train {run.name}")
            runs.append(run / "model.jtar")
    for base_arch in (Architecture.COND_SOFTMAX, Architecture.N_CRF_TF):
        run = tmp_path / base_arch.value
        if main(["train", *common, "--architecture", base_arch.value, "--run-dir", str(run)]) != EXIT_OK:
            problems.append(f"train {base_arch.value}")
        runs.append(run / "model.jtar")
    args = ["eval", "--corpus", str(dev_path), "--out", str(tmp_path / "eval")]
    for ckpt in runs:
        args += ["--checkpoint", str(ckpt)]
    if main(args) != EXIT_OK:
        problems.append("eval")
        tables = []
    else:
        tables = (tmp_path / "eval" / "tables.tsv").read_text().split("\n\n")
    heads_seen = {}
    for block in tables:
        lines = [ln for ln in block.splitlines() if ln]
        if lines and lines[0].startswith("Method"):
            heads_seen[len(lines[0].split("\t"))] = heads_seen.get(len(lines[0].split("\t")), 0) + 1
            if len(lines) < 2:
                problems.append("empty table")
    if heads_seen.get(6) != 1 or heads_seen.get(9) != 2:
        problems.append(f"table shapes {heads_seen}")
    verdict(9, "ablate/train/eval apparatus", not problems,
            f"{len(runs)} checkpoints, ablation rows {max(len(rows) - 2, 0)}, problems {problems or 'none'}")
