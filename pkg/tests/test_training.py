import dataclasses
import logging

import numpy as np
import pytest

from conftest import corpus_of
from jointtag import training
from jointtag.corpus import GeneratorConfig, generate_synthetic
from jointtag.models import Architecture
from jointtag.numerics import ParameterStore
from jointtag.training import (
    Adam,
    AblationSpec,
    NumericalAbort,
    Regime,
    SchemeMismatch,
    TrainConfig,
    ablate,
    align_corpus,
    apply_regime,
    build_model,
    evaluate,
    format_ablation,
    format_results,
    load_checkpoint,
    regime_label,
    result_row,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def corpora():
    data = generate_synthetic(GeneratorConfig(sentences=24), seed=21)
    docs = data.documents
    return data, dataclasses.replace(data, documents=docs[:1])


def quick(**kw):
    base = dict(epochs=2, batch_size=4, lr=1e-2, hidden_size=6, tag_embedding_dim=3, embedding_dim=6, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(patience=-1),
                dict(loss_weights=(1.0,)), dict(loss_weights=(1.0, -1.0)), dict(embedding_kind="static")):
        with pytest.raises(ValueError):
            quick(**bad).validate()
    cfg = quick(loss_weights=(0.5, 0.5), architecture="n_crf_tf")
    cfg.validate()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


def test_regime_labels():
    assert regime_label(Regime.ALL_POLARITY, True) == "BILOU"
    assert regime_label(Regime.NEG_ONLY, False) == "Negation only"
    assert regime_label(Regime.NEG_ONLY, True) == "BILOU+Neg only"


def test_neg_only_regime_restricts_attribute_scheme(corpora):
    data, _ = corpora
    filtered = apply_regime(data, Regime.NEG_ONLY)
    assert filtered.schemes["polarity"].categories == ("NEG",)
    assert apply_regime(data, Regime.ALL_POLARITY) is data
    for arch in Architecture:
        model = build_model(quick(architecture=arch, regime="neg_only"), filtered)
        assert model.config.head("polarity").scheme.categories == ("NEG",)


# ---------------------------------------------------------------- optimizer


def test_adam_first_step_moves_by_lr():
    store = ParameterStore()
    p = store.add("w", np.array([1.0, -2.0, 0.0]))
    p.grad[...] = [3.0, -0.5, 0.0]
    Adam(store, lr=0.1).step()
    np.testing.assert_allclose(p.value, [0.9, -1.9, 0.0], atol=1e-7)


def test_adam_minimizes_quadratic():
    store = ParameterStore()
    p = store.add("w", np.array([4.0, -3.0]))
    opt = Adam(store, lr=0.1)
    for _ in range(500):
        p.grad[...] = 2 * p.value
        opt.step()
    np.testing.assert_allclose(p.value, 0.0, atol=1e-2)


# ---------------------------------------------------------------- training


def test_training_is_deterministic(corpora, tmp_path):
    train_c, dev_c = corpora
    a = train(quick(), train_c, dev_c, tmp_path / "a")
    b = train(quick(), train_c, dev_c, tmp_path / "b")
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    assert (tmp_path / "a" / "model.jtar").read_bytes() == (tmp_path / "b" / "model.jtar").read_bytes()
    assert a.log == b.log and a.best_epoch == b.best_epoch
    c = train(quick(seed=2), train_c, dev_c)
    assert c.log != a.log


def test_log_fields(corpora):
    result = train(quick(), *corpora)
    rec = result.log[0]
    assert set(rec) == {"epoch", "loss", "loss_ner", "loss_polarity", "dev_f1_ner", "dev_f1_polarity",
                        "dev_macro_f1_ner", "dev_macro_f1_polarity"}
    assert [r["epoch"] for r in result.log] == [1, 2]
    assert result.best_score == max(r["dev_f1_ner"] for r in result.log)


@pytest.mark.parametrize("arch", list(Architecture), ids=lambda a: a.value)
def test_loss_decreases(corpora, arch):
    result = train(quick(architecture=arch, epochs=6), corpora[0])
    losses = [r["loss"] for r in result.log]
    assert losses[-1] < losses[0]


def test_patience_and_target_stop(corpora):
    result = train(quick(epochs=30, patience=0), *corpora)
    assert result.stopped in ("patience", "epochs")
    if result.stopped == "patience":
        assert len(result.log) < 30
    done = train(quick(epochs=5, target_f1=0.0), *corpora)
    assert done.stopped == "target" and len(done.log) == 1


def test_numerical_abort(corpora, monkeypatch):
    real = training.build_model

    def broken(config, corpus):
        model = real(config, corpus)
        model.store["ner.proj.W"].value[...] = np.nan
        return model

    monkeypatch.setattr(training, "build_model", broken)
    with pytest.raises(NumericalAbort, match="non-finite"):
        train(quick(), *corpora)


def test_zero_attribute_heads(corpora):
    result = train(quick(attributes=()), *corpora)
    assert [h.name for h in result.model.heads] == ["ner"]
    assert "loss_polarity" not in result.log[0]


def test_empty_training_corpus_rejected(corpora):
    empty = dataclasses.replace(corpora[0], documents=())
    with pytest.raises(ValueError):
        train(quick(), empty)


# ---------------------------------------------------------------- evaluation and checkpoints


def test_checkpoint_round_trip(corpora, tmp_path):
    data, dev = corpora
    for arch in Architecture:
        model = build_model(quick(architecture=arch), data)
        path = tmp_path / f"{arch.value}.jtar"
        save_checkpoint(model, path, {"note": 1})
        again = load_checkpoint(path)
        assert again.checkpoint_meta == {"note": 1}
        assert again.config.to_dict() == model.config.to_dict()
        for sent in dev.sentences():
            a, b = model.predict(sent), again.predict(sent)
            assert {k: (v[0].indices, v[1]) for k, v in a.items()} == {k: (v[0].indices, v[1]) for k, v in b.items()}


def test_oracle_scores_one(corpora):
    data, _ = corpora
    for arch in Architecture:
        for regime in Regime:
            c = apply_regime(data, regime)
            model = build_model(quick(architecture=arch, regime=regime), c)
            report = evaluate(model, c, oracle=True)
            for m in report.heads.values():
                assert m.token_accuracy == 1.0 and m.micro.f1 == 1.0
                assert m.macro.f1 == 1.0


def test_empty_corpus_warns(corpora, caplog):
    model = build_model(quick(), corpora[0])
    empty = dataclasses.replace(corpora[0], documents=())
    with caplog.at_level(logging.WARNING):
        report = evaluate(model, empty)
    assert "empty" in caplog.text
    assert report.heads["ner"].micro.f1 == 0.0


def test_scheme_mismatch_and_alignment(corpora):
    data, _ = corpora
    model = build_model(quick(), data)
    other = corpus_of([(["a", "b"], [(0, 0, "alien", {"polarity": "NEG"})])])
    with pytest.raises(SchemeMismatch):
        evaluate(model, other)
    with pytest.raises(SchemeMismatch):
        align_corpus(model, other)
    subset = corpus_of([(["a", "b"], [(0, 0, "problem", {"polarity": "NEG"})])])
    with pytest.raises(SchemeMismatch):
        evaluate(model, subset)
    aligned = align_corpus(model, subset)
    assert aligned.schemes["ner"] == data.schemes["ner"]
    assert evaluate(model, aligned, oracle=True).heads["ner"].micro.f1 == 1.0


# ---------------------------------------------------------------- tables and sweeps


def test_format_results(corpora):
    data, dev = corpora
    model = build_model(quick(architecture="crf_smax_tf", regime="neg_only"), apply_regime(data, Regime.NEG_ONLY))
    report = evaluate(model, apply_regime(dev, Regime.NEG_ONLY))
    row = result_row(model, report, Regime.NEG_ONLY)
    assert (row.method, row.other) == ("BiLSTM CRF-Smax-TF", "Negation only")
    ner_table = format_results([row], "ner").splitlines()
    assert ner_table[0].split("\t") == ["Method", "Other parameters", "Accuracy", "Precision", "Recall",
                                        "Span-based F1"]
    assert len(ner_table[1].split("\t")) == 6
    attr_table = format_results([row], "polarity", "caption").splitlines()
    assert len(attr_table[0].split("\t")) == 9 and attr_table[-1] == "caption"


def test_ablation(corpora, tmp_path):
    spec = AblationSpec([(1.0, 0.0), (0.5, 0.5)])
    rows = ablate(spec, quick(architecture="n_crf"), *corpora, run_dir=tmp_path)
    assert [r.weights for r in rows] == [(1.0, 0.0), (0.5, 0.5)]
    assert all(set(r.values) == {"ner_f1", "attr_f1", "attr_macro_f1"} for r in rows)
    assert (tmp_path / "sweep01" / "model.jtar").exists()
    table = format_ablation(rows, Architecture.N_CRF).splitlines()
    assert table[1] == "weights\tner_f1\tattr_f1\tattr_macro_f1"
    assert table[2].startswith("1/0\t")
    with pytest.raises(ValueError):
        ablate(AblationSpec([]), quick(), *corpora)
