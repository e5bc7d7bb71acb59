"""Command-line interface.

Exit codes: 0 success, 2 invalid input or failed validation, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import (
    NER,
    Corpus,
    CorpusError,
    GeneratorConfig,
    SpanAnnotation,
    dumps_canonical,
    generate_synthetic,
    import_standoff,
    load_canonical,
    make_corpus,
    save_canonical,
)
from .encoder import CharVocab, EmbeddingError, HashedEmbeddings, ProviderKind
from .models import Architecture, EncoderConfig, JointTagger, MissingGold, ModelConfig, gold_columns, make_heads
from .numerics import ArchiveError, check_gradients
from .tags import TagError
from .training import (
    AblationSpec,
    NumericalAbort,
    Regime,
    SchemeMismatch,
    TrainConfig,
    ablate,
    align_corpus,
    apply_regime,
    evaluate,
    format_ablation,
    format_results,
    load_checkpoint,
    result_row,
    train,
)

log = logging.getLogger("jointtag")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
INVALID_INPUT = (CorpusError, TagError, SchemeMismatch, MissingGold, EmbeddingError, ArchiveError,
                 ValueError, KeyError, FileNotFoundError)


def _weights(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(w) for w in text.replace("/", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weight tuple {text!r}") from None


def _read_settings(path) -> dict:
    """``key = value`` lines; list values are comma separated."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(config_fields: dict, settings: dict) -> dict:
    out = {}
    for key, value in settings.items():
        if key not in config_fields:
            raise ValueError(f"unknown setting {key!r}")
        kind = str(config_fields[key].type)
        if value.lower() in ("none", ""):
            out[key] = None
        elif key in ("attributes",):
            out[key] = tuple(v.strip() for v in value.split(",") if v.strip())
        elif key == "loss_weights":
            out[key] = _weights(value)
        elif kind.startswith("int"):
            out[key] = int(value)
        elif kind.startswith("float"):
            out[key] = float(value)
        elif kind.startswith("bool"):
            out[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            out[key] = value
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file of training settings (flags override it)")
    p.add_argument("--train", dest="train_path", help="training corpus (canonical format)")
    p.add_argument("--dev", dest="dev_path", help="development corpus (canonical format)")
    p.add_argument("--architecture", choices=[a.value for a in Architecture])
    p.add_argument("--attributes", help="comma-separated attribute columns, e.g. polarity,modality")
    p.add_argument("--loss-weights", type=_weights, help="weights for ner and each attribute, e.g. 0.6,0.2,0.2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--regime", choices=[r.value for r in Regime])
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--tag-embedding-dim", type=int)
    p.add_argument("--embedding-kind", choices=[k.value for k in ProviderKind])
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--embedding-path")
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--no-transition-mask", dest="transition_mask", action="store_const", const=False)
    p.add_argument("--dropout", type=float)
    p.add_argument("--target-f1", type=float)
    p.add_argument("--run-dir", required=True, help="output directory for logs, checkpoint and reports")


def _train_config(args) -> TrainConfig:
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = _coerce(fields, _read_settings(args.config)) if args.config else {}
    for name in fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = tuple(flag.split(",")) if name == "attributes" else flag
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def _write_snapshot(run_dir: Path, cfg: TrainConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _train_config(args)
    run_dir = Path(args.run_dir)
    _write_snapshot(run_dir, cfg)
    result = train(cfg, run_dir=run_dir)
    report = result.dev_report
    report.label = "dev"
    report.write(run_dir, "dev_report")
    print(report.format_table())
    print(f"best epoch {result.best_epoch} (ner span F1 {result.best_score:.4f}); checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = load_canonical(args.corpus)
    out = Path(args.out) if args.out else None
    rows = []
    for path in args.checkpoint:
        model = load_checkpoint(path)
        regime = Regime(args.regime or model.checkpoint_meta.get("regime", Regime.ALL_POLARITY.value))
        report = evaluate(model, align_corpus(model, apply_regime(corpus, regime)), oracle=args.oracle,
                          include_absent=not args.exclude_absent, label=str(path))
        print(f"== {path}")
        print(report.format_table())
        rows.append(result_row(model, report, regime))
        if out is not None:
            report.write(out, Path(path).stem + "_report")
    heads = []
    for row in rows:
        heads.extend(h for h in row.report.heads if h not in heads)
    tables = "\n\n".join(format_results(rows, h, f"{h} results on {args.corpus}") for h in heads)
    print()
    print(tables)
    if out is not None:
        (out / "tables.tsv").write_text(tables + "\n", encoding="utf-8")
    return EXIT_OK


def _tagged_corpus(model: JointTagger, corpus: Corpus) -> Corpus:
    docs = []
    for doc in corpus.documents:
        sents = []
        for sent in doc.sentences:
            pred = model.predict(sent)
            anns = []
            for s in pred[NER][1]:
                attrs = {}
                for h in model.attr_heads:
                    for a in pred[h.name][1]:
                        if (a.start, a.end) == (s.start, s.end):
                            attrs[h.name] = a.category
                anns.append(SpanAnnotation(s.start, s.end, s.category, attrs))
            sents.append((sent.tokens, {NER: anns}))
        docs.append((doc.id, sents))
    return make_corpus(docs)


def cmd_tag(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = load_canonical(args.input)
    text = dumps_canonical(_tagged_corpus(model, corpus))
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    run_dir = Path(args.run_dir)
    _write_snapshot(run_dir, cfg)
    spec = AblationSpec([tuple(w) for w in args.sweep])
    rows = ablate(spec, cfg, run_dir=run_dir)
    table = format_ablation(rows, cfg.architecture)
    (run_dir / "ablation.tsv").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    config = GeneratorConfig.from_file(args.config) if args.config else GeneratorConfig()
    if args.sentences is not None:
        config.sentences = args.sentences
    if args.style is not None:
        config.style = args.style
    if args.modality:
        config.include_modality = True
    corpus = generate_synthetic(config, args.seed)
    save_canonical(corpus, args.out)
    print(f"wrote {len(corpus)} sentences to {args.out}")
    return EXIT_OK


def gradient_check_suite(seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4):
    """Finite-difference check of every architecture on a random tiny model; yields (architecture, report)."""
    corpus = generate_synthetic(
        GeneratorConfig(sentences=10, max_entities=1, max_entity_len=2, filler_vocab=3, include_modality=True), seed)
    sent = min(corpus.sentences(), key=len)
    rng = np.random.default_rng(seed)
    for arch in Architecture:
        heads = make_heads(arch, corpus.schemes, ("polarity", "modality"), (0.7, 1.3, 0.4))
        config = ModelConfig(arch, heads, 2, EncoderConfig(hidden_size=3, char_emb_dim=2, char_out_dim=2), seed=seed)
        model = JointTagger(config, CharVocab.from_texts(sent.words), HashedEmbeddings(4))
        for _, p in model.store.items():
            p.value += rng.normal(0.0, 0.3, p.value.shape)
        gold = gold_columns(sent, heads)
        yield arch, check_gradients(lambda st: model.loss_and_grad(sent, gold).total_loss, model.store, step, tolerance)


def cmd_check_grad(args) -> int:
    ok = True
    for arch, report in gradient_check_suite(args.seed, args.step, args.tolerance):
        print(f"[{arch.value}] " + report.summary())
        ok &= report.passed
    return EXIT_OK if ok else EXIT_INVALID


def cmd_validate_corpus(args) -> int:
    corpus = load_canonical(args.corpus)
    corpus.validate()
    print(f"{args.corpus}: {len(corpus.documents)} documents, {len(corpus)} sentences")
    for col, scheme in sorted(corpus.schemes.items()):
        print(f"  {col}: {len(scheme)} tags over {list(scheme.categories)}")
    return EXIT_OK


def cmd_import_standoff(args) -> int:
    docs = []
    for text_path in args.text:
        stem = Path(text_path).stem
        concept = Path(args.concepts) / f"{stem}.con"
        assertion = Path(args.assertions) / f"{stem}.ast" if args.assertions else None
        imported = import_standoff(text_path, concept, assertion, doc_id=stem)
        docs.extend(imported.documents)
    corpus = make_corpus([(d.id, [(s.tokens, s.spans) for s in d.sentences]) for d in docs])
    save_canonical(corpus, args.out)
    print(f"wrote {len(corpus)} sentences from {len(docs)} documents to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointtag", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and keep the best checkpoint")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on a corpus")
    p.add_argument("--checkpoint", action="append", required=True, help="may be repeated; one table row each")
    p.add_argument("--corpus", required=True)
    p.add_argument("--regime", choices=[r.value for r in Regime], help="defaults to the training regime")
    p.add_argument("--oracle", action="store_true", help="score gold against itself")
    p.add_argument("--exclude-absent", action="store_true", help="drop classes absent from gold and prediction")
    p.add_argument("--out", help="directory for reports and tables")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tag", help="write predicted spans for a canonical corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("ablate", help="sweep composite-loss weights")
    _add_train_flags(p)
    p.add_argument("--sweep", type=_weights, nargs="+", required=True, help="weight tuples, e.g. 1,0 0.5,0.5 0,1")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-corpus", help="write a seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key = value generator settings")
    p.add_argument("--sentences", type=int)
    p.add_argument("--style", choices=["2010", "2012"])
    p.add_argument("--modality", action="store_true")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("check-grad", help="finite-difference check of every architecture")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("validate-corpus", help="check a canonical corpus file")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_validate_corpus)

    p = sub.add_parser("import-standoff", help="convert concept/assertion standoff files to the canonical format")
    p.add_argument("text", nargs="+", help="one sentence per line text files")
    p.add_argument("--concepts", required=True, help="directory of .con files")
    p.add_argument("--assertions", help="directory of .ast files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_standoff)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INVALID_INPUT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
