"""Command line interface: gen-data, tokenize, train, eval, rank, gradcheck.

Exit status: 0 success, 1 usage, 2 validation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .baselines import build_model
from .checkpoint import CheckpointError
from .data import DataError, SynthSpec, load_features, load_pairs, load_pool, synth_generate, write_corpus
from .metrics import EvalReport, UndefinedMetricError, evaluate_scores
from .model import ConfigError, Matcher, ModelConfig, rank_pool, score_pairs
from .tokenizer import VocabError, Vocabulary, encode, load_vocab, tokenize
from .training import MODEL_FIELDS, TINY_CONFIG, PATH_FIELDS, RunConfig, gradcheck_kind, train

log = logging.getLogger("xmatch")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
DESK_SAMPLES = 8


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config handling


def _load_run_config(path: str | None) -> RunConfig:
    """Read a JSON run config; relative paths inside it resolve against its directory."""
    if path is None:
        return RunConfig()
    cfg = RunConfig.from_file(path)
    base = Path(path).resolve().parent

    def fix(p):
        return None if p is None else str(base / p)

    for k in PATH_FIELDS:
        setattr(cfg, k, fix(getattr(cfg, k)))
    cfg.eval = [fix(p) for p in cfg.eval]
    return cfg


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace, names: Sequence[str]) -> RunConfig:
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"missing {flag} (give it on the command line or in --config)")
    return value


def _model_from_checkpoint(path: str) -> tuple[Matcher, dict]:
    ck = ckpt_io.load(path)
    header = ck.config
    try:
        mc = ModelConfig(vocab_size=header["vocab_size"], seed=header.get("seed") or 0,
                         **{k: header[k] for k in MODEL_FIELDS})
    except KeyError as exc:
        raise CheckpointError(f"{path}: header lacks {exc.args[0]!r}") from None
    model = build_model(ck.kind, mc)
    ckpt_io.load_into(model, ck)
    return model, header


def _check_vocab(model: Matcher, vocab: Vocabulary, path: str) -> None:
    if len(vocab) != model.config.vocab_size:
        raise ConfigError(f"vocabulary {path} has {len(vocab)} tokens, the checkpoint expects {model.config.vocab_size}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = SynthSpec()
    if args.spec:
        try:
            spec = SynthSpec.from_json(json.loads(Path(args.spec).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.spec}: malformed JSON ({exc.msg})") from None
    corpus = synth_generate(spec, args.seed)
    paths = write_corpus(corpus, args.out)
    run = {
        "kind": "cross",
        "vocab": "vocab.txt",
        "features": "features.jsonl",
        "train": "train.jsonl",
        "eval": ["eval.jsonl"],
        "pool": "pool.json",
        "checkpoint": "model.xmck",
        "N_obj": spec.n_obj,
        "d_feat": spec.d_feat,
    }
    cfg_path = Path(args.out) / "config.json"
    cfg_path.write_text(json.dumps(run, indent=2) + "\n", encoding="utf-8")
    for name, p in paths.items():
        print(f"{name}\t{p}")
    print(f"config.json\t{cfg_path}")
    return EXIT_OK


def cmd_tokenize(args: argparse.Namespace) -> int:
    vocab = load_vocab(args.vocab)
    seq = encode(args.phrase, vocab, args.max_len)
    print("pieces\t" + " ".join(tokenize(args.phrase, vocab)))
    print("position\ttoken\tid\tmask")
    for i, (tid, m) in enumerate(zip(seq.ids, seq.mask)):
        print(f"{i}\t{vocab.tokens[tid]}\t{tid}\t{m}")
    return EXIT_OK


TRAIN_OVERRIDES = (
    "kind", "lr", "batch_size", "steps", "schedule", "seed", "vocab", "features", "train",
    "checkpoint", "init_checkpoint",
)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args, TRAIN_OVERRIDES)
    if args.freeze_encoders:
        cfg.freeze_encoders = True
    cfg.validate(for_training=True)
    vocab = load_vocab(_require(cfg.vocab, "--vocab"))
    features = load_features(_require(cfg.features, "--features"), n_obj=cfg.N_obj, d_feat=cfg.d_feat)
    pairs = load_pairs(_require(cfg.train, "--train"))
    out = Path(_require(cfg.checkpoint, "--checkpoint"))
    missing = sorted({p.image_id for p in pairs} - set(features))
    if missing:
        raise DataError(f"{cfg.train}: image id {missing[0]!r} not in {cfg.features}")

    model = build_model(cfg.kind, cfg.model_config(len(vocab)))
    if cfg.init_checkpoint:
        ckpt_io.load_into(model, ckpt_io.load(cfg.init_checkpoint))

    loss_log = Path(args.loss_log) if args.loss_log else out.with_name(out.name + ".loss.tsv")
    t0 = time.perf_counter()
    with open(loss_log, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n")

        def on_step(step: int, loss: float) -> None:
            fh.write(f"{step}\t{loss!r}\n")
            if args.log_every and (step % args.log_every == 0 or step == cfg.steps):
                log.info("step %d  loss %.4f  (%.1fs)", step, loss, time.perf_counter() - t0)

        losses = train(model, pairs, features, vocab, cfg, on_step=on_step)

    header = cfg.header()
    header["vocab_size"] = len(vocab)
    ckpt_io.save(ckpt_io.from_model(model, header), out)
    print(f"checkpoint\t{out}")
    print(f"loss_log\t{loss_log}")
    print(f"final_loss\t{losses[-1]!r}")
    if args.fig_dir:
        from .plotting import plot_loss

        fig = plot_loss(losses, Path(args.fig_dir) / f"loss_{cfg.kind}.png", title=f"{cfg.kind} training loss")
        print(f"figure\t{fig}")
    return EXIT_OK


def _dataset_name(path: str, taken: set[str]) -> str:
    name = Path(path).stem
    k = 2
    base = name
    while name in taken:
        name = f"{base}_{k}"
        k += 1
    taken.add(name)
    return name


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    checkpoints = args.checkpoint or ([cfg.checkpoint] if cfg.checkpoint else [])
    eval_paths = args.eval or cfg.eval
    if not checkpoints:
        raise ConfigError("missing --checkpoint")
    if not eval_paths:
        raise ConfigError("missing --eval")
    vocab_path = _require(args.vocab or cfg.vocab, "--vocab")
    vocab = load_vocab(vocab_path)
    features_path = _require(args.features or cfg.features, "--features")

    taken_ds: set[str] = set()
    datasets = [(_dataset_name(p, taken_ds), load_pairs(p)) for p in eval_paths]
    taken_models: set[str] = set()
    report = EvalReport()
    scored: dict[str, dict] = {name: {} for name, _ in datasets}
    features = None
    for path in checkpoints:
        model, _ = _model_from_checkpoint(path)
        _check_vocab(model, vocab, vocab_path)
        if features is None:
            features = load_features(features_path, n_obj=model.config.N_obj, d_feat=model.config.d_feat)
        mname = model.kind if model.kind not in taken_models else _dataset_name(path, taken_models)
        taken_models.add(mname)
        for dname, pairs in datasets:
            missing = sorted({p.image_id for p in pairs} - set(features))
            if missing:
                raise DataError(f"dataset {dname!r}: image id {missing[0]!r} not in {features_path}")
            if not pairs:
                raise UndefinedMetricError(f"dataset {dname!r} is empty")
            scores = score_pairs(model, pairs, features, vocab)
            labels = [p.label for p in pairs]
            row = evaluate_scores(scores, labels, mname, dname)
            report.add(row)
            scored[dname][mname] = (scores, labels, row.auc)

    sys.stdout.write(report.to_text())
    if args.tsv:
        sys.stdout.write("\n" + report.to_tsv())
    if args.json:
        Path(args.json).write_text(report.to_json(), encoding="utf-8")
        print(f"json\t{args.json}")
    if args.fig_dir:
        from .plotting import plot_roc_per_dataset

        for fig in plot_roc_per_dataset(scored, args.fig_dir):
            print(f"figure\t{fig}")
    return EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    model, _ = _model_from_checkpoint(_require(args.checkpoint or cfg.checkpoint, "--checkpoint"))
    vocab_path = _require(args.vocab or cfg.vocab, "--vocab")
    vocab = load_vocab(vocab_path)
    _check_vocab(model, vocab, vocab_path)
    features = load_features(_require(args.features or cfg.features, "--features"),
                             n_obj=model.config.N_obj, d_feat=model.config.d_feat)
    pool = load_pool(_require(args.pool or cfg.pool, "--pool"))
    ranked = rank_pool(args.phrase, pool, model, features, vocab)
    if args.top:
        ranked = ranked[: args.top]
    print("rank\timage_id\tscore")
    for i, (image_id, s) in enumerate(ranked, start=1):
        print(f"{i}\t{image_id}\t{s!r}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    kinds = ["cross", "early", "dual"] if args.kind == "all" else [args.kind]
    per_param = args.max_per_param
    if args.dims == "tiny":
        config = ModelConfig(seed=args.seed, **TINY_CONFIG)
    else:
        config = ModelConfig(seed=args.seed)
        per_param = per_param or DESK_SAMPLES
    failed = False
    print("kind\tmax_rel_error\tworst_parameter\tseconds\tstatus")
    for kind in kinds:
        t0 = time.perf_counter()
        err, worst = gradcheck_kind(kind, config, batch_size=args.batch_size, seed=args.seed,
                                    max_per_param=per_param)
        ok = bool(np.isfinite(err)) and err < args.tol
        failed |= not ok
        print(f"{kind}\t{err:.3e}\t{worst}\t{time.perf_counter() - t0:.1f}\t{'PASS' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xmatch", description="Phrase-image matching with a cross-modal transformer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    # also accepted after the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic membership-rule corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--spec", help="JSON file overriding synthetic corpus parameters")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("tokenize", parents=[common], help="show WordPiece pieces and ids for a phrase")
    t.add_argument("--vocab", required=True)
    t.add_argument("--max-len", type=int, default=16)
    t.add_argument("phrase")
    t.set_defaults(func=cmd_tokenize)

    tr = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    tr.add_argument("--config", help="JSON run config; flags override its values")
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--kind", choices=["cross", "early", "dual"])
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--schedule", choices=["constant", "linear"])
    tr.add_argument("--vocab")
    tr.add_argument("--features")
    tr.add_argument("--train")
    tr.add_argument("--checkpoint", help="output checkpoint path")
    tr.add_argument("--init-checkpoint", help="start from these weights (fine-tuning)")
    tr.add_argument("--freeze-encoders", action="store_true", help="update only the matching head")
    tr.add_argument("--loss-log", help="TSV of (step, loss); default <checkpoint>.loss.tsv")
    tr.add_argument("--fig-dir", help="also render the loss curve here")
    tr.add_argument("--log-every", type=int, default=100)
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score eval sets and print the AUC/F1 table")
    e.add_argument("--config")
    e.add_argument("--checkpoint", action="append", help="repeatable; one table row per checkpoint")
    e.add_argument("--eval", action="append", help="repeatable labeled-pair file")
    e.add_argument("--features")
    e.add_argument("--vocab")
    e.add_argument("--json", help="write the report as JSON")
    e.add_argument("--tsv", action="store_true", help="also print full-precision TSV rows")
    e.add_argument("--fig-dir", help="render one ROC figure per eval set")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rank", parents=[common], help="rank a candidate pool for a phrase")
    r.add_argument("--config")
    r.add_argument("--checkpoint")
    r.add_argument("--pool")
    r.add_argument("--features")
    r.add_argument("--vocab")
    r.add_argument("--top", type=int)
    r.add_argument("phrase")
    r.set_defaults(func=cmd_rank)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of full-model gradients")
    gc.add_argument("--kind", choices=["cross", "early", "dual", "all"], default="all")
    gc.add_argument("--dims", choices=["tiny", "desk"], default="desk")
    gc.add_argument("--max-per-param", type=int,
                    help=f"components checked per tensor; default all at tiny dims, {DESK_SAMPLES} at desk dims")
    gc.add_argument("--batch-size", type=int, default=3)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UndefinedMetricError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, VocabError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
