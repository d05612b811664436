"""Command-line entry point: ``case-dialogue <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, config_field_names, parse_overrides, parse_value, read_config_values
from .knowledge import EOS, DialogueSample, FallbackCache, KnowledgeError
from .metrics import evaluate, format_table
from .model import featurize
from .training import Resources, TrainingDiverged, build_model, preprocess, pretrain_phase, train_phase

log = logging.getLogger("case_dialogue")

ARCHITECTURE_FIELDS = ("d_model", "num_layers", "num_heads", "ffn_mult", "max_positions", "concepts_first")

_TOKEN = re.compile(r"\w+(?:'\w+)?|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")
    group = p.add_argument_group("config fields")
    for name in config_field_names():
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="V")


def _config(args, base: TrainConfig | None = None) -> TrainConfig:
    values = {} if base is None else base.to_dict()
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} not found")
        values.update(read_config_values(args.config))
    overrides = {}
    for name in config_field_names():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            overrides[name] = parse_value(name, raw)
    overrides.update(parse_overrides(args.set))
    values.update(overrides)
    return TrainConfig.from_dict(values)


def _write_metrics(metrics: dict, path: Path | None) -> None:
    if path is not None:
        path.write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")


def cmd_toy(args) -> int:
    from .toy import write_toy_dataset

    out = write_toy_dataset(args.out, n=args.n, seed=args.seed)
    print(f"toy corpus written to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    report = preprocess(args.data, cfg, allow_missing=args.allow_missing)
    print(json.dumps(report))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if cfg.pretrain_steps <= 0:
        raise ConfigError("pretrain needs pretrain_steps > 0")
    res = Resources.load(args.data, cfg)
    model = build_model(res, cfg)
    history = pretrain_phase(model, res.features("train", cfg), cfg)
    save_checkpoint(model, args.out, res.vocab, step=len(history))
    print(json.dumps({"bow_initial": history[0]["bow"], "bow_final": history[-1]["bow"], "steps": len(history)}))
    return 0


def cmd_train(args) -> int:
    if args.init is not None:
        model, vocab, _ = load_checkpoint(args.init)
        # start from the checkpoint's config; flags override individual fields
        cfg = _config(args, base=model.cfg)
        for name in ARCHITECTURE_FIELDS:
            if getattr(cfg, name) != getattr(model.cfg, name):
                raise ConfigError(f"{name} cannot change after pretraining")
        model.cfg = cfg
        res = Resources.load(args.data, cfg, vocab)
    else:
        cfg = _config(args)
        res = Resources.load(args.data, cfg)
        model = build_model(res, cfg)
        if not args.skip_pretrain:
            pretrain_phase(model, res.features("train", cfg), cfg)
    train = res.features("train", cfg)
    valid = res.features("valid", cfg) if _has_split(res, "valid") else []

    def save(m, opt, step):
        save_checkpoint(m, args.out, res.vocab, opt, step)

    result = train_phase(model, train, valid, cfg, on_improve=save)
    print(json.dumps({"best_valid_ppl": result.best_ppl, "best_step": result.best_step,
                      "steps": len(result.history), "stopped_early": result.stopped_early}))
    return 0


def _has_split(res: Resources, split: str) -> bool:
    from .training import split_path

    return split_path(res.data_dir, split).exists()


def cmd_eval(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    res = Resources.load(args.data, model.cfg, vocab)
    feats = [featurize(s, vocab, res.cache, res.store, model.cfg) for s in _samples(res, args)]
    metrics, _ = evaluate(model, feats, vocab)
    print(format_table(metrics))
    print(json.dumps(metrics))
    _write_metrics(metrics, args.json_out)
    return 0


def _samples(res: Resources, args, require_response: bool = True):
    from .knowledge import load_corpus

    if getattr(args, "input", None) is not None:
        return load_corpus(args.input, "test", res.vocab.labels, require_response)
    return res.samples(args.split, require_response)


def cmd_generate(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    res = Resources.load(args.data, model.cfg, vocab)
    cache = FallbackCache(res.cache) if args.allow_missing else res.cache
    samples = _samples(res, args, require_response=False)
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for s in samples:
            f = featurize(s, vocab, cache, res.store, model.cfg)
            label, gen = model.predict([f])[0]
            row = {"id": s.sample_id, "emotion_pred": vocab.labels[label], "response": vocab.decode(gen.tokens)}
            out.write(json.dumps(row, ensure_ascii=False) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_chat(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    res = Resources.load(args.data, model.cfg, vocab)
    cache = FallbackCache(res.cache)
    history: list[tuple[str, ...]] = []
    interactive = sys.stdin.isatty()
    if interactive:
        print("type an utterance; 'quit' or EOF ends the session")
    turn = 0
    while True:
        if interactive:
            print("you> ", end="", flush=True)
        line = sys.stdin.readline()
        if not line or line.strip().lower() in ("quit", "exit"):
            break
        tokens = tokenize(line)
        if not tokens:
            continue
        history.append(tuple(tokens))
        sample = DialogueSample(f"chat-{turn}", tuple(history), (EOS,), "")
        f = featurize(sample, vocab, cache, res.store, model.cfg)
        label, gen = model.predict([f])[0]
        reply = vocab.decode(gen.tokens)
        print(f"[{vocab.labels[label]}] {' '.join(reply)}", flush=True)
        if reply:
            history.append(tuple(reply))
        turn += 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="case-dialogue", description="Empathetic response generation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("toy", help="write the synthetic demo corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("preprocess", help="check knowledge coverage, build concept intensities and vocabulary")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--allow-missing", action="store_true", help="tolerate cache misses")
    _add_config_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="phase 1: bag-of-words pretraining")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="phase 2: full objective with early stopping")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--init", type=Path, help="checkpoint from pretrain")
    p.add_argument("--skip-pretrain", action="store_true", help="start phase 2 from fresh weights")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PPL, Dist-1/2 and emotion accuracy")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--input", type=Path, help="labelled JSONL instead of a split")
    p.add_argument("--json-out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode responses for a JSONL file of contexts")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="directory with the knowledge stores")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path)
    p.add_argument("--allow-missing", action="store_true", help="fill cache misses with placeholder knowledge")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("chat", help="interactive terminal session")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_chat)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, KnowledgeError, CheckpointError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"case-dialogue {args.command}: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
