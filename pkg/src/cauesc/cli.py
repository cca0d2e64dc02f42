"""Command-line pipeline: prepare, annotate, cache-effects, train, eval, generate, analyze.

Every command reads one JSON run configuration (defaults < ``--config``
file < flags), writes its artifacts under ``--out``, archives the resolved
configuration as ``run_config.<command>.json`` and logs JSON lines to
stderr.

Exit codes: 0 success, 2 usage, 3 data/schema, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path


from .autograd import NumericError
from .causes import CauseAnnotation, ingest_annotations, load_lexicon, resolve_annotations, write_annotations
from .container import FormatError
from .corpus import (STRATEGIES, Conversation, CorpusError, Vocabulary, build_vocab, load_esconv,
                     split_indices, strategy_distribution, strategy_progress)
from .data import prepare_corpus
from .decoding import DecodeConfig, generate
from .effects import HashedEffectProvider, build_bundle, cache_bundles, load_cached
from .metrics import aggregate_ab, read_votes
from .model import VARIANTS, CauESC, ModelConfig, load_checkpoint, save_checkpoint
from .training import REPORT_KEYS, TrainConfig, evaluate, train, write_curve

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULTS: dict = {
    "paths": {"corpus": None, "annotations": None, "lexicon": None, "votes": None, "checkpoint": None},
    "split": {"ratios": [0.8, 0.1, 0.1], "seed": 0},
    "data": {"mode": "all", "max_context_len": 256, "max_target_len": 64, "effect_seed": 0},
    "model": {k: v for k, v in ModelConfig().to_dict().items() if k != "vocab_size"},
    "train": TrainConfig().to_dict(),
    "decode": DecodeConfig().to_dict(),
    "eval": {"split": "test", "batch_size": 20, "limit": None},
    "seed": 0,
}

log = logging.getLogger("cauesc")


class UsageError(Exception):
    pass


class _JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"level": record.levelname.lower(), "msg": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, sort_keys=True, default=str)


def _setup_logging(quiet: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def _info(msg: str, **kw) -> None:
    log.info(msg, extra={"fields": kw})


# configuration ---------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise UsageError(f"unknown config key {where}{k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


_FLAG_MAP = {
    "corpus": ("paths", "corpus"), "annotations": ("paths", "annotations"),
    "lexicon": ("paths", "lexicon"), "votes": ("paths", "votes"), "checkpoint": ("paths", "checkpoint"),
    "seed": ("seed",), "split_seed": ("split", "seed"), "mode": ("data", "mode"),
    "variant": ("model", "variant"), "use_cause": ("model", "use_cause"),
    "use_intra": ("model", "use_intra"), "use_inter": ("model", "use_inter"),
    "use_executors": ("model", "use_executors"), "hidden": ("model", "hidden"),
    "steps": ("train", "steps"), "batch_size": ("train", "batch_size"),
    "lr": ("train", "learning_rate"), "warmup": ("train", "warmup_steps"),
    "eval_every": ("train", "eval_every"),
    "top_p": ("decode", "top_p"), "top_k": ("decode", "top_k"), "temperature": ("decode", "temperature"),
    "repetition_penalty": ("decode", "repetition_penalty"), "max_new_tokens": ("decode", "max_new_tokens"),
    "greedy": ("decode", "greedy"), "split": ("eval", "split"), "limit": ("eval", "limit"),
}


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        cfg = _merge(cfg, file_cfg)
    for flag, path in _FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    if getattr(args, "ratios", None) is not None:
        cfg["split"]["ratios"] = args.ratios
    ratios = cfg["split"]["ratios"]
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise UsageError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    if cfg["model"]["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {cfg['model']['variant']!r}; expected one of {list(VARIANTS)}")
    if cfg["eval"]["split"] not in ("train", "dev", "test"):
        raise UsageError(f"unknown split {cfg['eval']['split']!r}")
    try:
        TrainConfig(**cfg["train"])
        DecodeConfig(**cfg["decode"])
        ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


# shared loading --------------------------------------------------------------

class Workspace:
    """Artifacts of one pipeline run, all living under ``out``."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out

    def corpus(self) -> list[Conversation]:
        path = self.cfg["paths"]["corpus"]
        if not path:
            raise UsageError("no corpus given (use --corpus or paths.corpus)")
        if not Path(path).exists():
            raise FileNotFoundError(f"corpus not found: {path}")
        return load_esconv(path)

    def split(self) -> dict[str, list[int]]:
        return json.loads(self._need("split.json").read_text(encoding="utf-8"))["indices"]

    def vocab(self) -> Vocabulary:
        return Vocabulary.load(self._need("vocab.txt"))

    def lexicon(self) -> frozenset[str]:
        return load_lexicon(self.cfg["paths"]["lexicon"])

    def annotations(self, corpus: list[Conversation]) -> dict[str, CauseAnnotation]:
        p = self.out / "causes.jsonl"
        if p.exists():
            return ingest_annotations(p, corpus)
        return resolve_annotations(corpus, self.lexicon(), self._external(corpus))

    def _external(self, corpus):
        path = self.cfg["paths"]["annotations"]
        return ingest_annotations(path, corpus) if path else None

    def provider(self) -> HashedEffectProvider:
        return HashedEffectProvider(self.cfg["model"]["effect_dim"], self.cfg["data"]["effect_seed"])

    def bundles(self):
        p = self.out / "effects.cesc"
        return load_cached(p) if p.exists() else None

    def examples(self, corpus: list[Conversation], part: str, vocab: Vocabulary):
        convs = [corpus[i] for i in self.split()[part]]
        d = self.cfg["data"]
        return prepare_corpus(convs, vocab, self.annotations(corpus), self.bundles(), self.provider(),
                              self.lexicon(), d["mode"], d["max_context_len"], d["max_target_len"])

    def model_config(self, vocab: Vocabulary) -> ModelConfig:
        return ModelConfig(vocab_size=len(vocab), **self.cfg["model"])

    def checkpoint_path(self) -> Path:
        return Path(self.cfg["paths"]["checkpoint"] or self.out / "checkpoint.cesc")

    def _need(self, name: str) -> Path:
        p = self.out / name
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run the prepare command first")
        return p


# commands --------------------------------------------------------------------

def cmd_prepare(ws: Workspace) -> dict:
    corpus = ws.corpus()
    ids = [c.conversation_id for c in corpus]
    if len(set(ids)) != len(ids):
        raise CorpusError("conversation ids must be unique")
    split = split_indices(len(corpus), ws.cfg["split"]["ratios"], ws.cfg["split"]["seed"])
    counts = {k: len(v) for k, v in split.items()}
    _write_json(ws.out / "split.json", {"counts": counts, "indices": split,
                                        "ids": {k: [ids[i] for i in v] for k, v in split.items()}})
    vocab = build_vocab([corpus[i] for i in split["train"]], extra_texts=[s.description for s in STRATEGIES])
    vocab.save(ws.out / "vocab.txt")
    report = {"dialogues": len(corpus), **counts, "vocab_size": len(vocab)}
    _write_json(ws.out / "prepare_report.json", report)
    return report


def cmd_annotate(ws: Workspace) -> dict:
    corpus = ws.corpus()
    external = ws._external(corpus)
    ann = resolve_annotations(corpus, ws.lexicon(), external)
    write_annotations([ann[c.conversation_id] for c in corpus if c.conversation_id in ann],
                      ws.out / "causes.jsonl")
    n_ext = sum(1 for a in ann.values() if external and a.conversation_id in external)
    return {"conversations": len(ann), "external": n_ext, "lexicon": len(ann) - n_ext}


def cmd_cache_effects(ws: Workspace) -> dict:
    corpus = ws.corpus()
    provider = ws.provider()
    bundles = {c.conversation_id: build_bundle(c, provider) for c in corpus if c.utterances}
    cache_bundles(bundles, ws.out / "effects.cesc", provider.dim)
    return {"conversations": len(bundles), "effect_dim": provider.dim}


def cmd_train(ws: Workspace) -> dict:
    corpus, vocab = ws.corpus(), ws.vocab()
    train_ex = ws.examples(corpus, "train", vocab)
    dev_ex = ws.examples(corpus, "dev", vocab)
    tc = TrainConfig(**ws.cfg["train"])
    model = CauESC.for_vocab(ws.model_config(vocab), vocab, seed=ws.cfg["seed"])
    _info("training", train_examples=len(train_ex), dev_examples=len(dev_ex),
          parameters=int(sum(p.data.size for p in model.parameters())))
    every = max(1, tc.steps // 20)
    result = train(model, train_ex, tc, dev_ex or None,
                   log=lambda d: (d["event"] == "dev" or d["step"] % every == 0) and _info(d.pop("event"), **d))
    model.load_state_dict(result.best_state)
    save_checkpoint(model, ws.checkpoint_path(), {"best_step": result.best_step})
    write_curve(result.curve, ws.out / "loss_curve.csv")
    if result.dev_curve:
        write_curve(result.dev_curve, ws.out / "dev_curve.csv")
    from .plotting import plot_loss_curve
    if result.curve:
        plot_loss_curve([r.step for r in result.curve], [r.L_s for r in result.curve],
                        [r.L_r for r in result.curve], ws.out / "loss_curve.png",
                        [(r.step, r.L) for r in result.dev_curve])
    report = {"steps": tc.steps, "best_step": result.best_step,
              "final": {"L_s": result.final.L_s, "L_r": result.final.L_r, "L": result.final.L}
              if result.curve else None,
              "best_dev_L": min((r.L for r in result.dev_curve), default=None)}
    _write_json(ws.out / "train_report.json", report)
    return report


def _load_model(ws: Workspace, vocab: Vocabulary) -> CauESC:
    path = ws.checkpoint_path()
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path, vocab, ws.model_config(vocab), ws.cfg["seed"])


def _eval_examples(ws: Workspace, corpus, vocab):
    ex = ws.examples(corpus, ws.cfg["eval"]["split"], vocab)
    limit = ws.cfg["eval"]["limit"]
    return ex[:limit] if limit else ex


def cmd_eval(ws: Workspace) -> dict:
    corpus, vocab = ws.corpus(), ws.vocab()
    model = _load_model(ws, vocab)
    examples = _eval_examples(ws, corpus, vocab)
    rep = evaluate(model, examples, vocab, DecodeConfig(**ws.cfg["decode"]), ws.cfg["eval"]["batch_size"])
    table = rep.as_table()
    _write_json(ws.out / "eval_report.json", {k: table[k] for k in REPORT_KEYS})
    with open(ws.out / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gold\\predicted"] + [s.name for s in STRATEGIES])
        for s, row in zip(STRATEGIES, rep.confusion):
            w.writerow([s.name] + [int(v) for v in row])
    with open(ws.out / "eval_generations.jsonl", "w", encoding="utf-8") as fh:
        for ex, hyp, st in zip(examples, rep.hypotheses, rep.strategies):
            fh.write(json.dumps({"conversation_id": ex.conversation_id, "strategy": STRATEGIES[st].name,
                                 "response": " ".join(hyp), "reference": ex.response}) + "\n")
    from .plotting import plot_confusion
    plot_confusion(rep.confusion, ws.out / "confusion.png")
    return {k: table[k] for k in REPORT_KEYS}


def cmd_generate(ws: Workspace) -> dict:
    corpus, vocab = ws.corpus(), ws.vocab()
    model = _load_model(ws, vocab)
    dc = ws.cfg["decode"]
    lines = []
    for k, ex in enumerate(_eval_examples(ws, corpus, vocab)):
        g = generate(model, ex, vocab.eos_id, DecodeConfig(**{**dc, "seed": dc["seed"] + k}))
        lines.append(json.dumps({"conversation_id": ex.conversation_id, "strategy": STRATEGIES[g.strategy].name,
                                 "response": " ".join(vocab.decode(g.tokens))}))
    (ws.out / "generations.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return {"generated": len(lines)}


def cmd_analyze(ws: Workspace) -> dict:
    report: dict = {}
    if ws.cfg["paths"]["corpus"]:
        corpus = ws.corpus()
        dist = strategy_distribution(corpus)
        prog = strategy_progress(corpus, 6)
        names = [s.name for s in STRATEGIES]
        with open(ws.out / "strategy_distribution.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "share"])
            for n, v in zip(names, dist):
                w.writerow([n, repr(float(v))])
        with open(ws.out / "strategy_progress.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["interval"] + names)
            for i, row in enumerate(prog):
                w.writerow([i] + [repr(float(v)) for v in row])
        from .plotting import plot_distribution, plot_progress
        plot_distribution(dist, ws.out / "strategy_distribution.png")
        if len(prog):
            plot_progress(prog, ws.out / "strategy_progress.png")
        report["distribution"] = {n: float(v) for n, v in zip(names, dist)}
        report["max_share"] = float(dist.max()) if dist.sum() else 0.0
    if ws.cfg["paths"]["votes"]:
        ab = aggregate_ab(read_votes(ws.cfg["paths"]["votes"])).as_dict()
        _write_json(ws.out / "ab_report.json", ab)
        report["ab"] = ab
    if not report:
        raise UsageError("analyze needs --corpus and/or --votes")
    _write_json(ws.out / "analyze_report.json", report)
    return report


COMMANDS = {
    "prepare": cmd_prepare, "annotate": cmd_annotate, "cache-effects": cmd_cache_effects,
    "train": cmd_train, "eval": cmd_eval, "generate": cmd_generate, "analyze": cmd_analyze,
}


# argument parsing ------------------------------------------------------------

def _ratios(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cauesc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--corpus", help="conversation JSON file")
    common.add_argument("--seed", type=int)
    common.add_argument("--quiet", action="store_true", help="only log warnings")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--annotations", help="external cause annotations (JSON lines)")
    data.add_argument("--lexicon", help="cue lexicon file (one term per line)")
    data.add_argument("--mode", choices=("all", "last"))
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--variant", choices=VARIANTS)
    for name in ("cause", "intra", "inter", "executors"):
        model.add_argument(f"--use-{name}", dest=f"use_{name}", action=argparse.BooleanOptionalAction,
                           default=None)
    model.add_argument("--hidden", type=int)
    model.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.cesc)")
    decode = argparse.ArgumentParser(add_help=False)
    decode.add_argument("--top-p", dest="top_p", type=float)
    decode.add_argument("--top-k", dest="top_k", type=int)
    decode.add_argument("--temperature", type=float)
    decode.add_argument("--repetition-penalty", dest="repetition_penalty", type=float)
    decode.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    decode.add_argument("--greedy", action=argparse.BooleanOptionalAction, default=None)
    decode.add_argument("--split", choices=("train", "dev", "test"))
    decode.add_argument("--limit", type=int)

    p = sub.add_parser("prepare", parents=[common], help="split the corpus and build the vocabulary")
    p.add_argument("--ratios", type=_ratios, help="train,dev,test ratios (default 0.8,0.1,0.1)")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    sub.add_parser("annotate", parents=[common, data], help="write cause masks")
    sub.add_parser("cache-effects", parents=[common, data, model], help="write the effect cache")
    p = sub.add_parser("train", parents=[common, data, model], help="train and keep the best-dev checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    sub.add_parser("eval", parents=[common, data, model, decode], help="score a checkpoint")
    sub.add_parser("generate", parents=[common, data, model, decode], help="sample responses")
    p = sub.add_parser("analyze", parents=[common], help="strategy statistics and A/B aggregation")
    p.add_argument("--votes", help="A/B vote CSV (item_id, rater_id, choice)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.quiet)
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        _write_json(args.out / f"run_config.{args.command}.json", cfg)
        _info("start", command=args.command, out=str(args.out))
        result = COMMANDS[args.command](Workspace(cfg, args.out))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        log.error(str(exc), extra={"fields": {"exit": EXIT_USAGE}})
        return EXIT_USAGE
    except NumericError as exc:
        log.error(str(exc), extra={"fields": {"exit": EXIT_NUMERIC}})
        return EXIT_NUMERIC
    except (CorpusError, FormatError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        log.error(f"{type(exc).__name__}: {exc}", extra={"fields": {"exit": EXIT_DATA}})
        return EXIT_DATA
    sys.stdout.write(json.dumps(result, indent=2) + "\n")
    _info("done", command=args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
