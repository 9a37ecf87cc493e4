"""``bnf2bnf <gen-data|train|infer|eval> --config=PATH [--key=value ...]``

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import numpy as np

from . import container
from .checkpoint import load_checkpoint
from .config import RunConfig, parse_config, parse_flags
from .errors import Bnf2BnfError, ConfigurationError
from .evaluation import evaluate, predict, write_report
from .synthesizer import format_grid
from .toycorpus import build_corpus, corpus_fingerprint, read_corpus, write_corpus
from .training import all_parameters, build_models, restore, train_loop
from .translator import format_alignment

log = logging.getLogger("bnf2bnf")

USAGE = "usage: bnf2bnf <gen-data|train|infer|eval> --config=PATH [--key=value ...]"


class UsageError(Exception):
    pass


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"--{what}: {p} does not exist")
    return p


def _load_models(cfg: RunConfig):
    ckpt_path = _require(cfg.checkpoint, "checkpoint")
    translator, synth = build_models(cfg)
    ckpt = load_checkpoint(ckpt_path, {t.name: t.shape for t in all_parameters(translator, synth)})
    restore(ckpt, translator, synth)
    return translator, synth, ckpt


def cmd_gen_data(cfg: RunConfig) -> None:
    corpus = build_corpus(cfg.corpus_spec, cfg.translator.d_in, cfg.synth.d_mel, cfg.synth.upsample_factor)
    write_corpus(corpus, cfg.corpus)
    log.info("wrote %d pairs (%d train / %d eval) to %s", len(corpus.pairs), len(corpus.train_ids),
             len(corpus.eval_ids), cfg.corpus)


def cmd_train(cfg: RunConfig) -> None:
    corpus_dir = _require(cfg.corpus, "corpus")
    corpus = read_corpus(corpus_dir)
    resume = None
    if cfg.checkpoint:
        translator, synth = build_models(cfg)
        resume = load_checkpoint(_require(cfg.checkpoint, "checkpoint"),
                                 {t.name: t.shape for t in all_parameters(translator, synth)})

    def report(step, b):
        if step % 100 == 0:
            log.info("step %d total %.5f translator %.5f synthesizer %.5f", step, b.total, b.translator, b.synthesizer)

    result = train_loop(corpus.train, cfg, cfg.out_dir, resume, corpus_fingerprint(corpus_dir), report)
    log.info("finished at step %d; %d checkpoints in %s", result.step, len(result.checkpoints), cfg.out_dir)


def cmd_infer(cfg: RunConfig) -> None:
    src_path = _require(cfg.input, "input")
    if not cfg.output:
        raise UsageError("missing --output")
    translator, synth, _ = _load_models(cfg)
    tensors, _ = container.load(src_path)
    key = "features" if "features" in tensors else "f_src" if "f_src" in tensors else None
    if key is None:
        raise ConfigurationError(f"{src_path}: expected a 'features' or 'f_src' tensor, found {sorted(tensors)}")
    rng = np.random.default_rng([cfg.train.seed, 50])
    pred = predict(translator, synth, tensors[key], None, rng)
    out = Path(cfg.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    container.save(out, {"mel": pred.mel, "fine": pred.fine, "alignment": pred.alignment},
                   {"kind": "prediction", "cap_hit": pred.cap_hit})
    Path(str(out) + ".mel.txt").write_text(format_grid(pred.mel))
    Path(str(out) + ".alignment.txt").write_text(format_alignment(pred.alignment))
    log.info("%d frames%s -> %s", len(pred.fine), " (step cap hit)" if pred.cap_hit else "", out)


def cmd_eval(cfg: RunConfig) -> None:
    corpus_dir = _require(cfg.corpus, "corpus")
    translator, synth, ckpt = _load_models(cfg)
    fingerprint = corpus_fingerprint(corpus_dir)
    if ckpt.corpus_fingerprint and ckpt.corpus_fingerprint != fingerprint and not cfg.force:
        raise Bnf2BnfError(
            f"checkpoint was trained on corpus {ckpt.corpus_fingerprint[:12]}, {corpus_dir} is {fingerprint[:12]}; "
            "pass --force to evaluate anyway"
        )
    corpus = read_corpus(corpus_dir)
    report = evaluate(translator, synth, corpus.eval, corpus.renderer, seed=cfg.train.seed,
                      min_run=cfg.corpus_spec.decode_min_run)
    out = Path(cfg.output) if cfg.output else Path(cfg.out_dir) / "eval_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    log.info("BLEU %.4f attention pass %.3f cap-hit %.3f -> %s", report.corpus_bleu, report.attention_pass_rate,
             report.cap_hit_rate, out)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    if not argv or argv[0] not in COMMANDS:
        print(USAGE, file=sys.stderr)
        return 2
    try:
        path, flags = parse_flags(argv[1:])
        if path is not None and not Path(path).exists():
            raise UsageError(f"--config: {path} does not exist")
        cfg = parse_config(path, flags)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}\n{USAGE}", file=sys.stderr)
        return 2
    try:
        COMMANDS[argv[0]](cfg)
    except UsageError as exc:
        print(f"error: {exc}\n{USAGE}", file=sys.stderr)
        return 2
    except (Bnf2BnfError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
