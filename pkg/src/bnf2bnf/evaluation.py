"""Objective metrics: feature error, token BLEU over oracle-decoded outputs, attention checks."""

from __future__ import annotations

import copy
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .errors import ContractError
from .synthesizer import Synthesizer
from .toycorpus import Corpus, FeatureRenderer, UtterancePair, oracle_decode
from .translator import Translator

BLEU_NOTE = "corpus BLEU, max_n=4, add-one smoothing applied only to n-gram orders with zero matches"


def feature_mse(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean squared error over the overlapping frames (both truncated to the shorter length)."""
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if len(pred) == 0 or len(ref) == 0:
        raise ContractError("feature_mse needs non-empty sequences")
    n = min(len(pred), len(ref))
    sq = (pred[:n] - ref[:n]) ** 2
    if mask is None:
        return float(sq.mean())
    m = np.asarray(mask, dtype=np.float64)[:n]
    return float((sq * m[:, None]).sum() / (m.sum() * sq.shape[1]))


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuResult:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int


def corpus_bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_n: int = 4) -> BleuResult:
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += sum(h.values())
    precisions = [
        (m / t) if m > 0 else (m + 1) / (t + 1)
        for m, t in zip(matches, totals)
    ]
    if hyp_len == 0:
        return BleuResult(0.0, precisions, 0.0, 0, ref_len)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(min(score, 1.0), precisions, bp, hyp_len, ref_len)


def attention_centroids(alignment: np.ndarray) -> np.ndarray:
    a = np.asarray(alignment, dtype=np.float64)
    mass = a.sum(axis=1)
    pos = np.arange(a.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return (a @ pos) / mass


@dataclass
class AttentionDiagnostics:
    monotonic_rate: float
    coverage_rate: float
    pass_rate: float
    mean_final_coverage: float


def attention_diagnostics(
    alignments: Sequence[np.ndarray], source_lengths: Sequence[int], slack: float = 0.5, min_coverage: float = 0.6
) -> AttentionDiagnostics:
    """Centroid of each decoder step must not move back by more than ``slack`` frames and
    must end at or beyond ``min_coverage`` of the source length."""
    if len(alignments) != len(source_lengths) or not alignments:
        raise ContractError("need one alignment per source length")
    mono = cover = both = 0
    finals = []
    for a, n in zip(alignments, source_lengths):
        c = attention_centroids(np.asarray(a)[:, :n])
        ok_m = bool(np.all(np.isfinite(c))) and bool(np.all(np.diff(c) >= -slack))
        final = c[-1] / n if np.isfinite(c[-1]) else 0.0
        ok_c = bool(np.isfinite(c[-1]) and c[-1] >= min_coverage * n)
        finals.append(final)
        mono += ok_m
        cover += ok_c
        both += ok_m and ok_c
    k = len(alignments)
    return AttentionDiagnostics(mono / k, cover / k, both / k, float(np.mean(finals)))


@dataclass
class EvalReport:
    feature_mse: float
    corpus_bleu: float
    precisions: list[float]
    brevity_penalty: float
    mean_length_ratio: float
    length_within_30pct: float
    attention_monotonicity_rate: float
    attention_coverage_rate: float
    attention_pass_rate: float
    cap_hit_rate: float
    translator_bleu: float
    n_pairs: int
    note: str = BLEU_NOTE
    samples: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


@dataclass
class Prediction:
    fine: np.ndarray
    mel: np.ndarray
    alignment: np.ndarray
    cap_hit: bool
    hyp_tokens: list[int]
    bnf_tokens: list[int]


def predict(
    translator: Translator,
    synth: Synthesizer,
    f_src: np.ndarray,
    renderer: FeatureRenderer | None,
    rng: np.random.Generator | None,
    min_run: int = 1,
) -> Prediction:
    out = translator.infer(f_src, rng)
    mel = synth.forward(out.fine.data).prediction.data
    hyp = oracle_decode(mel, renderer.mel_codebook, min_run=min_run) if renderer is not None else []
    bnf = oracle_decode(out.fine.data, renderer.bnf_codebook, min_run=min_run) if renderer is not None else []
    return Prediction(out.fine.data, mel, out.alignment, out.cap_hit, hyp, bnf)


def evaluate(
    translator: Translator,
    synth: Synthesizer,
    pairs: Sequence[UtterancePair],
    renderer: FeatureRenderer,
    seed: int = 0,
    n_samples: int = 10,
    min_run: int = 1,
) -> EvalReport:
    """Free-running inference over ``pairs``; tokens are read back from the predicted mel analog,
    ignoring label runs shorter than ``min_run`` frames."""
    hyps, refs, bnf_hyps, aligns, src_lens = [], [], [], [], []
    mses, ratios, caps = [], [], []
    samples = []
    for k, p in enumerate(pairs):
        pred = predict(translator, synth, p.f_src, renderer, np.random.default_rng([seed, 50, p.index]), min_run)
        hyps.append(pred.hyp_tokens)
        bnf_hyps.append(pred.bnf_tokens)
        refs.append(p.tgt_tokens)
        aligns.append(pred.alignment)
        src_lens.append(len(p.f_src))
        mses.append(feature_mse(pred.fine, p.f_tgt))
        ratios.append(len(pred.fine) / len(p.f_tgt))
        caps.append(pred.cap_hit)
        if k < n_samples:
            samples.append({"index": p.index, "reference": p.tgt_tokens, "hypothesis": pred.hyp_tokens})
    bleu = corpus_bleu(hyps, refs)
    diag = attention_diagnostics(aligns, src_lens)
    ratios = np.array(ratios)
    return EvalReport(
        feature_mse=float(np.mean(mses)),
        corpus_bleu=bleu.bleu,
        precisions=bleu.precisions,
        brevity_penalty=bleu.brevity_penalty,
        mean_length_ratio=float(ratios.mean()),
        length_within_30pct=float(np.mean(np.abs(ratios - 1.0) <= 0.3)),
        attention_monotonicity_rate=diag.monotonic_rate,
        attention_coverage_rate=diag.coverage_rate,
        attention_pass_rate=diag.pass_rate,
        cap_hit_rate=float(np.mean(caps)),
        translator_bleu=corpus_bleu(bnf_hyps, refs).bleu,
        n_pairs=len(pairs),
        samples=samples,
    )


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json() + "\n")


def format_trend_table(rows: Sequence[dict]) -> str:
    lines = ["fraction\ttrain_pairs\tcorpus_bleu\tfinal_total_loss"]
    for r in rows:
        lines.append(f"{r['fraction']}\t{r['train_pairs']}\t{r['corpus_bleu']!r}\t{r['final_total_loss']!r}")
    return "\n".join(lines) + "\n"


def dataset_size_experiment(
    corpus: Corpus,
    cfg: RunConfig,
    fractions: Sequence[float] = (0.25, 0.5, 1.0),
    out_dir: str | Path | None = None,
    runs: dict | None = None,
) -> list[dict]:
    """One training run per training-set fraction with the same seed and step budget,
    each scored on the fixed held-out split.

    ``runs`` may map a fraction to an already trained ``TrainResult`` produced
    with an identical configuration; those runs are reused instead of retrained.
    """
    from .training import subset_pairs, train_loop

    if list(fractions) != sorted(fractions) or not fractions:
        raise ContractError("fractions must be a non-empty ascending sequence")
    rows = []
    for frac in fractions:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.train.train_fraction = float(frac)
        result = (runs or {}).get(frac)
        if result is None:
            result = train_loop(corpus.train, run_cfg)
        report = evaluate(result.translator, result.synth, corpus.eval, corpus.renderer, seed=cfg.train.seed,
                          min_run=cfg.corpus_spec.decode_min_run)
        rows.append({
            "fraction": float(frac),
            "train_pairs": len(subset_pairs(corpus.train, frac, cfg.train.seed)),
            "corpus_bleu": report.corpus_bleu,
            "final_total_loss": result.history[-1].total if result.history else float("nan"),
            "attention_pass_rate": report.attention_pass_rate,
            "cap_hit_rate": report.cap_hit_rate,
        })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trend.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
        (out / "trend.tsv").write_text(format_trend_table(rows))
    return rows
