"""Procedural parallel corpus of continuous feature sequences.

A toy source language is mapped to a toy target language by token
substitution, swapping of marked adjacent pairs and expansion of some tokens
into two. Token sequences are rendered into smooth frame sequences from a
codebook; source renders additionally pass through a per-speaker rotation.
Nearest-codebook decoding inverts the rendering exactly when there is no
noise, which stands in for a recogniser at evaluation time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .config import CorpusConfig
from .errors import ConfigurationError, ContractError


@dataclass
class ToyLanguageSpec:
    vocab_size: int
    n_source: int  # tokens 0..n_source-1 are shared; the rest are target-only
    substitution: list[int]  # permutation of the shared alphabet
    reorder_pairs: list[tuple[int, int]]
    expansions: dict[int, int]  # source token -> extra target-only token
    min_len: int
    max_len: int
    min_duration: int
    max_duration: int
    seed: int

    def __post_init__(self):
        self.reorder_pairs = [tuple(p) for p in self.reorder_pairs]
        self.expansions = {int(k): int(v) for k, v in self.expansions.items()}
        self._pairs = set(self.reorder_pairs)

    def validate(self) -> None:
        if sorted(self.substitution) != list(range(self.n_source)):
            raise ConfigurationError("substitution must be a bijection on the shared alphabet")
        for a, b in self.reorder_pairs:
            if not (0 <= a < self.n_source and 0 <= b < self.n_source):
                raise ConfigurationError(f"reorder pair {(a, b)} outside the source alphabet")
        for k, v in self.expansions.items():
            if not (0 <= k < self.n_source <= v < self.vocab_size):
                raise ConfigurationError(f"expansion {k}->{v} must map a source token to a target-only token")

    def to_json(self) -> dict:
        d = asdict(self)
        d["expansions"] = {str(k): v for k, v in sorted(self.expansions.items())}
        d["reorder_pairs"] = [list(p) for p in self.reorder_pairs]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ToyLanguageSpec":
        return cls(**d)


def make_language(cfg: CorpusConfig, seed: int) -> ToyLanguageSpec:
    rng = np.random.default_rng([seed, 1])
    n_source = cfg.vocab_size - cfg.n_target_only
    substitution = [int(v) for v in rng.permutation(n_source)]
    special = rng.permutation(n_source)
    markers = sorted(int(t) for t in special[: cfg.n_reorder_markers])
    expanding = sorted(int(t) for t in special[cfg.n_reorder_markers : cfg.n_reorder_markers + cfg.n_expanding])
    pairs = [(m, x) for m in markers for x in range(n_source) if x != m and x not in markers]
    expansions = {t: n_source + (i % cfg.n_target_only) for i, t in enumerate(expanding)}
    spec = ToyLanguageSpec(
        vocab_size=cfg.vocab_size,
        n_source=n_source,
        substitution=substitution,
        reorder_pairs=pairs,
        expansions=expansions,
        min_len=cfg.min_sentence_len,
        max_len=cfg.max_sentence_len,
        min_duration=cfg.min_duration,
        max_duration=cfg.max_duration,
        seed=seed,
    )
    spec.validate()
    return spec


def translate_tokens(src: Sequence[int], spec: ToyLanguageSpec) -> list[int]:
    """Substitute, swap marked adjacent pairs (greedy, left to right), then expand."""
    return [t for t, _ in translate_with_sources(src, spec)]


def translate_with_sources(src: Sequence[int], spec: ToyLanguageSpec) -> list[tuple[int, int | None]]:
    """Target tokens paired with the source position they come from (None for expansion tails)."""
    for t in src:
        if not 0 <= t < spec.n_source:
            raise ContractError(f"token {t} is not in the source vocabulary [0, {spec.n_source})")
    order: list[int] = []
    i, n = 0, len(src)
    while i < n:
        if i + 1 < n and (src[i], src[i + 1]) in spec._pairs:
            order += [i + 1, i]
            i += 2
        else:
            order.append(i)
            i += 1
    out: list[tuple[int, int | None]] = []
    for pos in order:
        t = src[pos]
        out.append((spec.substitution[t], pos))
        if t in spec.expansions:
            out.append((spec.expansions[t], None))
    return out


def _has_adjacent_repeat(tokens: Sequence[int]) -> bool:
    return any(a == b for a, b in zip(tokens[:-1], tokens[1:]))


def sample_source_sentence(spec: ToyLanguageSpec, rng: np.random.Generator) -> list[int]:
    """Uniform length and tokens; resampled until neither side has an immediate repeat.

    Immediate repeats would be merged by run-length decoding, so they are
    excluded to keep rendering invertible.
    """
    while True:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        toks = [int(t) for t in rng.integers(0, spec.n_source, size=n)]
        if not _has_adjacent_repeat(toks) and not _has_adjacent_repeat(translate_tokens(toks, spec)):
            return toks


# rendering -------------------------------------------------------------------------


def _unit_rows(rng, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def min_own_weight(smoothing_width: int) -> float:
    """Smallest share of a frame's smoothing window that belongs to its own token."""
    w = smoothing_width
    return (w - w // 2) / w


def codebook_ok(book: np.ndarray, min_dist: float, own_weight: float, margin: float = 0.0) -> bool:
    """Pairwise separation plus: every two-token blend with at least ``own_weight`` of token a
    decodes to a, with ``margin`` to spare in distance."""
    diff = book[:, None, :] - book[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    n = len(book)
    if n < 2:
        return True
    if dist[~np.eye(n, dtype=bool)].min() < min_dist:
        return False
    blends = own_weight * book[:, None, :] + (1.0 - own_weight) * book[None, :, :]  # [a, x, d]
    d_all = np.linalg.norm(blends[:, :, None, :] - book[None, None, :, :], axis=-1)  # [a, x, c]
    own = d_all[np.arange(n), :, np.arange(n)]  # [a, x]
    others = d_all.copy()
    others[np.arange(n), :, np.arange(n)] = np.inf
    return bool((others.min(axis=-1) - own >= margin).all())


def make_codebook(rng, n: int, d: int, min_dist: float, own_weight: float, margin: float = 0.0,
                  max_tries: int = 20000) -> np.ndarray:
    rows: list[np.ndarray] = []
    tries = 0
    while len(rows) < n:
        tries += 1
        if tries > max_tries:
            raise ConfigurationError(f"could not place {n} separated codebook vectors in {d} dims")
        cand = _unit_rows(rng, 1, d)[0]
        trial = np.array(rows + [cand])
        if codebook_ok(trial, min_dist, own_weight, margin):
            rows.append(cand)
    return np.array(rows)


def random_orthogonal(rng, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def rotation_power(q: np.ndarray, alpha: float) -> np.ndarray:
    """``q`` ** ``alpha`` for an orthogonal ``q`` (reflections are first folded into a rotation).

    alpha=1 returns ``q`` itself, 0 the identity; values in between turn by a
    fraction of every principal angle.
    """
    if alpha == 1.0:
        return q
    if np.linalg.det(q) < 0:
        q = q.copy()
        q[:, 0] = -q[:, 0]
    w, v = np.linalg.eig(q)
    frac = (v * np.exp(1j * alpha * np.angle(w))) @ np.linalg.inv(v)
    u, _, vt = np.linalg.svd(frac.real)
    return u @ vt


@dataclass
class FeatureRenderer:
    bnf_codebook: np.ndarray  # [V, d_bnf]
    mel_codebook: np.ndarray  # [V, d_mel]
    speaker_rotations: np.ndarray  # [S, d_bnf, d_bnf]
    speaker_biases: np.ndarray  # [S, d_bnf]
    smoothing_width: int
    noise_level: float
    min_duration: int
    max_duration: int

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_rotations)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "bnf_codebook": self.bnf_codebook,
            "mel_codebook": self.mel_codebook,
            "speaker_rotations": self.speaker_rotations,
            "speaker_biases": self.speaker_biases,
        }

    def params(self) -> dict:
        return {
            "smoothing_width": self.smoothing_width,
            "noise_level": self.noise_level,
            "min_duration": self.min_duration,
            "max_duration": self.max_duration,
        }

    def sample_durations(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(self.min_duration, self.max_duration + 1, size=n)

    def to_speaker(self, frames: np.ndarray, speaker: int) -> np.ndarray:
        return frames @ self.speaker_rotations[speaker] + self.speaker_biases[speaker]

    def from_speaker(self, frames: np.ndarray, speaker: int) -> np.ndarray:
        return (frames - self.speaker_biases[speaker]) @ self.speaker_rotations[speaker].T


def make_renderer(cfg: CorpusConfig, d_bnf: int, d_mel: int, seed: int) -> FeatureRenderer:
    rng = np.random.default_rng([seed, 2])
    own = min_own_weight(cfg.smoothing_width)
    if cfg.smoothing_width // 2 >= cfg.min_duration:
        raise ConfigurationError("smoothing_width must be < 2 * min_duration for invertible rendering")
    # noisy side keeps a decision margin proportional to the noise level
    bnf = make_codebook(rng, cfg.vocab_size, d_bnf, cfg.min_codebook_distance, own, 6.0 * cfg.noise_level)
    mel = make_codebook(rng, cfg.vocab_size, d_mel, cfg.min_codebook_distance, own)
    rotations = np.stack([rotation_power(random_orthogonal(rng, d_bnf), cfg.speaker_rotation) for _ in range(cfg.n_speakers)])
    biases = rng.standard_normal((cfg.n_speakers, d_bnf)) * cfg.speaker_bias
    return FeatureRenderer(
        bnf_codebook=bnf,
        mel_codebook=mel,
        speaker_rotations=rotations,
        speaker_biases=biases,
        smoothing_width=cfg.smoothing_width,
        noise_level=cfg.noise_level,
        min_duration=cfg.min_duration,
        max_duration=cfg.max_duration,
    )


def smooth(frames: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average along time; windows are truncated at the edges."""
    if width <= 1:
        return frames.copy()
    half = width // 2
    t = len(frames)
    csum = np.concatenate([np.zeros((1, frames.shape[1])), np.cumsum(frames, axis=0)])
    lo = np.clip(np.arange(t) - half, 0, t)
    hi = np.clip(np.arange(t) + (width - half), 0, t)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


def _render(tokens, codebook, durations, width, noise, rng) -> np.ndarray:
    if len(tokens) == 0:
        raise ContractError("cannot render an empty token sequence")
    frames = np.repeat(codebook[np.asarray(tokens)], durations, axis=0)
    frames = smooth(frames, width)
    if noise > 0:
        frames = frames + noise * rng.standard_normal(frames.shape)
    return frames


def render_bnf(
    tokens: Sequence[int],
    renderer: FeatureRenderer,
    speaker: int | None,
    rng: np.random.Generator,
    durations: np.ndarray | None = None,
    noise: float | None = None,
) -> np.ndarray:
    """Bottleneck-feature analog. ``speaker`` None renders the speaker-free target side."""
    if durations is None:
        durations = renderer.sample_durations(len(tokens), rng)
    level = renderer.noise_level if noise is None else noise
    frames = _render(tokens, renderer.bnf_codebook, durations, renderer.smoothing_width, level, rng)
    return frames if speaker is None else renderer.to_speaker(frames, speaker)


def render_mel(tokens: Sequence[int], renderer: FeatureRenderer, durations: np.ndarray, upsample: int = 1) -> np.ndarray:
    """Clean mel analog: same scheme on the mel codebook with ``upsample`` x the frames, no noise."""
    return _render(tokens, renderer.mel_codebook, np.asarray(durations) * upsample,
                   renderer.smoothing_width, 0.0, None)


def oracle_decode(
    features: np.ndarray,
    codebook: np.ndarray,
    renderer: FeatureRenderer | None = None,
    speaker: int | None = None,
    min_run: int = 1,
) -> list[int]:
    """Nearest codebook row per frame, collapse runs, drop runs shorter than ``min_run``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ContractError(f"oracle_decode expects a non-empty [T, d] array, got {features.shape}")
    if speaker is not None and renderer is not None:
        features = renderer.from_speaker(features, speaker)
    d2 = ((features[:, None, :] - codebook[None]) ** 2).sum(axis=-1)
    labels = d2.argmin(axis=1)
    runs: list[list[int]] = []
    for lab in labels:
        if runs and runs[-1][0] == lab:
            runs[-1][1] += 1
        else:
            runs.append([int(lab), 1])
    out: list[int] = []
    for lab, n in runs:
        if n >= min_run and (not out or out[-1] != lab):
            out.append(lab)
    return out


# corpus ----------------------------------------------------------------------------------


@dataclass
class UtterancePair:
    index: int
    speaker: int
    src_tokens: list[int]
    tgt_tokens: list[int]
    f_src: np.ndarray
    f_tgt: np.ndarray
    mel: np.ndarray
    tgt_durations: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "src_tokens": np.asarray(self.src_tokens, dtype=np.float64),
            "tgt_tokens": np.asarray(self.tgt_tokens, dtype=np.float64),
            "f_src": self.f_src,
            "f_tgt": self.f_tgt,
            "mel": self.mel,
        }


@dataclass
class Corpus:
    spec: ToyLanguageSpec
    renderer: FeatureRenderer
    pairs: list[UtterancePair]
    train_ids: list[int]
    eval_ids: list[int]
    seed: int
    upsample: int = 1

    @property
    def train(self) -> list[UtterancePair]:
        return [self.pairs[i] for i in self.train_ids]

    @property
    def eval(self) -> list[UtterancePair]:
        return [self.pairs[i] for i in self.eval_ids]

    def meta(self) -> dict:
        return {
            "format": 1,
            "seed": self.seed,
            "size": len(self.pairs),
            "upsample": self.upsample,
            "n_speakers": self.renderer.n_speakers,
            "spec": self.spec.to_json(),
            "renderer": self.renderer.params(),
            "train": list(self.train_ids),
            "eval": list(self.eval_ids),
        }


def generate_corpus(
    spec: ToyLanguageSpec,
    renderer: FeatureRenderer,
    size: int,
    seed: int,
    eval_size: int | None = None,
    upsample: int = 1,
    tied_durations: bool = False,
) -> Corpus:
    """``size`` pairs with distinct source sentences; eval split defaults to 5%.

    With ``tied_durations`` each target token keeps the duration of the source
    token it translates; expansion tails draw their own.
    """
    if size < 1:
        raise ContractError("corpus size must be >= 1")
    sent_rng = np.random.default_rng([seed, 0])
    seen: set[tuple[int, ...]] = set()
    sentences = []
    attempts = 0
    while len(sentences) < size:
        attempts += 1
        if attempts > 50 * size + 1000:
            raise ConfigurationError("toy language too small for the requested number of distinct sentences")
        s = sample_source_sentence(spec, sent_rng)
        if tuple(s) not in seen:
            seen.add(tuple(s))
            sentences.append(s)
    pairs = []
    for i, src in enumerate(sentences):
        rng = np.random.default_rng([seed, 1000 + i])
        aligned = translate_with_sources(src, spec)
        tgt = [t for t, _ in aligned]
        speaker = int(rng.integers(0, renderer.n_speakers))
        src_durations = renderer.sample_durations(len(src), rng)
        f_src = render_bnf(src, renderer, speaker, rng, durations=src_durations)
        durations = renderer.sample_durations(len(tgt), rng)
        if tied_durations:
            durations = np.array([durations[k] if pos is None else src_durations[pos] for k, (_, pos) in enumerate(aligned)])
        f_tgt = render_bnf(tgt, renderer, None, rng, durations=durations)
        mel = render_mel(tgt, renderer, durations, upsample)
        pairs.append(UtterancePair(i, speaker, src, tgt, f_src, f_tgt, mel, durations))
    n_eval = round(0.05 * size) if eval_size is None else eval_size
    if size == 1:
        n_eval = 0
    if not 0 <= n_eval < size:
        raise ConfigurationError(f"eval_size {n_eval} must leave at least one training pair")
    order = np.random.default_rng([seed, 3]).permutation(size)
    eval_ids = sorted(int(i) for i in order[:n_eval])
    train_ids = sorted(int(i) for i in order[n_eval:])
    return Corpus(spec, renderer, pairs, train_ids, eval_ids, seed, upsample)


def build_corpus(cfg: CorpusConfig, d_bnf: int, d_mel: int, upsample: int = 1) -> Corpus:
    spec = make_language(cfg, cfg.corpus_seed)
    renderer = make_renderer(cfg, d_bnf, d_mel, cfg.corpus_seed)
    return generate_corpus(spec, renderer, cfg.corpus_size, cfg.corpus_seed, cfg.eval_size, upsample, cfg.tied_durations)


def write_corpus(corpus: Corpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "meta.json").write_text(json.dumps(corpus.meta(), sort_keys=True, indent=1) + "\n")
    container.save(directory / "renderer.bin", corpus.renderer.tensors(), {"kind": "renderer"})
    for p in corpus.pairs:
        container.save(
            directory / f"utt_{p.index:06d}.bin",
            p.tensors() | {"tgt_durations": np.asarray(p.tgt_durations, dtype=np.float64)},
            {"kind": "utterance", "index": p.index, "speaker": p.speaker},
        )


def read_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    spec = ToyLanguageSpec.from_json(meta["spec"])
    rt, _ = container.load(directory / "renderer.bin")
    renderer = FeatureRenderer(
        bnf_codebook=rt["bnf_codebook"],
        mel_codebook=rt["mel_codebook"],
        speaker_rotations=rt["speaker_rotations"],
        speaker_biases=rt["speaker_biases"],
        **meta["renderer"],
    )
    pairs = []
    for i in range(meta["size"]):
        t, h = container.load(directory / f"utt_{i:06d}.bin")
        pairs.append(
            UtterancePair(
                index=h["index"],
                speaker=h["speaker"],
                src_tokens=[int(v) for v in t["src_tokens"]],
                tgt_tokens=[int(v) for v in t["tgt_tokens"]],
                f_src=t["f_src"],
                f_tgt=t["f_tgt"],
                mel=t["mel"],
                tgt_durations=t["tgt_durations"].astype(int),
            )
        )
    return Corpus(spec, renderer, pairs, meta["train"], meta["eval"], meta["seed"], meta.get("upsample", 1))


def corpus_fingerprint(directory: str | Path) -> str:
    return hashlib.sha256((Path(directory) / "meta.json").read_bytes()).hexdigest()
