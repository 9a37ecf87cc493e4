"""Losses, the two-phase schedule, Adam, and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, check_shapes, save_checkpoint
from .config import RunConfig, TrainConfig
from .errors import ContractError, DimensionError, NumericError
from .numerics import Tape, Tensor
from .synthesizer import Synthesizer, SynthesizerOutput, synthesizer_loss
from .toycorpus import UtterancePair
from .translator import Translator, TranslatorOutput

log = logging.getLogger(__name__)


# targets and losses -------------------------------------------------------------------


def stop_token_target(length: int, padded_to: int | None = None) -> np.ndarray:
    """0 on frames before the last, 1 on the last frame and on any padding after it."""
    if length < 1:
        raise ContractError(f"stop target needs length >= 1, got {length}")
    total = length if padded_to is None else padded_to
    if total < length:
        raise ContractError(f"cannot pad length {length} to {total}")
    s = np.ones(total)
    s[: length - 1] = 0.0
    return s


def stop_targets(lengths: Sequence[int], padded_to: int) -> np.ndarray:
    return np.stack([stop_token_target(int(n), padded_to) for n in lengths])


@dataclass
class LossBreakdown:
    coarse: float
    fine: float
    stop: float
    translator: float
    synth_blocks: list[float]
    synthesizer: float
    total: float

    def as_row(self) -> list[float]:
        return [self.coarse, self.fine, self.stop, *self.synth_blocks, self.total]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_row() + [self.translator, self.synthesizer])))


@dataclass
class TranslatorLoss:
    coarse: Tensor
    fine: Tensor
    stop: Tensor
    translator: Tensor


def translator_loss(out: TranslatorOutput, f_tgt: np.ndarray, s_tgt: np.ndarray, mask: np.ndarray | None = None) -> TranslatorLoss:
    """Coarse, fine and stop-token masked MSE terms and their sum, in that order."""
    f_tgt = np.asarray(f_tgt, dtype=np.float64)
    coarse, fine, stop, s_tgt = out.coarse, out.fine, out.stop, np.asarray(s_tgt, dtype=np.float64)
    if coarse.ndim == 2:
        coarse, fine = nx.reshape(coarse, (1,) + coarse.shape), nx.reshape(fine, (1,) + fine.shape)
        stop = nx.reshape(stop, (1,) + stop.shape)
        f_tgt, s_tgt = f_tgt[None], s_tgt[None]
    if stop.shape != s_tgt.shape:
        raise DimensionError(f"stop scores {stop.shape} vs stop targets {s_tgt.shape}")
    mask = np.ones(f_tgt.shape[:2]) if mask is None else np.atleast_2d(np.asarray(mask, dtype=np.float64))
    l_coarse = nx.masked_mse(coarse, f_tgt, mask)
    l_fine = nx.masked_mse(fine, f_tgt, mask)
    l_stop = nx.masked_mse(stop, s_tgt, mask)
    return TranslatorLoss(l_coarse, l_fine, l_stop, nx.add(nx.add(l_coarse, l_fine), l_stop))


def total_loss(translator_part: TranslatorLoss, synth_total: Tensor, synth_blocks: Sequence[Tensor]) -> tuple[LossBreakdown, Tensor]:
    total = nx.add(translator_part.translator, synth_total)
    breakdown = LossBreakdown(
        coarse=translator_part.coarse.item(),
        fine=translator_part.fine.item(),
        stop=translator_part.stop.item(),
        translator=translator_part.translator.item(),
        synth_blocks=[b.item() for b in synth_blocks],
        synthesizer=synth_total.item(),
        total=total.item(),
    )
    return breakdown, total


def synthesizer_input_select(step: int, boundary: int, f_tgt, f_pred):
    """Ground-truth target features before the phase boundary, the translator's fine output from it on."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    return f_tgt if step < boundary else f_pred


# optimisation ------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        sq += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


def adam_update(params: Sequence[Tensor], state: AdamState, cfg: TrainConfig) -> None:
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# batching -----------------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[int]
    f_src: np.ndarray
    src_mask: np.ndarray
    f_tgt: np.ndarray
    tgt_mask: np.ndarray
    s_tgt: np.ndarray
    mel: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ids)


def _pad(seqs: Sequence[np.ndarray], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs) if length is None else length
    out = np.zeros((len(seqs), n, seqs[0].shape[1]))
    mask = np.zeros((len(seqs), n))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return out, mask


def make_batch(pairs: Sequence[UtterancePair], pad_src: int | None = None, pad_tgt: int | None = None) -> Batch:
    if not pairs:
        raise ContractError("empty batch")
    f_src, src_mask = _pad([p.f_src for p in pairs], pad_src)
    f_tgt, tgt_mask = _pad([p.f_tgt for p in pairs], pad_tgt)
    r = len(pairs[0].mel) // len(pairs[0].f_tgt)
    mel, _ = _pad([p.mel for p in pairs], f_tgt.shape[1] * r)
    s_tgt = stop_targets([len(p.f_tgt) for p in pairs], f_tgt.shape[1])
    return Batch([p.index for p in pairs], f_src, src_mask, f_tgt, tgt_mask, s_tgt, mel)


class BatchSchedule:
    """Seeded epoch-wise shuffling into length buckets; step k always maps to the same batch."""

    def __init__(self, pairs: Sequence[UtterancePair], batch_size: int, seed: int, bucket_frames: int = 8):
        if not pairs:
            raise ContractError("no training pairs")
        self.pairs = list(pairs)
        self.batch_size = batch_size
        self.seed = seed
        self.bucket_frames = bucket_frames
        self._epoch_cache: tuple[int, list[list[int]]] | None = None
        self.batches_per_epoch = len(self._epoch(0))

    def _epoch(self, epoch: int) -> list[list[int]]:
        if self._epoch_cache and self._epoch_cache[0] == epoch:
            return self._epoch_cache[1]
        rng = np.random.default_rng([self.seed, 10, epoch])
        order = rng.permutation(len(self.pairs))
        buckets: dict[int, list[int]] = {}
        for i in order:
            buckets.setdefault((len(self.pairs[i].f_tgt) - 1) // self.bucket_frames, []).append(int(i))
        batches = []
        for key in sorted(buckets):
            members = buckets[key]
            batches += [members[j : j + self.batch_size] for j in range(0, len(members), self.batch_size)]
        batches = [batches[i] for i in rng.permutation(len(batches))]
        self._epoch_cache = (epoch, batches)
        return batches

    def batch(self, step: int) -> Batch:
        epoch, j = divmod(step, self.batches_per_epoch)
        return make_batch([self.pairs[i] for i in self._epoch(epoch)[j]])


# models ---------------------------------------------------------------------------------------


def build_models(cfg: RunConfig) -> tuple[Translator, Synthesizer]:
    seed = cfg.train.seed
    return (
        Translator(cfg.translator, np.random.default_rng([seed, 30])),
        Synthesizer(cfg.synth, np.random.default_rng([seed, 31])),
    )


def all_parameters(translator: Translator, synth: Synthesizer) -> list[Tensor]:
    return translator.parameters() + synth.parameters()


def expected_shapes(cfg: RunConfig) -> dict[str, tuple[int, ...]]:
    translator, synth = build_models(cfg)
    return {t.name: t.shape for t in all_parameters(translator, synth)}


@dataclass
class StepResult:
    breakdown: LossBreakdown
    translator_out: TranslatorOutput
    synth_out: SynthesizerOutput
    total: Tensor


def forward_losses(
    translator: Translator,
    synth: Synthesizer,
    batch: Batch,
    step: int,
    cfg: TrainConfig,
    rng: np.random.Generator | None,
) -> StepResult:
    """Full forward pass and loss for one batch (record on a tape to differentiate)."""
    if cfg.teacher_forcing:
        out = translator.forward_teacher_forced(batch.f_src, batch.f_tgt, batch.src_mask, batch.tgt_mask, rng)
    else:
        out = translator.forward_free_running(batch.f_src, batch.f_tgt.shape[1], batch.src_mask, batch.tgt_mask, rng)
    t_loss = translator_loss(out, batch.f_tgt, batch.s_tgt, batch.tgt_mask)
    pred = out.fine if cfg.synth_grad_to_translator else nx.detach(out.fine)
    features = synthesizer_input_select(step, cfg.phase_boundary, Tensor(batch.f_tgt), pred)
    s_out = synth.forward(features, batch.tgt_mask, rng)
    s_total, s_blocks = synthesizer_loss(s_out, batch.mel)
    breakdown, total = total_loss(t_loss, s_total, s_blocks)
    return StepResult(breakdown, out, s_out, total)


def train_step(
    batch: Batch,
    translator: Translator,
    synth: Synthesizer,
    opt: AdamState,
    step: int,
    cfg: TrainConfig,
) -> LossBreakdown:
    """zero grads -> forward -> backward -> clip -> Adam. Mutates parameters once."""
    params = all_parameters(translator, synth)
    nx.zero_grad(params)
    rng = np.random.default_rng([cfg.seed, 20, step])
    with Tape() as tape:
        result = forward_losses(translator, synth, batch, step, cfg, rng)
    if not result.breakdown.is_finite():
        tape.clear()
        raise NumericError(
            f"non-finite loss at step {step}, batch ids {batch.ids}: {result.breakdown}"
        )
    nx.backward(result.total, tape)
    if cfg.freeze_translator_in_joint_phase and step >= cfg.phase_boundary:
        params = synth.parameters()
    clip_grad_norm(params, cfg.grad_clip_norm)
    adam_update(params, opt, cfg)
    return result.breakdown


# loop ------------------------------------------------------------------------------------------


def make_checkpoint(step, translator, synth, opt, cfg: RunConfig, fingerprint: str = "") -> Checkpoint:
    params = {t.name: t.data for t in all_parameters(translator, synth)}
    return Checkpoint(
        step=step,
        params=params,
        adam_m=dict(opt.m),
        adam_v=dict(opt.v),
        adam_t=opt.t,
        config=cfg.to_dict(),
        corpus_fingerprint=fingerprint,
    )


def restore(ckpt: Checkpoint, translator: Translator, synth: Synthesizer) -> AdamState:
    """Load parameters and optimizer moments; all shapes are checked before anything changes."""
    check_shapes(ckpt, {t.name: t.shape for t in all_parameters(translator, synth)})
    for model in (translator, synth):
        model.load_state_dict({k: ckpt.params[k] for k in model.params})
    return AdamState(m=dict(ckpt.adam_m), v=dict(ckpt.adam_v), t=ckpt.adam_t)


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:07d}.bin"


def format_metrics(step: int, b: LossBreakdown, seconds: float) -> str:
    return "\t".join([str(step)] + [repr(float(v)) for v in b.as_row()] + [f"{seconds:.3f}"]) + "\n"


@dataclass
class TrainResult:
    translator: Translator
    synth: Synthesizer
    opt: AdamState
    history: list[LossBreakdown]
    checkpoints: list[Path]
    step: int


def subset_pairs(pairs: Sequence[UtterancePair], fraction: float, seed: int) -> list[UtterancePair]:
    """A seeded prefix of a fixed permutation, so smaller fractions are nested in larger ones."""
    if fraction >= 1.0:
        return list(pairs)
    order = np.random.default_rng([seed, 40]).permutation(len(pairs))
    n = max(1, int(round(fraction * len(pairs))))
    return [pairs[i] for i in sorted(order[:n])]


def train_loop(
    pairs: Sequence[UtterancePair],
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    fingerprint: str = "",
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Train for ``cfg.train.max_steps`` updates, checkpointing every ``checkpoint_interval``."""
    tc = cfg.train
    translator, synth = build_models(cfg)
    opt = AdamState()
    step = 0
    if resume is not None:
        opt = restore(resume, translator, synth)
        step = resume.step
    schedule = BatchSchedule(subset_pairs(pairs, tc.train_fraction, tc.seed), tc.batch_size, tc.seed, tc.bucket_frames)
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.tsv", "a")
    history, written = [], []
    started = time.perf_counter()
    try:
        if tc.max_steps == 0 and out is not None:
            path = checkpoint_path(out, 0)
            save_checkpoint(path, make_checkpoint(0, translator, synth, opt, cfg, fingerprint))
            written.append(path)
        while step < tc.max_steps:
            b = train_step(schedule.batch(step), translator, synth, opt, step, tc)
            history.append(b)
            if metrics is not None:
                metrics.write(format_metrics(step, b, time.perf_counter() - started))
                metrics.flush()
            if on_step is not None:
                on_step(step, b)
            step += 1
            if out is not None and (step % tc.checkpoint_interval == 0 or step == tc.max_steps):
                path = checkpoint_path(out, step)
                save_checkpoint(path, make_checkpoint(step, translator, synth, opt, cfg, fingerprint))
                written.append(path)
    finally:
        if metrics is not None:
            metrics.close()
    return TrainResult(translator, synth, opt, history, written, step)
