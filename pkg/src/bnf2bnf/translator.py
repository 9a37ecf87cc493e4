"""Autoregressive feature-to-feature translation decoder.

Prenet -> LSTM stack -> GMM attention over the source features -> frame and
stop projections, followed by a convolutional postnet that only sees a
gradient-detached copy of the coarse frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import TranslatorConfig
from .errors import ContractError, DimensionError
from .layers import Model
from .numerics import Tensor


@dataclass
class AttentionState:
    mu: Tensor  # [B, K] mixture means, in source-frame units
    context: Tensor  # [B, d_in]


@dataclass
class DecoderState:
    h: list[Tensor]
    c: list[Tensor]
    attention: AttentionState
    prev_frame: Tensor


@dataclass
class TranslatorOutput:
    coarse: Tensor  # f_c_pred [B, T_out, d_out]
    fine: Tensor  # f_pred
    residual: Tensor  # postnet output; fine == coarse + residual
    stop: Tensor  # s_pred [B, T_out], post-sigmoid
    alignment: np.ndarray  # [B, T_out, T_in]
    means: np.ndarray  # [B, T_out, K]
    cap_hit: bool = False
    lengths: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.coarse.shape[-2]


class Translator(Model):
    prefix = "translator."

    def __init__(self, cfg: TranslatorConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.d_out] + list(cfg.prenet_dims)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self._dense(rng, f"prenet.{i}", a, b)
        h = cfg.lstm_dim
        for layer in range(cfg.lstm_layers):
            n_in = (dims[-1] + cfg.d_in) if layer == 0 else h
            self._add(f"lstm.{layer}.weight", _lstm_init(rng, n_in, h))
            bias = np.zeros(4 * h)
            bias[h : 2 * h] = 1.0
            self._add(f"lstm.{layer}.bias", bias)
        self._dense(rng, "attention.hidden", h, cfg.attn_hidden)
        self._dense(rng, "attention.out", cfg.attn_hidden, 3 * cfg.attn_mixtures)
        # mean increments start at one source frame per step (softplus(log(e - 1)) == 1)
        k = cfg.attn_mixtures
        self.p("attention.out.bias").data[k : 2 * k] = np.log(np.e - 1.0)
        self._dense(rng, "frame_proj", h + cfg.d_in, cfg.d_out)
        self._dense(rng, "stop_proj", h + cfg.d_in, 1)
        chans = [cfg.d_out] + [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.d_out]
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            self._conv(rng, f"postnet.{i}", cfg.postnet_kernel, a, b)

    # parameter groups -------------------------------------------------------

    def decoder_parameters(self) -> list[Tensor]:
        """Everything upstream of the coarse output."""
        return [t for k, t in self.params.items() if ".postnet." not in k]

    def postnet_parameters(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if ".postnet." in k]

    # building blocks --------------------------------------------------------

    def prenet(self, frames: Tensor, rng: np.random.Generator | None) -> Tensor:
        x = frames
        for i in range(len(self.cfg.prenet_dims)):
            x = nx.relu(nx.affine(x, self.p(f"prenet.{i}.weight"), self.p(f"prenet.{i}.bias")))
            x = nx.dropout(x, self.cfg.prenet_dropout, rng)
        return x

    def initial_state(self, batch: int) -> DecoderState:
        cfg = self.cfg
        zeros = lambda n: Tensor(np.zeros((batch, n)))  # noqa: E731
        return DecoderState(
            h=[zeros(cfg.lstm_dim) for _ in range(cfg.lstm_layers)],
            c=[zeros(cfg.lstm_dim) for _ in range(cfg.lstm_layers)],
            attention=AttentionState(mu=zeros(cfg.attn_mixtures), context=zeros(cfg.d_in)),
            prev_frame=zeros(cfg.d_out),
        )

    def attention_step(
        self, query: Tensor, memory: Tensor, state: AttentionState, src_mask: np.ndarray | None = None
    ) -> tuple[Tensor, Tensor, AttentionState]:
        """GMM attention: returns (context [B, d_in], weights [B, T_in], new state)."""
        if memory.shape[1] == 0:
            raise ContractError("attention over an empty memory")
        hidden = nx.tanh(nx.affine(query, self.p("attention.hidden.weight"), self.p("attention.hidden.bias")))
        raw = nx.affine(hidden, self.p("attention.out.weight"), self.p("attention.out.bias"))
        weights, mu, _ = nx.gmm_alignment(raw, state.mu, memory.shape[1], self.cfg.sigma_min)
        if src_mask is not None:
            weights = nx.mul(weights, src_mask)
        context = nx.weighted_sum(weights, memory)
        return context, weights, AttentionState(mu=mu, context=context)

    def _recurrent(self, pre: Tensor, state: DecoderState, memory: Tensor, src_mask) -> tuple[Tensor, Tensor, DecoderState]:
        x = nx.concat([pre, state.attention.context], axis=-1)
        hs, cs = [], []
        for layer in range(self.cfg.lstm_layers):
            h, c = nx.lstm_cell_step(
                x, state.h[layer], state.c[layer], self.p(f"lstm.{layer}.weight"), self.p(f"lstm.{layer}.bias")
            )
            hs.append(h)
            cs.append(c)
            x = h
        context, weights, att = self.attention_step(x, memory, state.attention, src_mask)
        return x, weights, DecoderState(h=hs, c=cs, attention=att, prev_frame=state.prev_frame)

    def _project(self, h: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
        feats = nx.concat([h, context], axis=-1)
        coarse = nx.affine(feats, self.p("frame_proj.weight"), self.p("frame_proj.bias"))
        stop = nx.sigmoid(nx.affine(feats, self.p("stop_proj.weight"), self.p("stop_proj.bias")))
        return coarse, stop

    def decoder_step(
        self,
        prev_frame: Tensor,
        state: DecoderState,
        memory: Tensor,
        src_mask: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor, DecoderState, Tensor]:
        """One autoregressive step on a batch. Returns (coarse [B, d_out], stop [B], state, weights)."""
        if prev_frame.shape[-1] != self.cfg.d_out:
            raise DimensionError(f"decoder_step: previous frame {prev_frame.shape} vs d_out {self.cfg.d_out}")
        if memory.shape[-1] != self.cfg.d_in:
            raise DimensionError(f"decoder_step: memory {memory.shape} vs d_in {self.cfg.d_in}")
        pre = self.prenet(prev_frame, rng)
        h, weights, new_state = self._recurrent(pre, state, memory, src_mask)
        coarse, stop = self._project(h, new_state.attention.context)
        new_state.prev_frame = coarse
        return coarse, nx.reshape(stop, stop.shape[:-1]), new_state, weights

    def postnet(self, coarse: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Returns (fine, residual) with fine = detach(coarse) + residual."""
        if coarse.shape[-2] < 1:
            raise ContractError("postnet needs at least one frame")
        base = nx.detach(coarse)
        m = None if mask is None else mask[..., None]
        x = base if m is None else nx.mul(base, m)
        n = self.cfg.postnet_layers
        for i in range(n):
            x = nx.conv1d(x, self.p(f"postnet.{i}.weight"), self.p(f"postnet.{i}.bias"))
            if i < n - 1:
                x = nx.tanh(x)
            if m is not None:
                x = nx.mul(x, m)
        return nx.add(base, x), x

    # sequence-level ------------------------------------------------------------

    def forward_teacher_forced(
        self,
        f_src: np.ndarray,
        f_tgt: np.ndarray,
        src_mask: np.ndarray | None = None,
        tgt_mask: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> TranslatorOutput:
        """Decode ``T_tgt`` steps consuming ground-truth previous frames.

        Accepts single sequences ([T, d]) or padded batches ([B, T, d]).
        """
        f_src, f_tgt, src_mask, tgt_mask, single = _batchify(f_src, f_tgt, src_mask, tgt_mask)
        b, t_out, _ = f_tgt.shape
        if f_tgt.shape[-1] != self.cfg.d_out or f_src.shape[-1] != self.cfg.d_in:
            raise DimensionError(f"teacher forcing: source {f_src.shape} / target {f_tgt.shape} vs config dims")
        memory = Tensor(f_src * src_mask[..., None])
        prev = np.concatenate([np.zeros((b, 1, self.cfg.d_out)), f_tgt[:, :-1]], axis=1)
        pre_all = self.prenet(Tensor(prev), rng)
        state = self.initial_state(b)
        hs, ctxs, aligns, mus = [], [], [], []
        for t in range(t_out):
            h, weights, state = self._recurrent(pre_all[:, t], state, memory, src_mask)
            hs.append(h)
            ctxs.append(state.attention.context)
            aligns.append(weights.data)
            mus.append(state.attention.mu.data)
        coarse, stop = self._project(nx.stack(hs, axis=1), nx.stack(ctxs, axis=1))
        return self._finish(coarse, stop, tgt_mask, aligns, mus, single, lengths=tgt_mask.sum(axis=1))

    def forward_free_running(
        self,
        f_src: np.ndarray,
        n_steps: int,
        src_mask: np.ndarray | None = None,
        tgt_mask: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> TranslatorOutput:
        """Fixed-length decode feeding back (detached) predictions; used when teacher forcing is off."""
        dummy = np.zeros(f_src.shape[:-2] + (n_steps, self.cfg.d_out))
        f_src, _, src_mask, tgt_mask, single = _batchify(f_src, dummy, src_mask, tgt_mask)
        memory = Tensor(f_src * src_mask[..., None])
        state = self.initial_state(f_src.shape[0])
        frames, stops, aligns, mus = [], [], [], []
        prev = state.prev_frame
        for _ in range(n_steps):
            coarse, stop, state, weights = self.decoder_step(prev, state, memory, src_mask, rng)
            frames.append(coarse)
            stops.append(stop)
            aligns.append(weights.data)
            mus.append(state.attention.mu.data)
            prev = nx.detach(coarse)
        coarse = nx.stack(frames, axis=1)
        stop = nx.stack(stops, axis=1)
        stop = nx.reshape(stop, stop.shape + (1,))
        return self._finish(coarse, stop, tgt_mask, aligns, mus, single, lengths=tgt_mask.sum(axis=1))

    def _finish(self, coarse, stop, tgt_mask, aligns, mus, single, lengths=None, cap_hit=False) -> TranslatorOutput:
        coarse = nx.mul(coarse, tgt_mask[..., None])
        fine, residual = self.postnet(coarse, tgt_mask)
        stop = nx.reshape(stop, stop.shape[:-1])
        out = TranslatorOutput(
            coarse=coarse,
            fine=fine,
            residual=residual,
            stop=stop,
            alignment=np.stack(aligns, axis=1),
            means=np.stack(mus, axis=1),
            cap_hit=cap_hit,
            lengths=lengths,
        )
        return _unbatch(out) if single else out

    def infer(
        self, f_src: np.ndarray, rng: np.random.Generator | None = None, max_steps: int | None = None
    ) -> TranslatorOutput:
        """Autoregressive decoding of one utterance until stop > 0.5 or the step cap."""
        f_src = np.asarray(f_src, dtype=np.float64)
        if f_src.ndim != 2 or f_src.shape[0] == 0:
            raise ContractError(f"infer expects a non-empty [T, d_in] sequence, got {f_src.shape}")
        cap = self.cfg.max_decode_steps if max_steps is None else max_steps
        if not self.cfg.prenet_dropout_at_inference:
            rng = None
        memory = Tensor(f_src[None])
        state = self.initial_state(1)
        prev = state.prev_frame
        frames, stops, aligns, mus = [], [], [], []
        stopped = False
        while len(frames) < cap:
            coarse, stop, state, weights = self.decoder_step(prev, state, memory, None, rng)
            frames.append(coarse)
            stops.append(stop)
            aligns.append(weights.data)
            mus.append(state.attention.mu.data)
            if stop.data[0] > 0.5:
                stopped = True
                break
            if self.cfg.feedback == "fine":
                fine, _ = self.postnet(nx.stack(frames, axis=1))
                prev = Tensor(fine.data[:, -1])
            else:
                prev = coarse
        coarse = nx.stack(frames, axis=1)
        stop = nx.reshape(nx.stack(stops, axis=1), (1, len(stops), 1))
        mask = np.ones((1, len(frames)))
        out = self._finish(coarse, stop, mask, aligns, mus, single=True, lengths=np.array([len(frames)]),
                           cap_hit=not stopped)
        return out


def _lstm_init(rng, n_in: int, h: int) -> np.ndarray:
    w = np.empty((n_in + h, 4 * h))
    for g in range(4):
        w[:, g * h : (g + 1) * h] = rng.uniform(-1, 1, (n_in + h, h)) * np.sqrt(6.0 / (n_in + 2 * h))
    return w


def _batchify(f_src, f_tgt, src_mask, tgt_mask):
    f_src = np.asarray(f_src, dtype=np.float64)
    f_tgt = np.asarray(f_tgt, dtype=np.float64)
    if f_src.ndim != f_tgt.ndim or f_src.ndim not in (2, 3):
        raise DimensionError(f"expected [T, d] or [B, T, d] sequences, got {f_src.shape} and {f_tgt.shape}")
    single = f_src.ndim == 2
    if single:
        f_src, f_tgt = f_src[None], f_tgt[None]
    if f_src.shape[1] == 0 or f_tgt.shape[1] == 0:
        raise ContractError("source and target sequences must be non-empty")
    if f_src.shape[0] != f_tgt.shape[0]:
        raise DimensionError(f"batch sizes differ: {f_src.shape} vs {f_tgt.shape}")
    src_mask = np.ones(f_src.shape[:2]) if src_mask is None else np.asarray(src_mask, dtype=np.float64).reshape(f_src.shape[:2])
    tgt_mask = np.ones(f_tgt.shape[:2]) if tgt_mask is None else np.asarray(tgt_mask, dtype=np.float64).reshape(f_tgt.shape[:2])
    return f_src, f_tgt, src_mask, tgt_mask, single


def _unbatch(out: TranslatorOutput) -> TranslatorOutput:
    """Drop the leading batch axis of a single-utterance output (values only, graph kept)."""
    return TranslatorOutput(
        coarse=nx.slice_(out.coarse, 0),
        fine=nx.slice_(out.fine, 0),
        residual=nx.slice_(out.residual, 0),
        stop=nx.slice_(out.stop, 0),
        alignment=out.alignment[0],
        means=out.means[0],
        cap_hit=out.cap_hit,
        lengths=out.lengths,
    )


def format_alignment(alignment: np.ndarray) -> str:
    """Plain-text grid, one decoder step per line."""
    return "\n".join(" ".join(f"{v:.6e}" for v in row) for row in np.atleast_2d(alignment)) + "\n"
