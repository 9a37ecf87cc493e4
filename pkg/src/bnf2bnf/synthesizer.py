"""Non-autoregressive feature-to-mel synthesizer built from light convolution blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import SynthConfig
from .errors import ContractError, DimensionError
from .layers import Model
from .numerics import Tensor


@dataclass
class SynthesizerOutput:
    blocks: list[Tensor]  # y_1..y_N, each [B, T_mel, d_mel]
    mask: np.ndarray  # [B, T_mel]

    @property
    def prediction(self) -> Tensor:
        return self.blocks[-1]


class Synthesizer(Model):
    prefix = "synth."

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.conv_channels
        self._dense(rng, "in_proj", cfg.d_in, c)
        for i in range(cfg.n_blocks):
            self._conv(rng, f"blocks.{i}.glu", cfg.glu_kernel, c, 2 * c)
            self._add(f"blocks.{i}.dw.kernel", rng.uniform(-1, 1, (cfg.dw_kernel, c)) * np.sqrt(3.0 / cfg.dw_kernel))
            self._add(f"blocks.{i}.norm.gain", np.ones(c))
            self._add(f"blocks.{i}.norm.bias", np.zeros(c))
            self._dense(rng, f"blocks.{i}.out", c, cfg.d_mel)

    def block_forward(self, i: int, x: Tensor, mask: np.ndarray | None, rng: np.random.Generator | None) -> Tensor:
        """GLU -> depthwise conv -> dropout -> layer norm, plus the residual input."""
        c = self.cfg.conv_channels
        if x.shape[-1] != c:
            raise DimensionError(f"block input {x.shape} vs conv_channels {c}")
        m = None if mask is None else mask[..., None]
        a = nx.conv1d(x, self.p(f"blocks.{i}.glu.weight"), self.p(f"blocks.{i}.glu.bias"))
        gated = nx.mul(a[..., :c], nx.sigmoid(a[..., c:]))
        if m is not None:
            gated = nx.mul(gated, m)
        inner = nx.depthwise_conv1d(gated, self.p(f"blocks.{i}.dw.kernel"), self.cfg.dw_stride)
        inner = nx.dropout(inner, self.cfg.dropout_rate, rng)
        inner = nx.layer_norm(inner, self.p(f"blocks.{i}.norm.gain"), self.p(f"blocks.{i}.norm.bias"))
        out = nx.add(inner, x)
        return out if m is None else nx.mul(out, m)

    def forward(
        self, features: Tensor | np.ndarray, mask: np.ndarray | None = None, rng: np.random.Generator | None = None
    ) -> SynthesizerOutput:
        """``rng`` None means eval mode (dropout off). Accepts [T, d] or [B, T, d]."""
        features = nx.as_tensor(features)
        single = features.ndim == 2
        if single:
            features = nx.reshape(features, (1,) + features.shape)
        if features.shape[1] == 0:
            raise ContractError("synthesizer needs at least one frame")
        if features.shape[-1] != self.cfg.d_in:
            raise DimensionError(f"synthesizer input {features.shape} vs d_in {self.cfg.d_in}")
        r = self.cfg.upsample_factor
        mask = np.ones(features.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
        mask = np.repeat(mask, r, axis=1)
        x = nx.repeat_frames(features, r)
        x = nx.mul(nx.affine(x, self.p("in_proj.weight"), self.p("in_proj.bias")), mask[..., None])
        outputs = []
        for i in range(self.cfg.n_blocks):
            x = self.block_forward(i, x, mask, rng)
            outputs.append(nx.affine(x, self.p(f"blocks.{i}.out.weight"), self.p(f"blocks.{i}.out.bias")))
        if single:
            outputs = [nx.slice_(y, 0) for y in outputs]
            mask = mask[0]
        return SynthesizerOutput(blocks=outputs, mask=mask)


def synthesizer_loss(output: SynthesizerOutput, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[Tensor, list[Tensor]]:
    """Sum over blocks of the masked mean-squared error of each y_i against the target mel."""
    target = np.asarray(target, dtype=np.float64)
    mask = output.mask if mask is None else mask
    per_block = []
    for y in output.blocks:
        if y.shape != target.shape:
            raise DimensionError(f"synthesizer loss: block output {y.shape} vs target {target.shape}")
        if y.ndim == 2:
            per_block.append(nx.masked_mse(nx.reshape(y, (1,) + y.shape), target[None], np.atleast_2d(mask)))
        else:
            per_block.append(nx.masked_mse(y, target, mask))
    total = per_block[0]
    for term in per_block[1:]:
        total = nx.add(total, term)
    return total, per_block


def format_grid(values: np.ndarray) -> str:
    """Plain-text numeric grid, one frame per line."""
    return "\n".join(" ".join(f"{v:.9e}" for v in row) for row in np.atleast_2d(values)) + "\n"
