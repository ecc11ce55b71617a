"""Decoupled spatial/temporal self-attention.

Tensors use the network layout ``(batch, joints, frames, channels)``.  A
spatial module attends over joints with frames folded into channels; a
temporal module attends over frames with joints folded into channels.
Internally both run on an element-major view ``(batch, E, F, C)`` where E is
the attended axis and F the folded one, so the temporal module is the
spatial one applied to the transposed tensor.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensorkit as tk
from .tensorkit import Parameter, Tensor

SPATIAL = "spatial"
TEMPORAL = "temporal"
AXES = (SPATIAL, TEMPORAL)
STRATEGIES = ("a", "b", "c")
SCORE_NORMS = ("tanh", "softmax")
PE_BASE = 10000.0


@dataclass
class AttentionConfig:
    axis: str = SPATIAL
    strategy: str = "c"
    heads: int = 3
    c_in: int = 64
    c_e: int = 16
    c_out: int = 64
    use_sgr: bool = False
    alpha: float = 1.0
    score_norm: str = "tanh"
    scale_logits: bool = True
    # strategy b/c: mean over frames (pairs) instead of the raw sum
    average_frames: bool = True
    use_pe: bool = True
    # divide map @ values by the element count; tanh maps are not row-normalized
    mean_values: bool = True
    leaky_slope: float = tk.DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.score_norm not in SCORE_NORMS:
            raise ValueError(f"score_norm must be one of {SCORE_NORMS}")
        for name in ("heads", "c_in", "c_e", "c_out"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.use_sgr and self.axis == TEMPORAL:
            raise ValueError("spatial global regularization is only allowed on the spatial axis")


@dataclass
class AttentionMap:
    values: np.ndarray  # E x E
    layer_index: int
    head_index: int
    axis: str


# --------------------------------------------------------------------------
# position encoding


def sinusoidal_pe(p: int, i: int, width: int) -> float:
    """Sine code for even dimensions, cosine for odd ones."""
    if not 0 <= i < width:
        raise ValueError(f"dimension index {i} outside [0, {width})")
    angle = p / PE_BASE ** (2 * (i // 2) / width)
    return math.sin(angle) if i % 2 == 0 else math.cos(angle)


def pe_table(length: int, width: int) -> np.ndarray:
    """Codes for positions ``0..length-1``, shape ``(length, width)``."""
    p = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(width)
    angle = p / PE_BASE ** (2 * (i // 2) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def decoupled_pe(num_joints: int, num_frames: int, width: int, axis: str) -> np.ndarray:
    """The ``(N, T, width)`` code grid for one axis.

    Spatial codes index the joint and repeat across frames; temporal codes
    index the frame and repeat across joints.
    """
    if axis == SPATIAL:
        table = pe_table(num_joints, width)[:, None, :]
    elif axis == TEMPORAL:
        table = pe_table(num_frames, width)[None, :, :]
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return np.broadcast_to(table, (num_joints, num_frames, width)).copy()


def add_decoupled_pe(x: Tensor, axis: str) -> Tensor:
    x = tk._as_tensor(x)
    n, t, c = x.shape[-3:]
    return tk.add_bias(x, Tensor(decoupled_pe(n, t, c, axis)))


# --------------------------------------------------------------------------
# attention scores


def _to_element_major(x: Tensor, axis: str) -> Tensor:
    return x if axis == SPATIAL else tk.transpose(x, (0, 2, 1, 3))


def _batched(x: Tensor):
    x = tk._as_tensor(x)
    if x.ndim == 3:
        return tk.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise tk.ShapeError(f"expected (N, T, C) or (B, N, T, C), got {x.shape}")
    return x, False


def _logits_em(q: Tensor, k: Tensor, strategy: str, scale_logits: bool,
               average_frames: bool) -> Tensor:
    b, e, f, ce = q.shape
    if strategy == "a":
        qf = tk.transpose(q, (0, 2, 1, 3))
        kf = tk.transpose(k, (0, 2, 3, 1))
        logits = tk.matmul(qf, kf)  # b, f, e, e
        factor = 1.0
    elif strategy == "b":
        # sum over all (t, tau) pairs factorises into (sum_t q_t)(sum_tau k_tau)'
        qs = tk.tsum(q, axis=2)
        ks = tk.transpose(tk.tsum(k, axis=2), (0, 2, 1))
        logits = tk.matmul(qs, ks)
        factor = 1.0 / (f * f) if average_frames else 1.0
    elif strategy == "c":
        q2 = tk.reshape(q, (b, e, f * ce))
        k2 = tk.transpose(tk.reshape(k, (b, e, f * ce)), (0, 2, 1))
        logits = tk.matmul(q2, k2)
        factor = 1.0 / f if average_frames else 1.0
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    if scale_logits:
        factor /= math.sqrt(ce)
    return logits if factor == 1.0 else tk.scale(logits, factor)


def attention_logits(xq: Tensor, xk: Tensor, strategy: str = "c", axis: str = SPATIAL,
                     scale_logits: bool = True, average_frames: bool = True) -> Tensor:
    """Raw score maps from query/key embeddings laid out as ``(…, N, T, Ce)``.

    Strategy ``a`` returns one map per frame (per joint on the temporal
    axis), shape ``(…, F, E, E)``; ``b`` and ``c`` return one shared
    ``(…, E, E)`` map.
    """
    xq, squeeze = _batched(xq)
    xk, _ = _batched(xk)
    if xq.shape != xk.shape:
        raise tk.ShapeError(f"embedding mismatch: {xq.shape} vs {xk.shape}")
    logits = _logits_em(_to_element_major(xq, axis), _to_element_major(xk, axis),
                        strategy, scale_logits, average_frames)
    return tk.reshape(logits, logits.shape[1:]) if squeeze else logits


def normalize_scores(logits: Tensor, score_norm: str) -> Tensor:
    if score_norm == "tanh":
        return tk.tanh(logits)
    if score_norm == "softmax":
        return tk.softmax_rows(logits)
    raise ValueError(f"unknown score normalization {score_norm!r}")


def apply_sgr(scores: Tensor, g: Tensor, alpha: float, axis: str = SPATIAL) -> Tensor:
    """Add the shared global map, scaled by ``alpha``, to normalized scores."""
    if axis != SPATIAL:
        raise ValueError("spatial global regularization is only added for spatial attention")
    return tk.add_bias(scores, tk.scale(g, alpha))


def _apply_map_em(a: Tensor, x: Tensor, strategy: str, mean_values: bool) -> Tensor:
    b, e, f, c = x.shape
    if strategy == "a":
        out = tk.transpose(tk.matmul(a, tk.transpose(x, (0, 2, 1, 3))), (0, 2, 1, 3))
    else:
        out = tk.reshape(tk.matmul(a, tk.reshape(x, (b, e, f * c))), (b, e, f, c))
    return tk.scale(out, 1.0 / e) if mean_values else out


def _head_em(xp: Tensor, head: dict, cfg: AttentionConfig, g: Optional[Tensor]):
    q = tk.linear(xp, head["query.weight"], head["query.bias"])
    k = tk.linear(xp, head["key.weight"], head["key.bias"])
    logits = _logits_em(q, k, cfg.strategy, cfg.scale_logits, cfg.average_frames)
    scores = normalize_scores(logits, cfg.score_norm)
    if g is not None:
        scores = apply_sgr(scores, g, cfg.alpha, cfg.axis)
    return _apply_map_em(scores, xp, cfg.strategy, cfg.mean_values), scores


def attention_head_forward(x_pe: Tensor, head: dict, cfg: AttentionConfig,
                           g: Optional[Tensor] = None):
    """One attention head on an already position-encoded ``(…, N, T, C)`` input.

    ``head`` maps ``query.weight``, ``query.bias``, ``key.weight`` and
    ``key.bias`` to tensors.  Returns the ``(…, N, T, C)`` features and the
    normalized (and regularized) score map(s).
    """
    x_pe, squeeze = _batched(x_pe)
    feats, scores = _head_em(_to_element_major(x_pe, cfg.axis), head, cfg, g)
    if cfg.axis == TEMPORAL:
        feats = tk.transpose(feats, (0, 2, 1, 3))
    if squeeze:
        feats = tk.reshape(feats, feats.shape[1:])
        scores = tk.reshape(scores, scores.shape[1:])
    return feats, scores


# --------------------------------------------------------------------------
# full module


class AttentionModule:
    """Multi-head attention block with feed-forward and two residual paths.

    ``num_elements`` is the joint count; it sizes the global map when the
    module regularizes spatial attention.
    """

    def __init__(self, cfg: AttentionConfig, num_elements: int,
                 rng: np.random.Generator, prefix: str = ""):
        self.cfg = cfg
        self.prefix = f"{prefix}{cfg.axis}."
        self._params: list = []
        self.heads = []
        for h in range(cfg.heads):
            head = {}
            for role in ("query", "key"):
                head[f"{role}.weight"] = self._weight(f"head{h}.{role}.weight", rng,
                                                      cfg.c_in, cfg.c_e)
                head[f"{role}.bias"] = self._zeros(f"head{h}.{role}.bias", (cfg.c_e,))
            self.heads.append(head)
        self.out_w = self._weight("out.weight", rng, cfg.heads * cfg.c_in, cfg.c_out)
        self.out_b = self._zeros("out.bias", (cfg.c_out,))
        if cfg.c_in != cfg.c_out:
            self.res_w = self._weight("residual.weight", rng, cfg.c_in, cfg.c_out)
            self.res_b = self._zeros("residual.bias", (cfg.c_out,))
        else:
            self.res_w = self.res_b = None
        self.ff1_w = self._weight("ff1.weight", rng, cfg.c_out, cfg.c_out)
        self.ff1_b = self._zeros("ff1.bias", (cfg.c_out,))
        self.ff2_w = self._weight("ff2.weight", rng, cfg.c_out, cfg.c_out)
        self.ff2_b = self._zeros("ff2.bias", (cfg.c_out,))
        self.global_map = (
            self._zeros("sgr.global_map", (num_elements, num_elements))
            if cfg.use_sgr else None
        )
        self.last_scores: list = []

    def _weight(self, name, rng, fan_in, fan_out) -> Parameter:
        p = Parameter(tk.uniform_init(rng, (fan_in, fan_out), fan_in), self.prefix + name)
        self._params.append(p)
        return p

    def _zeros(self, name, shape) -> Parameter:
        p = Parameter(np.zeros(shape), self.prefix + name)
        self._params.append(p)
        return p

    def parameters(self) -> list:
        return list(self._params)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        slope = cfg.leaky_slope
        x = tk._as_tensor(x)
        if x.ndim != 4 or x.shape[-1] != cfg.c_in:
            raise tk.ShapeError(
                f"{self.prefix[:-1]} expects (B, N, T, {cfg.c_in}) input, got {x.shape}")
        xe = _to_element_major(x, cfg.axis)
        _, e, f, c = xe.shape
        if self.global_map is not None and self.global_map.shape != (e, e):
            raise tk.ShapeError(
                f"global map {self.global_map.shape} does not fit {e} elements")
        xp = tk.add_bias(xe, Tensor(decoupled_pe(e, f, c, SPATIAL))) if cfg.use_pe else xe

        feats, self.last_scores = [], []
        for head in self.heads:
            hf, scores = _head_em(xp, head, cfg, self.global_map)
            feats.append(hf)
            self.last_scores.append(scores.data)
        cat = tk.concat_last(feats) if len(feats) > 1 else feats[0]

        res = xe if self.res_w is None else tk.linear(xe, self.res_w, self.res_b)
        h = tk.leaky_relu(tk.add(tk.linear(cat, self.out_w, self.out_b), res), slope)
        ff = tk.linear(tk.leaky_relu(tk.linear(h, self.ff1_w, self.ff1_b), slope),
                       self.ff2_w, self.ff2_b)
        out = tk.leaky_relu(tk.add(ff, h), slope)
        return out if cfg.axis == SPATIAL else tk.transpose(out, (0, 2, 1, 3))

    __call__ = forward

    def maps(self, sample: int = 0) -> list:
        """E x E maps of the last forward pass, one per head.

        Strategy ``a`` keeps one map per frame; the export reports their mean.
        """
        out = []
        for scores in self.last_scores:
            m = scores[sample]
            out.append(m.mean(axis=0) if m.ndim == 3 else m.copy())
        return out


def module_param_count(cfg: AttentionConfig, num_elements: int) -> int:
    n = cfg.heads * 2 * (cfg.c_in * cfg.c_e + cfg.c_e)
    n += cfg.heads * cfg.c_in * cfg.c_out + cfg.c_out
    if cfg.c_in != cfg.c_out:
        n += cfg.c_in * cfg.c_out + cfg.c_out
    n += 2 * (cfg.c_out * cfg.c_out + cfg.c_out)
    if cfg.use_sgr:
        n += num_elements * num_elements
    return n


# --------------------------------------------------------------------------
# complexity


def flop_estimate(strategy: str, n: int, t: int, c: int) -> int:
    """Multiply-adds spent computing spatial plus temporal score maps."""
    if min(n, t, c) < 1:
        raise ValueError("dimensions must be positive")
    if strategy in ("a", "c"):
        return t * n * n * c + n * t * t * c
    if strategy == "b":
        return t * t * n * n * c + n * n * t * t * c
    if strategy == "flat":
        return (n * t) ** 2 * c
    raise ValueError(f"unknown strategy {strategy!r}")


# --------------------------------------------------------------------------
# export

CSV_HEADER = ("layer", "head", "axis", "row", "col", "value")


def attention_csv(maps) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for m in maps:
        values = np.asarray(m.values)
        for r in range(values.shape[0]):
            for c in range(values.shape[1]):
                writer.writerow((m.layer_index, m.head_index, m.axis, r, c,
                                 repr(float(values[r, c]))))
    return buf.getvalue()


def write_attention_csv(maps, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(attention_csv(maps))
