"""Forward-only shifted-window attention primitives and the fluence MSE loss.

Tensors are ``(C, D, H, W)`` numpy arrays.  Windows are ``(wd, wh, ww)``
token boxes; volumes are zero-padded at the high end of each axis up to a
window multiple and padded tokens never attend to real ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .volgrid import N_BEAMS, FluenceSet


def _check_tensor(t):
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeError(f"expected a (C, D, H, W) tensor, got ndim={t.ndim}")
    if min(t.shape) < 1:
        raise ShapeError(f"tensor dims must be >= 1, got {t.shape}")
    return t


def _triple(v, name):
    v = tuple(int(x) for x in (v if np.ndim(v) else (v, v, v)))
    if len(v) != 3:
        raise ShapeError(f"{name} needs three components")
    return v


@dataclass(frozen=True)
class PaddingRecord:
    """Everything :func:`window_reverse` needs to undo :func:`window_partition`."""

    original_shape: tuple  # (C, D, H, W)
    padded_shape: tuple  # (C, Dp, Hp, Wp)
    window: tuple

    @property
    def grid(self):
        """Number of windows along (D, H, W)."""
        return tuple(p // w for p, w in zip(self.padded_shape[1:], self.window))

    @property
    def n_windows(self):
        g = self.grid
        return g[0] * g[1] * g[2]

    @property
    def tokens_per_window(self):
        return int(np.prod(self.window))


def pad_to_window(t, window):
    t = _check_tensor(t)
    window = _triple(window, "window")
    if min(window) < 1:
        raise ShapeError("window dims must be >= 1")
    pads = [(-n) % w for n, w in zip(t.shape[1:], window)]
    padded = np.pad(t, [(0, 0)] + [(0, p) for p in pads]) if any(pads) else t
    return padded, PaddingRecord(tuple(t.shape), tuple(padded.shape), window)


def window_partition(t, window):
    """Split a tensor into non-overlapping windows.

    Returns ``(blocks, record)`` with ``blocks`` of shape
    ``(n_windows, wd*wh*ww, C)``; windows are ordered D-major, tokens inside a
    window W-fastest.
    """
    padded, rec = pad_to_window(t, window)
    c = padded.shape[0]
    gd, gh, gw = rec.grid
    wd, wh, ww = rec.window
    x = padded.reshape(c, gd, wd, gh, wh, gw, ww)
    x = x.transpose(1, 3, 5, 2, 4, 6, 0)
    return x.reshape(gd * gh * gw, wd * wh * ww, c).copy(), rec


def window_reverse(blocks, record, original_shape=None):
    """Reassemble windows produced by :func:`window_partition` (bit-exact)."""
    blocks = np.asarray(blocks)
    if original_shape is not None and tuple(original_shape) != tuple(record.original_shape):
        raise ShapeError(f"record describes {record.original_shape}, caller expects {original_shape}")
    c, dp, hp, wp = record.padded_shape
    wd, wh, ww = record.window
    if dp % wd or hp % wh or wp % ww:
        raise ShapeError("padded shape is not a multiple of the window")
    if any(p < o for p, o in zip(record.padded_shape, record.original_shape)) or record.padded_shape[0] != record.original_shape[0]:
        raise ShapeError("padding record is inconsistent with the original shape")
    gd, gh, gw = record.grid
    expected = (gd * gh * gw, wd * wh * ww, c)
    if blocks.shape != expected:
        raise ShapeError(f"blocks have shape {blocks.shape}, record implies {expected}")
    x = blocks.reshape(gd, gh, gw, wd, wh, ww, c).transpose(6, 0, 3, 1, 4, 2, 5)
    x = x.reshape(c, dp, hp, wp)
    _, d, h, w = record.original_shape
    return x[:, :d, :h, :w].copy()


def cyclic_shift(t, shift):
    """Toroidal roll of the spatial axes by ``shift = (sd, sh, sw)``."""
    t = _check_tensor(t)
    return np.roll(t, _triple(shift, "shift"), axis=(1, 2, 3))


def relative_position_index(window):
    """(N, N) index into a ``prod(2w - 1)``-row bias table for token pairs of a window."""
    wd, wh, ww = _triple(window, "window")
    coords = np.stack(np.meshgrid(np.arange(wd), np.arange(wh), np.arange(ww), indexing="ij"))
    coords = coords.reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel[0] += wd - 1
    rel[1] += wh - 1
    rel[2] += ww - 1
    return rel[0] * (2 * wh - 1) * (2 * ww - 1) + rel[1] * (2 * ww - 1) + rel[2]


@dataclass
class SwinConfig:
    """Weights and geometry of one windowed multi-head self-attention layer.

    ``w_qkv`` maps C -> 3C (columns ordered q, k, v; heads contiguous within
    each); ``w_proj`` maps C -> C.  ``bias_table`` has shape
    ``(heads, prod(2 * window - 1))``.
    """

    embed_dim: int
    heads: int
    window: tuple = (4, 4, 4)
    shift: tuple = None
    w_qkv: np.ndarray = None
    b_qkv: np.ndarray = None
    w_proj: np.ndarray = None
    b_proj: np.ndarray = None
    bias_table: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.window = _triple(self.window, "window")
        if self.shift is None:
            self.shift = tuple(w // 2 for w in self.window)
        self.shift = _triple(self.shift, "shift")
        if any(not 0 <= s < w for s, w in zip(self.shift, self.window)):
            raise ShapeError(f"shift {self.shift} must satisfy 0 <= shift < window {self.window}")
        c = self.embed_dim
        if c % self.heads:
            raise ShapeError(f"embed_dim {c} is not divisible by heads {self.heads}")
        n_rel = int(np.prod([2 * w - 1 for w in self.window]))
        if self.w_qkv is None:
            self.w_qkv = np.hstack([np.eye(c)] * 3)
        if self.b_qkv is None:
            self.b_qkv = np.zeros(3 * c)
        if self.w_proj is None:
            self.w_proj = np.eye(c)
        if self.b_proj is None:
            self.b_proj = np.zeros(c)
        if self.bias_table is None:
            self.bias_table = np.zeros((self.heads, n_rel))
        shapes = {
            "w_qkv": (np.shape(self.w_qkv), (c, 3 * c)),
            "b_qkv": (np.shape(self.b_qkv), (3 * c,)),
            "w_proj": (np.shape(self.w_proj), (c, c)),
            "b_proj": (np.shape(self.b_proj), (c,)),
            "bias_table": (np.shape(self.bias_table), (self.heads, n_rel)),
        }
        for name, (got, want) in shapes.items():
            if tuple(got) != want:
                raise ShapeError(f"{name} has shape {got}, expected {want}")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @classmethod
    def random(cls, embed_dim, heads, window=(4, 4, 4), shift=None, seed=0, scale=0.5):
        rng = np.random.default_rng(seed)
        window = _triple(window, "window")
        n_rel = int(np.prod([2 * w - 1 for w in window]))
        c = embed_dim
        return cls(
            embed_dim, heads, window, shift,
            w_qkv=rng.normal(0, scale / np.sqrt(c), (c, 3 * c)),
            b_qkv=rng.normal(0, 0.02, 3 * c),
            w_proj=rng.normal(0, scale / np.sqrt(c), (c, c)),
            b_proj=rng.normal(0, 0.02, c),
            bias_table=rng.normal(0, 0.02, (heads, n_rel)),
        )


def _softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def windowed_attention(blocks, cfg, attn_mask=None, return_weights=False):
    """Multi-head self-attention inside each window.

    ``blocks`` is ``(n_windows, N, C)`` (or ``(N, C)`` for one window) and
    ``attn_mask`` an optional additive ``(n_windows, N, N)`` mask holding 0 or
    ``-inf``.  With ``return_weights`` the softmax matrices
    ``(n_windows, heads, N, N)`` are returned as well.
    """
    x = np.asarray(blocks, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != cfg.embed_dim:
        raise ShapeError(f"token blocks must be (n_windows, N, {cfg.embed_dim}), got {np.shape(blocks)}")
    nw, n, c = x.shape
    h, hd = cfg.heads, cfg.head_dim

    qkv = x @ cfg.w_qkv + cfg.b_qkv  # (nw, n, 3c)
    qkv = qkv.reshape(nw, n, 3, h, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # (nw, h, n, hd)

    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
    if n == int(np.prod(cfg.window)):
        rpi = relative_position_index(cfg.window)
        logits = logits + cfg.bias_table[:, rpi][None]
    if attn_mask is not None:
        mask = np.asarray(attn_mask, dtype=np.float64)
        if mask.ndim == 2:
            mask = mask[None]
        if mask.shape[1:] != (n, n) or mask.shape[0] not in (1, nw):
            raise ShapeError(f"attention mask has shape {mask.shape}, expected ({nw}, {n}, {n})")
        logits = logits + mask[:, None]
    attn = _softmax(logits)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(nw, n, c)
    out = out @ cfg.w_proj + cfg.b_proj
    if single:
        out = out[0]
    return (out, attn) if return_weights else out


def shifted_window_mask(padded_spatial, original_spatial, window, shift):
    """Additive attention mask for the windows of a shifted, padded volume.

    Tokens attend only to tokens that came from the same pre-shift region
    and have the same padding status.  Returns ``(n_windows, N, N)``.
    """
    dp, hp, wp = padded_spatial
    window = _triple(window, "window")
    shift = _triple(shift, "shift")
    region = np.zeros((dp, hp, wp), dtype=np.int64)
    cnt = 0
    bounds = []
    for n, w, s in zip((dp, hp, wp), window, shift):
        if s:
            bounds.append([slice(0, n - w), slice(n - w, n - s), slice(n - s, n)])
        else:
            bounds.append([slice(0, n)])
    for sd in bounds[0]:
        for sh in bounds[1]:
            for sw in bounds[2]:
                region[sd, sh, sw] = cnt
                cnt += 1
    pad = np.ones((dp, hp, wp), dtype=bool)
    d, h, w = original_spatial
    pad[:d, :h, :w] = False
    pad = np.roll(pad, tuple(-s for s in shift), axis=(0, 1, 2))
    label = region * 2 + pad
    blocks, _ = window_partition(label[None].astype(np.float64), window)
    lab = blocks[:, :, 0]
    same = lab[:, :, None] == lab[:, None, :]
    return np.where(same, 0.0, -np.inf)


def swin_attention(t, cfg, shifted=True):
    """(Shifted-)window self-attention over a whole ``(C, D, H, W)`` volume.

    Pads, rolls by ``-shift``, attends within windows under the region mask,
    then undoes the roll and crops.  Output has the input's shape.
    """
    t = _check_tensor(t)
    if t.shape[0] != cfg.embed_dim:
        raise ShapeError(f"tensor has {t.shape[0]} channels, config expects {cfg.embed_dim}")
    shift = cfg.shift if shifted else (0, 0, 0)
    padded, rec = pad_to_window(t, cfg.window)
    rolled = cyclic_shift(padded, tuple(-s for s in shift))
    blocks, _ = window_partition(rolled, cfg.window)
    mask = shifted_window_mask(padded.shape[1:], t.shape[1:], cfg.window, shift)
    out = windowed_attention(blocks, cfg, mask)
    full = window_reverse(out, PaddingRecord(padded.shape, padded.shape, cfg.window))
    full = cyclic_shift(full, shift)
    _, d, h, w = t.shape
    return full[:, :d, :h, :w]


# Neighbour order used when folding 2x2x2 cells into channels: (dd, dh, dw).
MERGE_ORDER = tuple((a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1))


def patch_merging(t, reduction):
    """Halve each spatial axis by folding 2x2x2 cells into channels, then reduce.

    ``reduction`` is a ``(C_out, 8*C)`` matrix applied to the folded channel
    vector, whose block ``j`` holds the neighbour ``MERGE_ORDER[j]``.
    Odd axes are zero-padded first.
    """
    t = _check_tensor(t)
    c = t.shape[0]
    reduction = np.asarray(reduction, dtype=np.float64)
    if reduction.ndim != 2 or reduction.shape[1] != 8 * c:
        raise ShapeError(f"reduction must be (C_out, {8 * c}), got {reduction.shape}")
    pads = [n % 2 for n in t.shape[1:]]
    if any(pads):
        t = np.pad(t, [(0, 0)] + [(0, p) for p in pads])
    folded = np.concatenate([t[:, a::2, b::2, cc::2] for a, b, cc in MERGE_ORDER], axis=0)
    return np.einsum("oc,cdhw->odhw", reduction, folded)


def averaging_reduction(c):
    """Reduction matrix that averages the eight neighbours channel-wise."""
    return np.hstack([np.eye(c)] * 8) / 8.0


def _as_beam_tensor(x):
    if isinstance(x, FluenceSet):
        return x.as_tensor()
    return np.asarray(x, dtype=np.float64)


def mse_fluence_loss(pred, truth):
    """Mean squared error over all beams and voxels; beams on axis 0 (B = 9)."""
    p, t = _as_beam_tensor(pred), _as_beam_tensor(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if p.ndim < 2 or p.shape[0] != N_BEAMS:
        raise ShapeError(f"expected {N_BEAMS} beam channels on axis 0, got shape {p.shape}")
    d = p - t
    return float(np.sum(d * d) / d.size)


def mse_fluence_grad(pred, truth):
    """Analytic gradient of :func:`mse_fluence_loss` with respect to ``pred``."""
    p, t = _as_beam_tensor(pred), _as_beam_tensor(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    return 2.0 * (p - t) / p.size
