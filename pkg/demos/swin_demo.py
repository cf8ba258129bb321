"""Shifted-window attention over a small feature volume."""

import numpy as np

from flxqa.swinkernel import (
    SwinConfig,
    averaging_reduction,
    mse_fluence_grad,
    mse_fluence_loss,
    patch_merging,
    pad_to_window,
    swin_attention,
    window_partition,
    window_reverse,
)

rng = np.random.default_rng(0)
x = rng.normal(size=(8, 6, 10, 7))  # (C, D, H, W), not a window multiple
cfg = SwinConfig.random(embed_dim=8, heads=2, window=(4, 4, 4), seed=1)

padded, rec = pad_to_window(x, cfg.window)
blocks, rec = window_partition(padded, cfg.window)
print("padded", padded.shape, "-> windows", blocks.shape)
print("partition round trip:", np.array_equal(window_reverse(blocks, rec), padded))

y0 = swin_attention(x, cfg, shifted=False)
y1 = swin_attention(x, cfg, shifted=True)
print("regular", y0.shape, "shifted", y1.shape, "differ:", not np.allclose(y0, y1))

merged = patch_merging(x, averaging_reduction(8))
print("patch merging", x.shape, "->", merged.shape)

# per-beam fluence loss and its gradient
pred, truth = rng.random((9, 16, 16)), rng.random((9, 16, 16))
print(f"loss {mse_fluence_loss(pred, truth):.5f}  |grad| {np.abs(mse_fluence_grad(pred, truth)).max():.2e}")
