"""
Hard and soft attention on a single band
=========================================

The texture stage matches every patch of an upsampled MS band against
patches of the blurred PAN, then copies features from the sharp PAN at the
best match. Here the matching is run in isolation so the indices and
confidences can be inspected.
"""

import numpy as np

from pansharp.resample import up_down
from pansharp.synthetic import synthetic_scene
from pansharp.texture import TextureTransformer, TTConfig, attention

ms, pan = synthetic_scene(32, 4, seed=7)
pan_ud = up_down(pan, 4)

# A freshly initialized extractor: random filters, zero-mean in layer one.
tt = TextureTransformer(TTConfig(channels=8, seed=1)).astype(np.float64)

# When the query image equals the blurred PAN, each patch finds itself:
# h is the identity and every confidence is 1.
res = attention(tt, pan_ud, pan)
n = res.hard.size
print("self-reference: identity matches", int(np.sum(res.hard == np.arange(n))), "of", n)
print("min soft attention", res.soft.min())

# The extractor's first-layer filters are zero-mean, so a constant offset
# changes no feature and the matches stay put.
res = attention(tt, pan_ud + 0.05, pan)
print("offset query: identity matches", int(np.sum(res.hard == np.arange(n))), "of", n)

# A real MS band also has its own gain and a smooth band-specific field.
# Matches then land near, not always on, the same pixel, and the soft
# attention drops below 1 to say so.
band = up_down(ms[1:2], 4)
res = attention(tt, band, pan)
rows, cols = np.divmod(res.hard, 32)
shift = np.hypot(rows - np.arange(n) // 32, cols - np.arange(n) % 32)
print("band 1: same pixel", np.mean(shift == 0).round(3), ", median shift", np.median(shift).round(1), "px")
print("soft attention quartiles", np.round(np.quantile(res.soft, [0.25, 0.5, 0.75]), 4))

# The transferred map is the value features at the matched positions,
# folded back to the grid by averaging overlapping 3x3 patches.
print("transferred features", res.transferred.shape)
