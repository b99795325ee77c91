"""Regenerates lr_replay.csv: triangular2 learning rates for the six-phase replay,
sampled four times per epoch. Written independently of the Rust implementation."""

import math

ROWS = [
    (1e-4, 6e-4, 6, 0, 24),
    (1e-5, 6e-5, 6, 24, 48),
    (1e-5, 6e-5, 4, 48, 72),
    (1e-6, 6e-6, 2, 72, 84),
    (1e-5, 6e-5, 2, 84, 96),
    (1e-7, 6e-7, 2, 96, 108),
]
PER_EPOCH = 4


def lr(epoch):
    for base, peak, step, start, end in ROWS:
        if start <= epoch < end:
            local = epoch - start
            cycle = math.floor(1 + local / (2 * step))
            x = abs(local / step - 2 * cycle + 1)
            return base + (peak - base) * max(0.0, 1 - x) / 2 ** (cycle - 1)
    raise ValueError(epoch)


with open("lr_replay.csv", "w") as f:
    f.write("epoch_frac,lr\n")
    for k in range(108 * PER_EPOCH):
        e = k / PER_EPOCH
        f.write(f"{e!r},{lr(e)!r}\n")
