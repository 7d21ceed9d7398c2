"""Independent reference computations whose outputs are frozen into the Rust tests.

Run with numpy and scikit-image installed:

    python3 crates/core/tests/oracles/oracles.py

Inputs come from a 64-bit LCG so both sides generate identical frames:
state <- state * 6364136223846793005 + 1442695040888963407 (mod 2^64),
value = (state >> 40) / 2^24, filled in row, column, channel order.
"""

import math

import numpy as np
from skimage.metrics import structural_similarity

MASK = (1 << 64) - 1


def lcg_frame(seed, w, h):
    state = seed & MASK
    vals = []
    for _ in range(h * w * 3):
        state = (state * 6364136223846793005 + 1442695040888963407) & MASK
        vals.append(np.float32((state >> 40) / float(1 << 24)))
    return np.array(vals, dtype=np.float32).reshape(h, w, 3)


def splitmix(seed):
    state = seed & MASK
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        yield z ^ (z >> 31)


def reference_weights(seed, factor=8, latent=4, hidden=16):
    gen = splitmix(seed)

    def layer(cin, cout, k):
        fan = cin * k * k
        s = 1.0 / math.sqrt(fan)
        draw = lambda: np.float32((2.0 * ((next(gen) >> 40) / float(1 << 24)) - 1.0) * s)
        w = np.array([draw() for _ in range(cout * fan)], dtype=np.float32).reshape(cout, cin, k, k)
        b = np.array([draw() for _ in range(cout)], dtype=np.float32)
        return w, b

    layers, c = [], 3
    for _ in range(int(math.log2(factor))):
        layers.append(layer(c, hidden, 3))
        c = hidden
    return layers, layer(c, latent, 1)


def conv(x, w, b, stride, pad):
    """Direct loops over a float64 CHW input."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for y in range(oh):
            for xx in range(ow):
                patch = xp[:, y * stride:y * stride + k, xx * stride:xx * stride + k]
                out[o, y, xx] = np.sum(patch * w[o].astype(np.float64)) + float(b[o])
    return out


def reference_encode(frame_hwc, seed):
    layers, (pw, pb) = reference_weights(seed)
    x = frame_hwc.astype(np.float64).transpose(2, 0, 1)
    for w, b in layers:
        x = np.tanh(conv(x, w, b, 2, 1))
    return conv(x, pw, pb, 1, 0)


def psnr(a, b):
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1.0 / mse))


def ssim(a, b):
    return structural_similarity(
        a.astype(np.float64), b.astype(np.float64), channel_axis=2, data_range=1.0,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False, win_size=11)


def simplicity(frames):
    total = 0.0
    for f in frames:
        f = f.astype(np.float64)
        gx = f[:-1, 1:, :] - f[:-1, :-1, :]
        gy = f[1:, :-1, :] - f[:-1, :-1, :]
        total += np.mean(np.sqrt(gx ** 2 + gy ** 2))
    return 1.0 - (total / len(frames)) / math.sqrt(2.0)


def cosine(a, b):
    a, b = a.ravel(), b.ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


if __name__ == "__main__":
    half = np.full((8, 8, 3), 0.5, dtype=np.float32)
    z = reference_encode(half, 7).ravel()
    print("reference seed=7 8x8 all-0.5 latent:", [repr(float(v)) for v in z])

    f16 = lcg_frame(11, 16, 16)
    z16 = reference_encode(f16, 7).ravel()
    print("reference seed=7 lcg(11) 16x16 latent:", [repr(float(v)) for v in z16])

    a, b = lcg_frame(1, 32, 24), lcg_frame(2, 32, 24)
    print("ssim lcg(1) vs lcg(2) 32x24:", repr(ssim(a, b)))
    print("psnr lcg(1) vs lcg(2) 32x24:", repr(psnr(a, b)))
    noisy = np.clip(a + 0.05 * (lcg_frame(3, 32, 24) - 0.5), 0, 1).astype(np.float32)
    print("ssim lcg(1) vs lcg(1)+noise:", repr(ssim(a, noisy)))
    print("psnr lcg(1) vs lcg(1)+noise:", repr(psnr(a, noisy)))

    print("simplicity lcg(5) 9x7:", repr(simplicity([lcg_frame(5, 9, 7)])))

    clip_p = [lcg_frame(20 + i, 16, 16) for i in range(3)]
    clip_c = [lcg_frame(30 + i, 16, 16) for i in range(2)]
    prox = np.mean([cosine(reference_encode(p, 7), reference_encode(clip_c[i % 2], 7))
                    for i, p in enumerate(clip_p)])
    print("proximity seed=7 lcg(20..23) vs lcg(30..32):", repr(float(prox)))

    eps = 15 / 255
    print("uniform-noise psnr expectation:", repr(20 * math.log10(1 / (eps / math.sqrt(3)))))
