"""Independent reference implementations used to pin expected values.

Everything here is deliberately naive (per-pixel loops, explicit integration,
closed-form combinatorics) and shares no code with the package paths it
checks.
"""

import math

import numpy as np


def euler_flow(field: np.ndarray, steps: int = 1000) -> np.ndarray:
    """Forward-Euler integration of a stationary velocity field over unit
    time, sampling the field bilinearly with edge clamping."""
    h, w = field.shape[1:]
    p = np.stack(np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")).copy()
    dt = 1.0 / steps
    for _ in range(steps):
        cy = np.clip(p[0], 0, h - 1)
        cx = np.clip(p[1], 0, w - 1)
        y0 = np.floor(cy).astype(int)
        x0 = np.floor(cx).astype(int)
        fy = cy - y0
        fx = cx - x0
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        val = (field[:, y0, x0] * (1 - fy) * (1 - fx) + field[:, y0, x1] * (1 - fy) * fx
               + field[:, y1, x0] * fy * (1 - fx) + field[:, y1, x1] * fy * fx)
        p += val * dt
    return p


def psnr_loop(a: np.ndarray, b: np.ndarray, max_val: float, mask=None) -> float:
    total, n = 0.0, 0
    for c in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(a.shape[2]):
                if mask is not None and not mask[i, j]:
                    continue
                total += (a[c, i, j] - b[c, i, j]) ** 2
                n += 1
    mse = total / n
    return math.inf if mse == 0 else 10.0 * math.log10(max_val * max_val / mse)


def ssim_loop(a: np.ndarray, b: np.ndarray, max_val: float, window: int = 7, mask=None) -> float:
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    per_channel = []
    for c in range(a.shape[0]):
        vals = []
        for i in range(a.shape[1] - window + 1):
            for j in range(a.shape[2] - window + 1):
                if mask is not None and not mask[i:i + window, j:j + window].all():
                    continue
                wa = a[c, i:i + window, j:j + window].ravel()
                wb = b[c, i:i + window, j:j + window].ravel()
                mu1, mu2 = wa.mean(), wb.mean()
                var1 = (wa * wa).mean() - mu1 * mu1
                var2 = (wb * wb).mean() - mu2 * mu2
                cov = (wa * wb).mean() - mu1 * mu2
                vals.append(((2 * mu1 * mu2 + c1) * (2 * cov + c2))
                            / ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def _bin_of(v: float, edges: np.ndarray, bins: int) -> int:
    i = int(np.searchsorted(edges, v, side="right")) - 1
    return min(max(i, 0), bins - 1)


def nmi_loop(a: np.ndarray, b: np.ndarray, bins: int, mask=None) -> float:
    av, bv = [], []
    for c in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(a.shape[2]):
                if mask is not None and not mask[i, j]:
                    continue
                av.append(a[c, i, j])
                bv.append(b[c, i, j])
    av, bv = np.array(av), np.array(bv)
    if av.min() == av.max() or bv.min() == bv.max():
        return 1.0
    ea = np.linspace(av.min(), av.max(), bins + 1)
    eb = np.linspace(bv.min(), bv.max(), bins + 1)
    joint = np.zeros((bins, bins))
    for x, y in zip(av, bv):
        joint[_bin_of(x, ea, bins), _bin_of(y, eb, bins)] += 1
    pj = joint / joint.sum()

    def ent(p):
        total = 0.0
        for v in np.asarray(p).ravel():
            if v > 0:
                total -= v * math.log(v)
        return total

    hab = ent(pj)
    return (ent(pj.sum(axis=1)) + ent(pj.sum(axis=0))) / hab if hab else 1.0


def mde_loop(d1: np.ndarray, d2: np.ndarray, mask=None) -> float:
    total, n = 0.0, 0
    for i in range(d1.shape[1]):
        for j in range(d1.shape[2]):
            if mask is not None and not mask[i, j]:
                continue
            total += math.hypot(d1[0, i, j] - d2[0, i, j], d1[1, i, j] - d2[1, i, j])
            n += 1
    return total / n


def ks_uniform_pvalue(samples: np.ndarray, lo: float, hi: float) -> float:
    """One-sample Kolmogorov-Smirnov p-value against U(lo, hi), using the
    asymptotic Kolmogorov distribution."""
    x = np.sort((np.asarray(samples) - lo) / (hi - lo))
    n = len(x)
    grid = np.arange(1, n + 1) / n
    d = float(np.max(np.maximum(grid - x, x - (np.arange(n) / n))))
    t = (math.sqrt(n) + 0.12 + 0.11 / math.sqrt(n)) * d
    total = 0.0
    for k in range(1, 101):
        total += (-1) ** (k - 1) * math.exp(-2.0 * (k * t) ** 2)
    return max(0.0, min(1.0, 2.0 * total))


def patch_acceptance_probability(mask: np.ndarray, size: int, threshold: float) -> float:
    """Exact single-draw acceptance probability of uniform window sampling:
    the fraction of window positions whose valid fraction meets threshold."""
    h, w = mask.shape
    good = 0
    total = 0
    for r0 in range(h - size + 1):
        for c0 in range(w - size + 1):
            total += 1
            if mask[r0:r0 + size, c0:c0 + size].mean() >= threshold:
                good += 1
    return good / total


def adam_scalar(grad_fn, w0: float, lr: float, steps: int,
                beta1=0.9, beta2=0.999, eps=1e-8) -> float:
    """Plain-python Adam on a scalar objective."""
    w, m, v = w0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        w -= lr * mh / (math.sqrt(vh) + eps)
    return w
