"""Golden S-measure / E-measure values for tests/metrics_reference.rs.

Uses the `pysodmetrics` package (a port of the MATLAB evaluation code) as
the oracle. Instances come from the same xorshift64* stream that the Rust
test regenerates, so only seeds and expected values are copied over.

    pip install pysodmetrics numpy
    python3 sod_golden.py
"""

import numpy as np
from py_sod_metrics import Emeasure, Smeasure

MASK = (1 << 64) - 1


class XorShift:
    def __init__(self, seed):
        self.s = seed & MASK or 1

    def next(self):
        s = self.s
        s ^= s >> 12
        s ^= (s << 25) & MASK
        s ^= s >> 27
        self.s = s
        return (s * 0x2545F4914F6CDD1D) & MASK

    def unit(self):
        return (self.next() >> 11) / float(1 << 53)


def instance(seed, n):
    r = XorShift(seed)
    cx, cy = 3 + 10 * r.unit(), 3 + 10 * r.unit()
    rx, ry = 2 + 5 * r.unit(), 2 + 5 * r.unit()
    gt = np.zeros((n, n), dtype=bool)
    pred = np.zeros((n, n))
    for y in range(n):
        for x in range(n):
            inside = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0
            gt[y, x] = inside
            pred[y, x] = min(1.0, 0.35 * inside + 0.65 * r.unit())
    return pred, gt


def centroid_is_tie(gt):
    ys, xs = np.nonzero(gt)
    return any(abs(m % 1 - 0.5) < 1e-9 for m in (ys.mean() + 1, xs.mean() + 1))


def e_max(pred, gt):
    em = Emeasure()
    em.gt_fg_numel = np.count_nonzero(gt)
    em.gt_size = gt.size
    return max(em.cal_em_with_threshold(pred, gt, 1 - k / 255) for k in range(256))


def main():
    sm = Smeasure()
    for seed in (11, 12, 13, 14, 15):
        pred, gt = instance(seed, 16)
        tie = centroid_is_tie(gt)
        print(f"seed {seed}: fg {gt.sum()} tie {tie} S {sm.cal_sm(pred, gt):.15f} E {e_max(pred, gt):.15f}")
    gt = np.zeros((8, 8), dtype=bool)
    gt[2:6, 1:5] = True
    print(f"inverse 8x8: S {sm.cal_sm(1.0 - gt.astype(float), gt):.15f}")
    const = np.full((8, 8), 0.3)
    print(f"constant 0.3 8x8: E {e_max(const, gt):.15f}")


if __name__ == "__main__":
    main()
