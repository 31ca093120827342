"""Independent scalar re-derivation of the worked hand values.

Uses only the ``math`` module (no numpy, no package code) so the numbers can
serve as an oracle for the package tests. Prints one ``name = value`` line per
quantity; ``--check`` also compares against the package implementation.
"""

import argparse
import math


def formation_triple():
    # I = J t + B (1 - t) with J = 0.8, t = 0.5, B = 0.2, then inverted
    J, t, B = 0.8, 0.5, 0.2
    I = J * t + B * (1 - t)
    J_back = (I - B * (1 - t)) / t
    return I, J_back


def injector_scalar():
    # y = T u + B (1 - T) with u = 0.4, T = 2, B = 0.1
    u, T, B = 0.4, 2.0, 0.1
    return T * u + B * (1 - T)


def giou_example():
    # boxes as (cx, cy, w, h)
    a = (0.25, 0.25, 0.5, 0.5)
    b = (0.5, 0.5, 0.5, 0.5)

    def corners(bx):
        return bx[0] - bx[2] / 2, bx[1] - bx[3] / 2, bx[0] + bx[2] / 2, bx[1] + bx[3] / 2

    ax1, ay1, ax2, ay2 = corners(a)
    bx1, by1, bx2, by2 = corners(b)
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = a[2] * a[3] + b[2] * b[3] - inter
    encl = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    g = inter / union - (encl - union) / encl
    return g, 1 - g


def focal_example():
    # single cell, target 1, p = 0.6, alpha 0.25, gamma 2
    p, alpha, gamma = 0.6, 0.25, 2.0
    return -alpha * (1 - p) ** gamma * math.log(p)


def psnr_offset():
    # every pixel off by 0.1 on a unit peak
    mse = 0.1 ** 2
    return 10 * math.log10(1.0 / mse)


def total_weighted():
    lam = (1.0, 100.0, 0.1, 1.0)
    return sum(l * 1.0 for l in lam)


def values() -> dict:
    I, J = formation_triple()
    g, gl = giou_example()
    return {
        "formation_I": I,
        "formation_J": J,
        "injector_y": injector_scalar(),
        "giou": g,
        "giou_loss": gl,
        "focal": focal_example(),
        "psnr_offset_db": psnr_offset(),
        "total_loss_unit_parts": total_weighted(),
    }


def package_values() -> dict:
    import numpy as np

    from waterflow import ndgrad as G
    from waterflow.detect import Box, focal_loss, giou
    from waterflow.flow import hpi_forward
    from waterflow.metrics import psnr
    from waterflow.perception import LossWeights, total_loss
    from waterflow.physics import degrade, enhance_analytic

    one = np.ones((3, 1, 1))
    I = degrade(0.8 * one, 0.5 * one, np.full(3, 0.2))
    J = enhance_analytic(I, 0.5 * one, np.full(3, 0.2))
    y, _ = hpi_forward(G.Tensor(np.full((1, 1, 1, 1), 0.4)), G.Tensor(np.full((1, 1, 1, 1), 0.1)),
                       G.Tensor(np.full((1, 1, 1, 1), 2.0)))
    g = giou(Box(0.25, 0.25, 0.5, 0.5), Box(0.5, 0.5, 0.5, 0.5))
    logit = math.log(0.6 / 0.4)
    f = focal_loss(G.Tensor(np.array([logit])), np.array([1.0])).item()
    x = np.zeros((3, 4, 4))
    parts = {k: G.Tensor(1.0) for k in ("contrastive", "style", "detection", "l1")}
    return {
        "formation_I": float(I[0, 0, 0]),
        "formation_J": float(J[0, 0, 0]),
        "injector_y": float(y.data.ravel()[0]),
        "giou": g,
        "giou_loss": 1 - g,
        "focal": f,
        "psnr_offset_db": psnr(x + 0.1, x),
        "total_loss_unit_parts": total_loss(parts, LossWeights()).item(),
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--check", action="store_true", help="compare with the package (tolerance 1e-6)")
    args = ap.parse_args()
    ref = values()
    pkg = package_values() if args.check else {}
    bad = 0
    for k, v in ref.items():
        if args.check:
            ok = abs(pkg[k] - v) < 1e-6
            bad += not ok
            print(f"{k} = {v:.9f}  package {pkg[k]:.9f}  {'ok' if ok else 'MISMATCH'}")
        else:
            print(f"{k} = {v:.9f}")
    return 1 if bad else 0


if __name__ == "__main__":
    raise SystemExit(main())
