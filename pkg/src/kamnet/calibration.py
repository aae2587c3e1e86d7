"""Brute-force parameter-count enumeration.

Independent of the layer classes: each count is written out from first
principles, so the closed forms in :mod:`kamnet.model` and
:mod:`kamnet.attention` can be checked against it.  Counting covers
trainable parameters only; batch-norm contributes gamma and beta.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

BACKBONE_TARGET = 3851
QKV_DELTA = 1089
CBAM_DELTA = 182
SE_DELTA = 82


@dataclass(frozen=True)
class BackboneCandidate:
    temporal_kernel_len: int
    separable_kernel_len: int
    pool1: int
    pool2: int

    def score(self, preferred_temporal: int = 100) -> tuple:
        # prefer the customary 16-tap separable kernel, two real pooling
        # stages and a temporal kernel near half the sampling rate
        return (self.separable_kernel_len != 16,
                not (self.pool1 > 1 and self.pool2 > 1),
                abs(self.temporal_kernel_len - preferred_temporal),
                self.temporal_kernel_len)


def backbone_count(kt: int, ks: int, p1: int, p2: int, F1: int = 8, D: int = 1, F2: int = 16,
                   C: int = 62, T: int = 200, classes: int = 3) -> int:
    length = T // p1 // p2
    return (F1 * kt + 2 * F1            # temporal conv + BN
            + F1 * D * C + 2 * F1 * D   # depthwise spatial + BN
            + F1 * D * ks + F1 * D * F2  # separable: depthwise + pointwise
            + 2 * F2                    # BN
            + F2 * length * classes + classes)


def enumerate_backbones(target: int = BACKBONE_TARGET, T: int = 200, pools=(1, 2, 4, 5, 8),
                        max_separable: int = 64, **fixed) -> list[BackboneCandidate]:
    out = []
    for p1, p2, ks in itertools.product(pools, pools, range(1, max_separable + 1)):
        if T // p1 // p2 < 1:
            continue
        for kt in range(1, T + 1):
            if backbone_count(kt, ks, p1, p2, T=T, **fixed) == target:
                out.append(BackboneCandidate(kt, ks, p1, p2))
    return out


def calibrate_backbone(target: int = BACKBONE_TARGET, **kw) -> BackboneCandidate:
    cands = enumerate_backbones(target, **kw)
    if not cands:
        raise ValueError(f"no backbone configuration reaches {target} parameters")
    return min(cands, key=BackboneCandidate.score)


def qkv_count(C: int, dim: int, bias: bool, out_proj: bool, gate: bool) -> int:
    n = 3 * C * dim + (3 * dim if bias else 0)
    if out_proj:
        n += dim * C + (C if bias else 0)
    return n + int(gate)


def enumerate_qkv(delta: int = QKV_DELTA, C: int = 16, max_dim: int = 64) -> list[dict]:
    out = []
    for dim, bias, out_proj, gate in itertools.product(range(1, max_dim + 1), (True, False),
                                                      (True, False), (True, False)):
        if not out_proj and dim != C:
            continue
        if qkv_count(C, dim, bias, out_proj, gate) == delta:
            out.append(dict(dim=dim, bias=bias, out_proj=out_proj, gate=gate))
    return out


def cbam_count(C: int, r: int, mlp_bias: bool, k: int, conv_bias: bool, bn: bool) -> int:
    h = C // r
    n = C * h + h * C + ((h + C) if mlp_bias else 0)
    n += 2 * k * k + int(conv_bias)
    return n + (2 if bn else 0)


def enumerate_cbam(delta: int = CBAM_DELTA, C: int = 16) -> list[dict]:
    out = []
    for r, mlp_bias, k, conv_bias, bn in itertools.product((2, 4, 8), (True, False), (3, 5, 7, 9),
                                                          (True, False), (True, False)):
        if cbam_count(C, r, mlp_bias, k, conv_bias, bn) == delta:
            out.append(dict(reduction=r, mlp_bias=mlp_bias, kernel=k, conv_bias=conv_bias, bn=bn))
    return out


def se_count(C: int, r: int) -> int:
    h = C // r
    return C * h + h + h * C + C
