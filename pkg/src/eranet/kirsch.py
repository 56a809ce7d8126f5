"""Eight-direction Kirsch compass kernels and alternative edge operators.

The Kirsch bank is fixed: entries are drawn from {+5, 0, -3}, every kernel
sums to zero, and each kernel is its predecessor rotated 45 degrees around
the compass ring. Only per-channel scales and biases are ever learned on
top of these; the entries themselves stay frozen.
"""

from __future__ import annotations

import numpy as np

from .tensor import DepthwiseKernel, Tensor4, depthwise_conv2d

__all__ = ["KirschBank", "kirsch_bank", "alt_operator_bank", "kirsch_respond", "BANK_NAMES"]

_KIRSCH = {
    "NW": [[+5, +5, -3], [+5, 0, -3], [-3, -3, -3]],
    "N": [[+5, +5, +5], [-3, 0, -3], [-3, -3, -3]],
    "NE": [[-3, +5, +5], [-3, 0, +5], [-3, -3, -3]],
    "E": [[-3, -3, +5], [-3, 0, +5], [-3, -3, +5]],
    "SE": [[-3, -3, -3], [-3, 0, +5], [-3, +5, +5]],
    "S": [[-3, -3, -3], [-3, 0, -3], [+5, +5, +5]],
    "SW": [[-3, -3, -3], [+5, 0, -3], [+5, +5, -3]],
    "W": [[+5, -3, -3], [+5, 0, -3], [+5, -3, -3]],
}

# 2x2 Roberts kernels embedded top-left in a 3x3 frame so every edge branch
# fuses into the same 3x3 target.
_ALT = {
    "roberts": [
        [[1, 0, 0], [0, -1, 0], [0, 0, 0]],
        [[0, 1, 0], [-1, 0, 0], [0, 0, 0]],
    ],
    "prewitt": [
        [[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]],
        [[-1, -1, -1], [0, 0, 0], [1, 1, 1]],
    ],
    "sobel": [
        [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],
        [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],
    ],
    "laplacian": [
        [[0, 1, 0], [1, -4, 1], [0, 1, 0]],
    ],
}

BANK_NAMES = ("kirsch", "roberts", "prewitt", "sobel", "laplacian")


class KirschBank:
    """Immutable stack of 3x3 edge kernels with direction labels."""

    def __init__(self, kernels: np.ndarray, labels: tuple[str, ...], name: str):
        self.kernels = kernels.astype(np.float64)
        self.kernels.setflags(write=False)
        self.labels = labels
        self.name = name

    def __len__(self) -> int:
        return self.kernels.shape[0]

    def kernel(self, direction: int) -> np.ndarray:
        """1-based direction index, matching the compass ordering."""
        if not 1 <= direction <= len(self):
            raise ValueError(f"direction {direction} out of range 1..{len(self)}")
        return self.kernels[direction - 1]


def kirsch_bank() -> KirschBank:
    """The eight compass-direction gradient kernels."""
    labels = tuple(_KIRSCH.keys())
    return KirschBank(np.array([_KIRSCH[d] for d in labels]), labels, "kirsch")


def alt_operator_bank(name: str) -> KirschBank:
    """Roberts / Prewitt / Sobel / Laplacian substitutes for the ablation switch."""
    if name == "kirsch":
        return kirsch_bank()
    if name not in _ALT:
        raise ValueError(f"unknown operator bank {name!r}; options: {BANK_NAMES}")
    ks = np.array(_ALT[name], dtype=np.float64)
    return KirschBank(ks, tuple(f"{name}{i + 1}" for i in range(len(ks))), name)


def kirsch_respond(x: Tensor4, bank: KirschBank, direction: int) -> Tensor4:
    """Depthwise response of one direction kernel, zero padding margin 1."""
    k = bank.kernel(direction)
    c = x.shape[1]
    w = np.broadcast_to(k.astype(x.dtype), (c, 1, 3, 3)).copy()
    return depthwise_conv2d(x, DepthwiseKernel(Tensor4(w)), padding=1)
