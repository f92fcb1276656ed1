"""Token masking for masked image modeling.

A mask is a boolean vector over the N patch positions of one image; set bits
are hidden from the encoder and reconstructed by the decoder. The masked
count is a fixed function of the ratio (no per-draw variance), and at least
one position always stays visible.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, fill_masked_rows, reshape


@dataclass
class Mask:
    bits: np.ndarray  # bool [N], True = masked
    ratio: float
    draw_id: int

    @property
    def popcount(self):
        return int(self.bits.sum())


def masked_count(n_positions, ratio):
    """round(ratio * N), half away from zero, clamped so >= 1 position stays visible."""
    if n_positions < 1:
        raise ValueError(f"need at least one position, got {n_positions}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    m = int(np.floor(ratio * n_positions + 0.5))
    return max(0, min(m, n_positions - 1))


def sample_mask(n_positions, ratio, rng, draw_id=0):
    """Draw one mask: exactly masked_count positions, uniform without replacement."""
    m = masked_count(n_positions, ratio)
    bits = np.zeros(n_positions, dtype=bool)
    if m:
        bits[rng.choice(n_positions, size=m, replace=False)] = True
    return Mask(bits=bits, ratio=float(ratio), draw_id=int(draw_id))


def split(mask):
    """(visible, masked) index vectors, each sorted ascending; a partition of 0..N-1."""
    bits = np.asarray(mask.bits if isinstance(mask, Mask) else mask, dtype=bool)
    return np.flatnonzero(~bits), np.flatnonzero(bits)


def reassemble(encoded_visible, mask, fill):
    """Rebuild the full [N, d] sequence for one image.

    Visible rows (ordered by ascending original position) go back to their
    positions; every masked position receives the fill vector. Differentiable
    through both sources.
    """
    bits = np.asarray(mask.bits if isinstance(mask, Mask) else mask, dtype=bool)
    enc = encoded_visible if isinstance(encoded_visible, Tensor) else Tensor(encoded_visible)
    fil = fill if isinstance(fill, Tensor) else Tensor(fill)
    k, d = enc.data.shape
    out = fill_masked_rows(reshape(enc, (1, k, d)), bits[None, :], reshape(fil, (1, d)))
    return reshape(out, (bits.shape[0], d))
