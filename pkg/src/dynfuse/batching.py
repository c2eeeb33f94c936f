"""Tensor views of measurement windows for batched model evaluation.

Windows are padded to the per-batch maximum frame count of each stream;
padded slots repeat the last timestamp (keeping rows nondecreasing), carry
zero values, and are masked out of every recurrent update and loss term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data_model import MeasurementWindow

__all__ = ["WindowBatch", "collate"]


@dataclass
class WindowBatch:
    beam_t: torch.Tensor    # (B, Nb)
    beam_v: torch.Tensor    # (B, Nb, Mb)
    beam_mask: torch.Tensor
    csi_t: torch.Tensor     # (B, Nc)
    csi_v: torch.Tensor     # (B, Nc, Mc)
    csi_mask: torch.Tensor
    label_t: torch.Tensor   # (B, Np)
    label_xy: torch.Tensor  # (B, Np, 2)
    label_mask: torch.Tensor
    window_ids: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.beam_t.shape[0]


def _pad_stream(times: list[np.ndarray], values: list[np.ndarray]):
    b = len(times)
    n = max(len(t) for t in times)
    m = values[0].shape[-1]
    t_out = np.zeros((b, n))
    v_out = np.zeros((b, n, m))
    mask = np.zeros((b, n))
    for i, (t, v) in enumerate(zip(times, values)):
        k = len(t)
        t_out[i, :k] = t
        t_out[i, k:] = t[-1]
        v_out[i, :k] = v
        mask[i, :k] = 1.0
    as_tensor = lambda a: torch.as_tensor(a, dtype=torch.float64)
    return as_tensor(t_out), as_tensor(v_out), as_tensor(mask)


def collate(windows: Sequence[MeasurementWindow]) -> WindowBatch:
    if not windows:
        raise ValueError("cannot collate an empty window list")
    if not all(w.normalized for w in windows):
        raise ValueError("collate expects normalized windows (times in [0, 1])")
    beam_t, beam_v, beam_mask = _pad_stream([w.beam_times() for w in windows],
                                            [w.beam_values() for w in windows])
    csi_t, csi_v, csi_mask = _pad_stream([w.csi_times() for w in windows],
                                         [w.csi_values() for w in windows])
    label_t, label_xy, label_mask = _pad_stream([w.label_times() for w in windows],
                                                [w.label_xy() for w in windows])
    return WindowBatch(beam_t, beam_v, beam_mask, csi_t, csi_v, csi_mask,
                       label_t, label_xy, label_mask,
                       tuple(w.window_id for w in windows))
