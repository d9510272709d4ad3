"""Closed-form cost accounting for dense and delta-sparse recurrent units.

Counts follow the usual convention for these formulas: one multiply-accumulate
in a convolution counts once, element-wise state updates count once each,
and activation functions are not counted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def flops_gate(H: int, W: int, K: int, c_in: int, c_out: int) -> int:
    return 4 * H * W * K * K * c_out * (c_in + c_out)


def flops_states(H: int, W: int, c_out: int) -> int:
    return 4 * H * W * c_out


def flops_dense_unit(H: int, W: int, K: int, c_in: int, c_out: int) -> int:
    """``4 HW C_out [K^2 (C_out + C_in) + 1]`` for one ConvLSTM step."""
    for v in (H, W, K, c_in, c_out):
        if v < 1:
            raise ValueError("all sizes must be positive")
    return flops_gate(H, W, K, c_in, c_out) + flops_states(H, W, c_out)


def flops_sparse_unit(H: int, W: int, K: int, c_in: int, c_out: int, D):
    """``4 C_out [D K^2 (C_out + C_in) + HW]`` with one active count ``D`` for both deltas."""
    if not 0 <= D <= H * W:
        raise ValueError(f"D must lie in [0, {H * W}], got {D}")
    return 4 * c_out * (D * K * K * (c_out + c_in) + H * W)


def flops_sparse_streams(H: int, W: int, K: int, c_in: int, c_out: int, d_x, d_h):
    """Sparse cost with separate active counts for the input and hidden deltas.

    The single-``D`` formula is exact only when ``C_in == C_out``; here the
    input delta pays ``d_x K^2 C_in`` and the hidden delta ``d_h K^2 C_out``
    per gate output channel.
    """
    for d in (d_x, d_h):
        if not 0 <= d <= H * W:
            raise ValueError(f"active count must lie in [0, {H * W}], got {d}")
    return 4 * c_out * K * K * (d_x * c_in + d_h * c_out) + flops_states(H, W, c_out)


def acceleration_ratio(flop_dense, flop_sparse) -> float:
    if flop_dense <= 0:
        raise ValueError("flop_dense must be positive")
    return (flop_dense - flop_sparse) / flop_dense


def approx_acceleration_ratio(D, H: int, W: int) -> float:
    """Inactive-site ratio ``1 - D / HW``."""
    return 1.0 - D / (H * W)


def epsilon(K: int, c_in: int, c_out: int) -> float:
    return 1.0 / (K * K * (c_in + c_out))


def exact_ratio_from_density(D, H: int, W: int, K: int, c_in: int, c_out: int) -> float:
    """Exact acceleration ratio ``(1 - D/HW) / (1 + eps)`` in closed form."""
    return approx_acceleration_ratio(D, H, W) / (1.0 + epsilon(K, c_in, c_out))


@dataclass
class UnitCostReport:
    unit: int
    H: int
    W: int
    K: int
    c_in: int
    c_out: int
    d_x: float  # mean active sites of the input delta per step
    d_h: float  # mean active sites of the hidden delta per step
    flop_dense: float
    flop_sparse: float  # per-stream exact count
    flop_sparse_single_d: float  # single-D formula with D = (d_x + d_h) / 2
    ar: float  # 1 - mean delta occupancy
    ar_exact: float  # from flop_dense and flop_sparse

    def as_dict(self) -> dict:
        return asdict(self)


CSV_FIELDS = ["unit", "d_x", "d_h", "flop_dense", "flop_sparse", "flop_sparse_single_d",
              "ar", "ar_exact"]


def unit_report(unit: int, H: int, W: int, K: int, c_in: int, c_out: int,
                d_x: float, d_h: float) -> UnitCostReport:
    """Per-step cost of one unit given its mean delta active counts."""
    fd = flops_dense_unit(H, W, K, c_in, c_out)
    fs = flops_sparse_streams(H, W, K, c_in, c_out, d_x, d_h)
    fs1 = flops_sparse_unit(H, W, K, c_in, c_out, (d_x + d_h) / 2)
    ar = 1.0 - (d_x + d_h) / (2 * H * W)
    return UnitCostReport(unit, H, W, K, c_in, c_out, float(d_x), float(d_h), float(fd),
                          float(fs), float(fs1), ar, acceleration_ratio(fd, fs))


def model_reports(hidden, data_channels: int, K: int, H: int, W: int, occ_x, occ_h):
    """Unit reports for a stack given mean per-unit delta occupancies."""
    reports = []
    c_in = data_channels
    for l, ch in enumerate(hidden):
        reports.append(unit_report(l, H, W, K, c_in, ch, occ_x[l] * H * W, occ_h[l] * H * W))
        c_in = ch
    return reports


def dense_model_flops(hidden, data_channels: int, K: int, H: int, W: int) -> int:
    total, c_in = 0, data_channels
    for ch in hidden:
        total += flops_dense_unit(H, W, K, c_in, ch)
        c_in = ch
    return total


def summarize(reports) -> dict:
    """Model-level totals per step; AR is the mean of the per-unit ARs."""
    return {
        "flops_dense": float(sum(r.flop_dense for r in reports)),
        "flops_sparse": float(sum(r.flop_sparse for r in reports)),
        "ar": float(np.mean([r.ar for r in reports])),
        "ar_exact": float(np.mean([r.ar_exact for r in reports])),
    }


def reports_from_cells(cells) -> list[UnitCostReport]:
    """Cost reports from instrumented reference ``SparseSTCell`` runs."""
    reports = []
    for l, cell in enumerate(cells):
        H, W = cell.h.shape[1:]
        d_x = float(np.mean([r.active_x for r in cell.records]))
        d_h = float(np.mean([r.active_h for r in cell.records]))
        reports.append(unit_report(l, H, W, cell.kx.size, cell.c_in, cell.c_out, d_x, d_h))
    return reports
