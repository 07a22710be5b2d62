"""Posting-time embedding from day-of-week and day-of-year.

Timestamps are reduced to date granularity in UTC; the embedding is the sum
of a weekday row and a day-of-year row of one learned table, plus a bias.
"""

from __future__ import annotations

from datetime import datetime, timezone

import torch
from torch import nn

N_DOW = 7
N_DOY = 366  # index 366 covers leap days
TIME_INPUT_DIM = N_DOW + N_DOY


class FieldOutOfRange(ValueError):
    pass


def timestamp_to_fields(ts: int) -> tuple[int, int]:
    """UTC seconds -> (day of week, Monday=0; day of year, 1-based)."""
    if ts < 0:
        raise ValueError("timestamp must be >= 0")
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    return dt.weekday(), dt.timetuple().tm_yday


class TimeEncoder(nn.Module):
    """Linear projection of one-hot(dow) concatenated with one-hot(doy)."""

    def __init__(self, d_tau: int):
        super().__init__()
        if d_tau < 1:
            raise ValueError("d_tau must be >= 1")
        self.d_tau = d_tau
        self.weight = nn.Parameter(torch.zeros(TIME_INPUT_DIM, d_tau))
        self.bias = nn.Parameter(torch.zeros(d_tau))

    def forward(self, dow: torch.Tensor, doy: torch.Tensor) -> torch.Tensor:
        if torch.any(dow < 0) or torch.any(dow >= N_DOW):
            raise FieldOutOfRange("day of week must be in [0, 6]")
        if torch.any(doy < 1) or torch.any(doy > N_DOY):
            raise FieldOutOfRange("day of year must be in [1, 366]")
        return self.weight[dow] + self.weight[N_DOW + doy - 1] + self.bias
