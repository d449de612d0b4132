"""Recurrent transform building blocks, initialization, and the Adam + plateau learning-rate schedule."""

import math
import os
from logging import getLogger
from typing import Iterable, Optional

import torch
from torch import nn

from cpri_compression.exceptions import NumericalFailure

logger = getLogger("cpri-compression")

THREADS_ENVIRONMENT_VARIABLE = "CPRI_NUM_THREADS"


def configure_threads(deterministic: bool = False, seed: Optional[int] = None) -> int:
    threads = 1 if deterministic else int(os.environ.get(THREADS_ENVIRONMENT_VARIABLE, torch.get_num_threads()))
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(deterministic)
    if seed is not None:
        torch.manual_seed(seed)
    logger.debug(f"Using {threads} torch threads (deterministic={deterministic})")
    return threads


def _uniform_fan_in_(weight: torch.Tensor, fan_in: int) -> None:
    bound = 1 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound)


def _zero_candidate_hidden_bias(hidden: int):
    mask = torch.ones(3 * hidden, dtype=torch.float64)
    mask[2 * hidden :] = 0

    def hook(grad: torch.Tensor) -> torch.Tensor:
        return grad * mask.to(grad.dtype)

    return hook


class GruStack(nn.Module):
    """
    Bidirectional gated recurrence with zero initial state.

    The candidate uses the reset gate on the recurrent product only,
    h~ = tanh(W_n x + b_n + r * (U_n h)), so the recurrent candidate bias is pinned to zero.
    """

    def __init__(self, input_dim: int, hidden: int = 32, layers: int = 2):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        self.gru = nn.GRU(
            input_dim, hidden, num_layers=layers, bidirectional=True, batch_first=True, dtype=torch.float64
        )
        self.reset_parameters()
        for name, parameter in self.gru.named_parameters():
            if name.startswith("bias_hh"):
                parameter.register_hook(_zero_candidate_hidden_bias(hidden))

    def reset_parameters(self) -> None:
        for name, parameter in self.gru.named_parameters():
            if name.startswith("bias"):
                nn.init.zeros_(parameter)
            else:
                _uniform_fan_in_(parameter, parameter.shape[1])

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(batch, T, input_dim) -> (batch, T, 2 * hidden)"""
        output, _ = self.gru(x)
        return ensure_finite(output, "recurrent output")


class DenseHead(nn.Linear):
    def __init__(self, in_features: int, out_features: int):
        super().__init__(in_features, out_features, dtype=torch.float64)

    def reset_parameters(self) -> None:
        _uniform_fan_in_(self.weight, self.in_features)
        nn.init.zeros_(self.bias)


def ensure_finite(values: torch.Tensor, what: str) -> torch.Tensor:
    """`values` is laid out (batch, T, ...); the error names the first offending time step"""
    finite = torch.isfinite(values)
    if bool(finite.all()):
        return values
    finite_steps = finite.reshape(values.shape[0], values.shape[1], -1).all(dim=-1).all(dim=0)
    step = int(torch.nonzero(~finite_steps)[0, 0])
    raise NumericalFailure(f"Non-finite {what} at step {step}", step=step)


def gru_forward(x: torch.Tensor, stack: GruStack) -> torch.Tensor:
    """Single sequence laid out (in_dim, T); returns (2 * hidden, T)"""
    if x.dim() != 2 or x.shape[0] != stack.input_dim:
        raise ValueError(f"Expected a ({stack.input_dim}, T) input, got {tuple(x.shape)}")
    ensure_finite(x.T.unsqueeze(0), "input")
    return stack(x.T.unsqueeze(0)).squeeze(0).T


class TimeDistributedTransform(nn.Module):
    """Bi-GRU stack followed by a dense head applied per time step: (batch, rows, T) -> (batch, out, T)"""

    def __init__(self, input_rows: int, output_rows: int, hidden: int = 32, layers: int = 2):
        super().__init__()
        self.recurrent = GruStack(input_rows, hidden, layers)
        self.head = DenseHead(self.recurrent.output_dim, output_rows)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.recurrent(x.transpose(1, 2))).transpose(1, 2)


def make_optimizer(parameters: Iterable[nn.Parameter], learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(parameters, lr=learning_rate, betas=(0.9, 0.999), eps=1e-8)


class PlateauSchedule:
    """Multiplies the learning rate by `factor` once `patience` consecutive epochs fail to improve validation loss"""

    def __init__(self, optimizer: torch.optim.Optimizer, patience: int = 20, factor: float = 0.8):
        self.optimizer = optimizer
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode="min", factor=factor, patience=patience - 1, threshold=0.0, cooldown=0
        )

    def step(self, validation_loss: float) -> float:
        before = self.learning_rate
        self.scheduler.step(validation_loss)
        if self.learning_rate != before:
            logger.info(f"Validation loss plateaued, learning rate {before:g} -> {self.learning_rate:g}")
        return self.learning_rate

    @property
    def learning_rate(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def state_dict(self) -> dict:
        return self.scheduler.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.scheduler.load_state_dict(state)
