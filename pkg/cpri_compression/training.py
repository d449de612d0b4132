"""Epoch loop with checkpoints and plateau schedule, plus the per-scheme training objectives."""

from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from cpri_compression.entropy_codec import NeuralCompressionModel, rd_loss
from cpri_compression.exceptions import NumericalFailure
from cpri_compression.latent_codecs import (
    LatentUniformModel,
    LatentVqModel,
    loss_uq,
    loss_vq,
    normalized_error,
    stack_real,
)
from cpri_compression.neural_core import PlateauSchedule, make_optimizer
from cpri_compression.options import TrainingOptions
from cpri_compression.pipeline import PreparedFrames, SignalContext, sample_factors
from cpri_compression.signal_chain import evm_from_components

logger = getLogger("cpri-compression")


@dataclass(frozen=True)
class TensorData:
    s_rows: torch.Tensor
    scale: torch.Tensor
    x_f: torch.Tensor

    @classmethod
    def from_prepared(cls, prepared: PreparedFrames, ctx: SignalContext) -> "TensorData":
        return cls(
            s_rows=torch.from_numpy(np.ascontiguousarray(stack_real(prepared.s), dtype=np.float64)),
            scale=torch.from_numpy(sample_factors(prepared.t, ctx)),
            x_f=torch.from_numpy(np.ascontiguousarray(prepared.x_f, dtype=np.complex128)),
        )

    def __len__(self) -> int:
        return self.s_rows.shape[0]

    def batch(self, index: torch.Tensor) -> "TensorData":
        return TensorData(self.s_rows[index], self.scale[index], self.x_f[index])

    def batches(self, size: int, order: Optional[torch.Tensor] = None):
        order = order if order is not None else torch.arange(len(self))
        for start in range(0, len(self), size):
            yield self.batch(order[start : start + size])


LossFunction = Callable[[TensorData], Tuple[torch.Tensor, Dict[str, float]]]


@dataclass
class Trainer:
    """
    Adam with the plateau schedule over full passes of the training set. A checkpoint after every
    `checkpoint_every` epochs makes an interrupted single-threaded run resume onto the same trajectory.
    """

    modules: Dict[str, nn.Module]
    parameters: List[nn.Parameter]
    options: TrainingOptions
    seed: int = 0
    checkpoint_path: Optional[Path] = None
    on_step: Optional[Callable[[int, TensorData], None]] = None
    on_epoch: Optional[Callable[[int], Dict[str, float]]] = None
    history: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        self.optimizer = make_optimizer(self.parameters, self.options["learning_rate"])
        self.schedule = PlateauSchedule(
            self.optimizer, self.options["plateau_patience"], self.options["plateau_factor"]
        )
        self.generator = torch.Generator().manual_seed(self.seed)
        self.epoch = 0
        self.step = 0

    def _state(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "modules": {name: module.state_dict() for name, module in self.modules.items()},
            "optimizer": self.optimizer.state_dict(),
            "schedule": self.schedule.state_dict(),
            "generator": self.generator.get_state(),
            "torch_rng": torch.get_rng_state(),
            "history": self.history,
        }

    def save_checkpoint(self) -> None:
        if self.checkpoint_path is None:
            return
        self.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self._state(), self.checkpoint_path)
        logger.debug(f"Checkpoint written to {self.checkpoint_path} after epoch {self.epoch}")

    def resume(self) -> bool:
        if self.checkpoint_path is None or not self.checkpoint_path.exists():
            return False
        state = torch.load(self.checkpoint_path, weights_only=False)
        for name, module in self.modules.items():
            module.load_state_dict(state["modules"][name])
        self.optimizer.load_state_dict(state["optimizer"])
        self.schedule.load_state_dict(state["schedule"])
        self.generator.set_state(state["generator"])
        torch.set_rng_state(state["torch_rng"])
        self.epoch, self.step, self.history = state["epoch"], state["step"], state["history"]
        logger.info(f"Resumed from {self.checkpoint_path} at epoch {self.epoch}")
        return True

    def _check_parameters(self) -> None:
        for name, module in self.modules.items():
            for parameter_name, parameter in module.named_parameters():
                if not bool(torch.isfinite(parameter).all()):
                    raise NumericalFailure(
                        f"Parameter {name}.{parameter_name} became non-finite in epoch {self.epoch}; "
                        f"last good checkpoint: {self.checkpoint_path}",
                        step=self.epoch,
                    )

    def _train_epoch(self, data: TensorData, loss_fn: LossFunction) -> float:
        for module in self.modules.values():
            module.train()
        order = torch.randperm(len(data), generator=self.generator)
        total, batches = 0.0, 0
        for batch in data.batches(self.options["batch_size"], order):
            loss, _ = loss_fn(batch)
            if not bool(torch.isfinite(loss)):
                raise NumericalFailure(
                    f"Loss diverged at step {self.step}; last good checkpoint: {self.checkpoint_path}", step=self.step
                )
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.step += 1
            if self.on_step is not None:
                self.on_step(self.step, batch)
            total += float(loss)
            batches += 1
        return total / max(batches, 1)

    def _validate(self, data: TensorData, loss_fn: LossFunction) -> Tuple[float, Dict[str, float]]:
        for module in self.modules.values():
            module.eval()
        total, batches, metrics = 0.0, 0, {}
        with torch.no_grad():
            for batch in data.batches(self.options["batch_size"]):
                loss, batch_metrics = loss_fn(batch)
                total += float(loss)
                batches += 1
                for key, value in batch_metrics.items():
                    metrics[key] = metrics.get(key, 0.0) + value
        return total / max(batches, 1), {key: value / max(batches, 1) for key, value in metrics.items()}

    def fit(self, train: TensorData, validation: TensorData, loss_fn: LossFunction, epochs: Optional[int] = None):
        epochs = epochs if epochs is not None else self.options["epochs"]
        while self.epoch < epochs:
            train_loss = self._train_epoch(train, loss_fn)
            val_loss, metrics = self._validate(validation, loss_fn)
            self.epoch += 1
            self._check_parameters()
            if "nmse" in metrics:
                metrics["evm_db"] = evm_from_components(metrics["nmse"], 1.0)[1]
            if self.on_epoch is not None:
                metrics.update(self.on_epoch(self.epoch))
            learning_rate = self.schedule.step(val_loss)
            record = {"epoch": self.epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": learning_rate}
            record.update(metrics)
            self.history.append(record)
            logger.info(
                f"epoch {self.epoch}: train {train_loss:.5f} val {val_loss:.5f} lr {learning_rate:g} "
                + " ".join(f"{key} {value:.4f}" for key, value in metrics.items())
            )
            if self.epoch % self.options["checkpoint_every"] == 0:
                self.save_checkpoint()
        return self.history


def uniform_objective(model: LatentUniformModel, ctx: SignalContext) -> LossFunction:
    projector = ctx.projector

    def loss(batch: TensorData):
        s_hat, _ = model(batch.s_rows)
        x_hat_f = projector.apply_rows(s_hat, batch.scale)
        errors = normalized_error(batch.x_f, x_hat_f)
        return errors.mean(), {"nmse": float(errors.mean())}

    return loss


def train_latent_uniform(
    model: LatentUniformModel,
    ctx: SignalContext,
    train: TensorData,
    validation: TensorData,
    options: TrainingOptions,
    seed: int = 0,
    checkpoint_path: Optional[Path] = None,
) -> List[Dict[str, float]]:
    trainer = Trainer({"model": model}, list(model.parameters()), options, seed, checkpoint_path)
    trainer.resume()
    return trainer.fit(train, validation, uniform_objective(model, ctx))


class VqSchedule:
    """Warm-up without quantization, k-means++ codebook seeding, then periodic dead-codeword re-seeding"""

    def __init__(self, model: LatentVqModel, train: TensorData, options: TrainingOptions, seed: int = 0):
        self.model = model
        self.train = train
        self.warmup_steps = options["vq_warmup_steps"]
        self.reseed_interval = options["vq_reseed_interval"]
        self.seed = seed
        self.quantizing = self.warmup_steps == 0
        self.usage = torch.zeros(model.codebook.size, dtype=torch.int64)
        self.epoch_usage = torch.zeros(model.codebook.size, dtype=torch.int64)

    def _sample_latents(self, frames: int = 256) -> torch.Tensor:
        with torch.no_grad():
            return self.model.encoder(self.train.s_rows[:frames])

    def on_step(self, step: int, batch: TensorData) -> None:
        if not self.quantizing and step >= self.warmup_steps:
            self.model.initialize_codebook(self._sample_latents(), seed=self.seed)
            self.quantizing = True
            return
        if self.quantizing and self.reseed_interval and step % self.reseed_interval == 0:
            with torch.no_grad():
                latents = self.model.encoder(batch.s_rows)
            self.model.reseed_dead_codewords(latents, self.usage)
            self.usage.zero_()

    def record(self, indices: torch.Tensor) -> None:
        counts = torch.bincount(indices.flatten(), minlength=self.model.codebook.size)
        self.usage += counts
        self.epoch_usage += counts

    def on_epoch(self, epoch: int) -> Dict[str, float]:
        utilization = float((self.epoch_usage > 0).double().mean())
        self.epoch_usage.zero_()
        if self.quantizing:
            logger.info(f"epoch {epoch}: codebook utilization {utilization:.3f}")
        return {"codebook_utilization": utilization}


def vq_objective(model: LatentVqModel, ctx: SignalContext, schedule: VqSchedule) -> LossFunction:
    projector = ctx.projector

    def loss(batch: TensorData):
        if not schedule.quantizing:
            s_hat, _, _, _ = model(batch.s_rows, quantize=False)
            return loss_uq(batch.x_f, projector.apply_rows(s_hat, batch.scale)), {}
        s_hat, z, z_q, indices = model(batch.s_rows)
        if model.training:
            schedule.record(indices)
        x_hat_f = projector.apply_rows(s_hat, batch.scale)
        return (
            loss_vq(batch.x_f, x_hat_f, z, z_q, model.codebook.beta),
            {"nmse": float(normalized_error(batch.x_f, x_hat_f).mean())},
        )

    return loss


def train_latent_vq(
    model: LatentVqModel,
    ctx: SignalContext,
    train: TensorData,
    validation: TensorData,
    options: TrainingOptions,
    seed: int = 0,
    checkpoint_path: Optional[Path] = None,
) -> List[Dict[str, float]]:
    schedule = VqSchedule(model, train, options, seed)
    trainer = Trainer(
        {"model": model},
        list(model.parameters()),
        options,
        seed,
        checkpoint_path,
        on_step=schedule.on_step,
        on_epoch=schedule.on_epoch,
    )
    if trainer.resume():
        schedule.quantizing = trainer.step >= schedule.warmup_steps
    return trainer.fit(train, validation, vq_objective(model, ctx, schedule))


def rd_objective(model: NeuralCompressionModel, ctx: SignalContext, lam: float) -> LossFunction:
    projector = ctx.projector

    def loss(batch: TensorData):
        s_hat, _, likelihoods = model(batch.s_rows, noisy=True)
        rate = -torch.log2(likelihoods).mean()
        x_hat_f = projector.apply_rows(s_hat, batch.scale)
        return (
            rd_loss(batch.x_f, x_hat_f, rate, lam),
            {"rate": float(rate), "nmse": float(normalized_error(batch.x_f, x_hat_f).mean())},
        )

    return loss


def train_neural(
    model: NeuralCompressionModel,
    ctx: SignalContext,
    lam: float,
    train: TensorData,
    validation: TensorData,
    options: TrainingOptions,
    seed: int = 0,
    checkpoint_path: Optional[Path] = None,
) -> List[Dict[str, float]]:
    trainer = Trainer({"model": model}, list(model.parameters()), options, seed, checkpoint_path)
    trainer.resume()
    return trainer.fit(train, validation, rd_objective(model, ctx, lam))


def collect_symbols(model: NeuralCompressionModel, data: TensorData, batch_size: int = 256) -> np.ndarray:
    """Hard-rounded latents (frames, V, N') used to fix the entropy table support"""
    return np.concatenate(
        [model.encode_symbols(batch.s_rows).numpy() for batch in data.batches(batch_size)]
    ).astype(np.int64)
