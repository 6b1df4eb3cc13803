"""Full-objective training: alternating discriminator and main updates, telemetry, resume."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .crgan import Crgan, feature_d_loss, feature_g_loss, image_d_loss, image_g_loss, loss_rec
from .data import TRAIN_RATES, MlrDataset, TrainBatch, next_batch
from .nn import Module
from .optim import SGD, SgdConfig
from .reid import ReidNet, joint_forward, loss_id, loss_triplet
from .tensor import Tensor

log = logging.getLogger(__name__)

# Sub-streams of the root seed; ablations sharing a seed share initial weights and batches.
SEED_INIT, SEED_DATA, SEED_GALLERY = 1, 2, 3

TELEMETRY_COLUMNS = ("epoch", "L_id", "L_tri", "L_rec", "L_advF_d", "L_advF_g", "L_advI_d", "L_advI_g", "total")
ABLATIONS = ("no_adv_DF", "no_adv_DI", "no_rec", "no_cls", "f_only", "g_only")


@dataclass
class TrainConfig:
    lambda_adv_df: float = 1.0
    lambda_rec: float = 1.0
    lambda_adv_di: float = 1.0
    margin: float = 2.0
    lr_main: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_disc: float = 1e-4
    p: int = 8
    k: int = 2
    epochs: int = 200
    steps_per_epoch: int = 0  # 0: len(train) // batch
    seed: int = 0
    image_size: tuple[int, int] = (32, 16)
    channels: tuple[int, ...] = (16, 32, 64, 64)
    rates: tuple[int, ...] = TRAIN_RATES
    image_adv_real_weight: float = 2.0
    no_adv_DF: bool = False
    no_adv_DI: bool = False
    no_rec: bool = False
    no_cls: bool = False
    f_only: bool = False
    g_only: bool = False

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.channels = tuple(int(v) for v in self.channels)
        self.rates = tuple(int(v) for v in self.rates)
        for name in ("lambda_adv_df", "lambda_rec", "lambda_adv_di"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lr_main <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.f_only and self.g_only:
            raise ValueError("f_only and g_only are mutually exclusive")
        if self.image_adv_real_weight not in (1.0, 2.0):
            raise ValueError("image_adv_real_weight must be 1 or 2")
        if self.p < 2 or self.k < 2:
            raise ValueError("PK sampling needs P >= 2 and K >= 2 for batch-hard triplets")
        if min(self.rates) < 2:
            raise ValueError("training down-sampling rates must be >= 2")

    @property
    def batch_size(self) -> int:
        return self.p * self.k

    @property
    def mode(self) -> str:
        return "f" if self.f_only else "g" if self.g_only else "joint"

    @property
    def w_adv_df(self) -> float:
        return 0.0 if self.no_adv_DF else self.lambda_adv_df

    @property
    def w_rec(self) -> float:
        return 0.0 if self.no_rec else self.lambda_rec

    @property
    def w_adv_di(self) -> float:
        return 0.0 if self.no_adv_DI else self.lambda_adv_di

    @property
    def use_cls(self) -> bool:
        return not self.no_cls

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("image_size", "channels", "rates"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def ablated(self, variant: str) -> TrainConfig:
        if variant == "full":
            return dataclasses.replace(self)
        if variant not in ABLATIONS:
            raise ValueError(f"unknown ablation {variant!r}; expected 'full' or one of {ABLATIONS}")
        return dataclasses.replace(self, **{variant: True})


class CadNet(Module):
    """CRGAN (E, G, D_F, D_I) plus the re-ID branch (F, C)."""

    def __init__(self, config: TrainConfig, num_identities: int):
        super().__init__()
        rng = np.random.default_rng([config.seed, SEED_INIT])
        self.num_identities = num_identities
        self.crgan = self.add_module("crgan", Crgan(config.image_size, config.channels, rng))
        self.reid = self.add_module("reid", ReidNet(config.channels, num_identities, rng, mode=config.mode))

    def group(self, which: str) -> dict[str, Tensor]:
        c = self.crgan
        if which == "D_F":
            return dict(c.d_feature.named_parameters("crgan.D_F."))
        if which == "D_I":
            return dict(c.d_image.named_parameters("crgan.D_I."))
        if which == "main":
            out = dict(c.encoder.named_parameters("crgan.E."))
            out.update(c.decoder.named_parameters("crgan.G."))
            out.update(self.reid.named_parameters("reid."))
            return out
        raise KeyError(which)

    def forward(self, x: np.ndarray | Tensor):
        x = x if isinstance(x, Tensor) else _input(x)
        return joint_forward(x, self.crgan, self.reid)


@dataclass
class StepReport:
    L_id: float = 0.0
    L_tri: float = 0.0
    L_rec: float = 0.0
    L_advF_d: float = 0.0
    L_advF_g: float = 0.0
    L_advI_d: float = 0.0
    L_advI_g: float = 0.0
    total: float = 0.0

    def as_row(self) -> list[float]:
        return [getattr(self, c) for c in TELEMETRY_COLUMNS[1:]]


def _input(a: np.ndarray) -> Tensor:
    # batches are float32 in training; float64 batches stay float64 for gradient checks
    return Tensor(a, dtype=a.dtype if a.dtype in (np.float32, np.float64) else None)


def _checked(name: str, t: Tensor) -> Tensor:
    v = float(t.data)
    if not math.isfinite(v):
        raise FloatingPointError(f"non-finite loss term {name} = {v}")
    return t


class Trainer:
    """Owns the network, its three optimizers and the epoch counter.

    Each step runs: (1) D_F update on detached features, (2) D_I update on
    detached recovered images, (3) one update of E, G, F, C on the weighted
    sum of the active objectives with both discriminators frozen. Skipped
    terms are reported as 0.
    """

    def __init__(self, config: TrainConfig, num_identities: int):
        self.config = config
        self.model = CadNet(config, num_identities)
        momentum, wd = config.momentum, config.weight_decay
        self.opt_main = SGD(self.model.group("main"), SgdConfig(config.lr_main, momentum, wd))
        self.opt_df = SGD(self.model.group("D_F"), SgdConfig(config.lr_disc, momentum, wd))
        self.opt_di = SGD(self.model.group("D_I"), SgdConfig(config.lr_disc, momentum, wd))
        self.epoch = 0
        self.disc_forwards = 0

    @property
    def optimizers(self) -> dict[str, SGD]:
        return {"main": self.opt_main, "D_F": self.opt_df, "D_I": self.opt_di}

    def _forward(self, batch: TrainBatch):
        n = len(batch)
        out = self.model.forward(np.concatenate([batch.hr, batch.lr]))
        hr_idx, lr_idx = np.arange(n), np.arange(n, 2 * n)
        parts = {
            "f_h": T.take(out.f, hr_idx),
            "f_l": T.take(out.f, lr_idx),
            "rec_h": T.take(out.recovered, hr_idx),
            "rec_l": T.take(out.recovered, lr_idx),
            "u_h": T.take(out.u, hr_idx),
            "u_l": T.take(out.u, lr_idx),
        }
        return out, parts

    def _main_terms(self, batch: TrainBatch, out, parts, report: StepReport) -> list[tuple[float, Tensor]]:
        cfg, crgan = self.config, self.model.crgan
        terms: list[tuple[float, Tensor]] = []
        x_h, x_tgt = _input(batch.hr), _input(batch.lr_targets)
        l_rec = _checked("L_rec", loss_rec(parts["rec_h"], parts["rec_l"], x_h, x_tgt))
        report.L_rec = float(l_rec.data)
        if cfg.w_rec > 0:
            terms.append((cfg.w_rec, l_rec))
        if cfg.use_cls:
            labels = np.concatenate([batch.hr_labels, batch.lr_labels])
            l_id = _checked("L_id", loss_id(out.probs, labels))
            l_tri = _checked("L_tri", loss_triplet(parts["u_h"], batch.hr_labels, parts["u_l"], batch.lr_labels, cfg.margin))
            report.L_id, report.L_tri = float(l_id.data), float(l_tri.data)
            terms += [(1.0, l_id), (1.0, l_tri)]
        if cfg.w_adv_df > 0:
            self.disc_forwards += 1
            g_f = _checked("L_advF_g", feature_g_loss(crgan.d_feature, parts["f_l"]))
            report.L_advF_g = float(g_f.data)
            terms.append((cfg.w_adv_df, g_f))
        if cfg.w_adv_di > 0:
            self.disc_forwards += 1
            g_i = _checked("L_advI_g", image_g_loss(crgan.d_image, parts["rec_l"], parts["rec_h"]))
            report.L_advI_g = float(g_i.data)
            terms.append((cfg.w_adv_di, g_i))
        return terms

    def _d_feature_loss(self, parts) -> Tensor:
        self.disc_forwards += 1
        return _checked("L_advF_d", feature_d_loss(self.model.crgan.d_feature, parts["f_h"], parts["f_l"]))

    def _d_image_loss(self, batch: TrainBatch, parts) -> Tensor:
        self.disc_forwards += 1
        loss = image_d_loss(
            self.model.crgan.d_image, _input(batch.hr), parts["rec_l"], parts["rec_h"], self.config.image_adv_real_weight
        )
        return _checked("L_advI_d", loss)

    def train_step(self, batch: TrainBatch) -> StepReport:
        report = StepReport()
        out, parts = self._forward(batch)

        if self.config.w_adv_df > 0:
            d_loss = self._d_feature_loss(parts)
            report.L_advF_d = float(d_loss.data)
            self.opt_df.zero_grad()
            T.backward(d_loss)
            self.opt_df.step()
        if self.config.w_adv_di > 0:
            d_loss = self._d_image_loss(batch, parts)
            report.L_advI_d = float(d_loss.data)
            self.opt_di.zero_grad()
            T.backward(d_loss)
            self.opt_di.step()

        terms = self._main_terms(batch, out, parts, report)
        if terms:
            total = terms[0][1] if terms[0][0] == 1.0 else T.mul(terms[0][1], terms[0][0])
            for w, t in terms[1:]:
                total = T.add(total, t if w == 1.0 else T.mul(t, w))
            report.total = float(_checked("total", total).data)
            self.opt_main.zero_grad()
            T.backward(total)
            self.opt_main.step(only_with_grad=True)
        return report

    def compute_losses(self, batch: TrainBatch) -> StepReport:
        """All loss terms at the current parameters, without updating anything."""
        report = StepReport()
        out, parts = self._forward(batch)
        if self.config.w_adv_df > 0:
            report.L_advF_d = float(self._d_feature_loss(parts).data)
        if self.config.w_adv_di > 0:
            report.L_advI_d = float(self._d_image_loss(batch, parts).data)
        terms = self._main_terms(batch, out, parts, report)
        report.total = float(np.sum([w * float(t.data) for w, t in terms]))
        return report

    def steps_per_epoch(self, dataset: MlrDataset) -> int:
        return self.config.steps_per_epoch or max(1, len(dataset.train) // self.config.batch_size)

    def epoch_batches(self, dataset: MlrDataset, epoch: int):
        rng = np.random.default_rng([self.config.seed, SEED_DATA, epoch])
        for _ in range(self.steps_per_epoch(dataset)):
            yield next_batch(dataset, self.config.batch_size, (self.config.p, self.config.k), rng, self.config.rates)

    def run_epoch(self, dataset: MlrDataset) -> list[float]:
        reports = [self.train_step(b) for b in self.epoch_batches(dataset, self.epoch)]
        self.epoch += 1
        means = np.mean([r.as_row() for r in reports], axis=0)
        return [self.epoch, *(float(v) for v in means)]


def train(
    dataset: MlrDataset,
    config: TrainConfig,
    trainer: Trainer | None = None,
    epochs: int | None = None,
    on_epoch: Callable[[Trainer, list[float]], None] | None = None,
) -> tuple[Trainer, list[list[float]]]:
    """Run epochs until ``config.epochs`` (or ``epochs`` more) and return per-epoch telemetry.

    Passing a ``trainer`` restored from a checkpoint continues from its epoch.
    """
    if trainer is None:
        trainer = Trainer(config, dataset.num_identities)
    if trainer.model.num_identities != dataset.num_identities:
        raise ValueError(
            f"model has {trainer.model.num_identities} classes, dataset has {dataset.num_identities} identities"
        )
    stop = config.epochs if epochs is None else trainer.epoch + epochs
    rows = []
    while trainer.epoch < stop:
        row = trainer.run_epoch(dataset)
        rows.append(row)
        log.info("epoch %d  %s", row[0], "  ".join(f"{k}={v:.4f}" for k, v in zip(TELEMETRY_COLUMNS[1:], row[1:])))
        if on_epoch is not None:
            on_epoch(trainer, row)
    return trainer, rows


def write_telemetry(path: Path | str, rows: list[list[float]], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(TELEMETRY_COLUMNS)
        for row in rows:
            w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])


def read_telemetry(path: Path | str) -> list[dict[str, float]]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
