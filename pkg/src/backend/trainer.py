"""
Trainer for the BASEN toolkit
Handles staged optimization (freezing, schedules, checkpoints, metric logs)
and the training pipelines: plain BASEN, the plain GCS baseline, two-stage
ResGS and the progressive ConvRS sparsity sweep.
"""

import copy
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from src.backend.basen import BASEN, SparseBasen
from src.backend.checkpoint_manager import CheckpointManager, load_checkpoint
from src.backend.config_manager import RunConfig
from src.backend.corpus import MixtureExample
from src.backend.dataset_handler import MixtureDataset
from src.backend.errors import ConfigValidationError, ShapeMismatchError, TrainingDivergedError
from src.backend.losses import (
    LossBreakdown,
    LossWeights,
    discretization_loss,
    si_sdr_batch,
    sparsity_loss,
    total_loss,
)
from src.backend.metric_logger import MetricLogger
from src.backend.schedules import TemperatureSchedule, make_scheduler, tau_at
from src.backend.selection import (
    ChannelSubset,
    ConvRSelector,
    GumbelChannelSelector,
    aggregate_selection,
)

logger = logging.getLogger(__name__)

ParamGroups = Sequence[Tuple[nn.Module, float]]


@dataclass
class StageResult:
    """Per-epoch losses of one stage; val_loss[0] is measured before training."""

    name: str
    epochs: int
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint: Optional[Path] = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "epochs": self.epochs,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
        }


@dataclass
class TrainingOutcome:
    method: str
    checkpoint: Path
    model: SparseBasen
    subset: Optional[ChannelSubset] = None
    stages: Dict[str, StageResult] = field(default_factory=dict)


def batch_loss(
    model: SparseBasen,
    batch: Dict[str, torch.Tensor],
    weights: LossWeights,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """Objective on one batch: -alpha * SI-SDR(mask 0) + beta * L_d + gamma * L_reg."""
    estimates, s = model(batch["mixture"], batch["eeg"], generator)
    si = si_sdr_batch(estimates[:, 0], batch["target"]).mean()
    if s is not None:
        l_d = discretization_loss(s, weights.k1, weights.b, weights.q)
        l_reg = sparsity_loss(s, weights.k2)
    else:
        l_d = si.new_zeros(())
        l_reg = si.new_zeros(())
    breakdown = total_loss(si, l_d, l_reg, weights)
    total = breakdown.total
    if weights.aux_interferer:
        other = batch["mixture"] - batch["target"]
        total = total - weights.alpha * si_sdr_batch(estimates[:, 1], other).mean()
    return total, breakdown


def _set_eval_modes(model: SparseBasen) -> bool:
    """Eval mode except a soft Gumbel selector, which keeps sampling. Returns the previous mode."""
    was_training = model.training
    model.eval()
    if isinstance(model.selector, GumbelChannelSelector) and not model.selector.hard:
        model.selector.train()
    return was_training


@torch.no_grad()
def validation_loss(
    model: SparseBasen,
    examples: List[MixtureExample],
    weights: LossWeights,
    batch_size: int = 8,
    seed: int = 0,
    device: Union[str, torch.device] = "cpu",
) -> float:
    """Mean objective over a dataset; soft Gumbel sampling uses a fixed seed so reruns agree."""
    was_training = _set_eval_modes(model)
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(MixtureDataset(examples), batch_size=batch_size, shuffle=False)
    total, count = 0.0, 0
    for batch in loader:
        batch = {k: v.to(device) for k, v in batch.items()}
        loss, _ = batch_loss(model, batch, weights, generator)
        n = batch["mixture"].shape[0]
        total += float(loss) * n
        count += n
    model.train(was_training)
    return total / max(count, 1)


@torch.no_grad()
def collect_selection_vectors(model: SparseBasen, examples: List[MixtureExample],
                              device: Union[str, torch.device] = "cpu") -> List[torch.Tensor]:
    """ConvRS selection vector of every example, in order."""
    if not isinstance(model.selector, ConvRSelector):
        raise ValueError("Selection vectors exist only for ConvRS models")
    was_training = model.training
    model.eval()
    vectors = [model.selector(torch.as_tensor(ex.eeg.data, dtype=torch.float32, device=device)).cpu()
               for ex in examples]
    model.train(was_training)
    return vectors


class Trainer:
    """Runs training stages on one wrapped model inside one run directory."""

    def __init__(self, model: SparseBasen, cfg: RunConfig, run_dir: Union[str, Path], method: str,
                 quiet: bool = False):
        """Initialize the trainer; metrics append to <run_dir>/metrics.jsonl."""
        self.model = model
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.method = method
        self.quiet = quiet
        self.device = torch.device(cfg.device)
        self.checkpoints = CheckpointManager(self.run_dir)
        self.metrics = MetricLogger(self.run_dir / "metrics.jsonl")
        self.optimizer: Optional[torch.optim.Optimizer] = None
        self.global_step = 0
        self.stage_index = 0
        self.model.to(self.device)

    def close(self) -> None:
        self.metrics.close()

    def _stage_seed(self) -> int:
        return self.cfg.seed * 1000 + self.stage_index

    def _freeze_all_but(self, groups: ParamGroups) -> List[nn.Parameter]:
        for p in self.model.parameters():
            p.requires_grad_(False)
        trainable = []
        for module, _ in groups:
            for p in module.parameters():
                p.requires_grad_(True)
                trainable.append(p)
        return trainable

    def _build_optimizer(self, groups: ParamGroups, carry_state: bool) -> torch.optim.Optimizer:
        sched = self.cfg.schedule
        optimizer = torch.optim.Adam(
            [{"params": list(module.parameters()), "lr": lr} for module, lr in groups],
            betas=sched.betas,
            weight_decay=sched.weight_decay,
        )
        if carry_state and self.optimizer is not None:
            for group in optimizer.param_groups:
                for p in group["params"]:
                    if p in self.optimizer.state:
                        optimizer.state[p] = self.optimizer.state[p]
        return optimizer

    def _set_tau(self, tau: Optional[TemperatureSchedule], epoch: float) -> Optional[float]:
        if tau is None or not isinstance(self.model.selector, GumbelChannelSelector):
            return None
        self.model.selector.tau = tau_at(epoch, tau)
        return self.model.selector.tau

    def _validate(self, val: List[MixtureExample], weights: LossWeights) -> float:
        return validation_loss(self.model, val, weights, self.cfg.schedule.batch_size,
                               seed=self.cfg.seed, device=self.device)

    def run_stage(
        self,
        name: str,
        train: List[MixtureExample],
        val: List[MixtureExample],
        epochs: int,
        groups: ParamGroups,
        weights: LossWeights,
        tau: Optional[TemperatureSchedule] = None,
        carry_optimizer: bool = False,
    ) -> StageResult:
        """
        Train the modules in `groups` (module, peak lr) with everything else frozen.

        The best validation state is restored at the end of the stage and saved
        as checkpoint `name`.

        Raises:
            TrainingDivergedError: non-finite loss; the last good checkpoint is kept
        """
        if not train:
            raise ValueError("Training set is empty")
        if not val:
            logger.warning("Stage %s has no validation examples; validating on the training set", name)
            val = train
        self.stage_index += 1
        result = StageResult(name=name, epochs=epochs)
        trainable = self._freeze_all_but(groups)

        if tau is not None:
            tau = tau.spanning(epochs)
            self._set_tau(tau, 0)
        initial = self._validate(val, weights)
        if not math.isfinite(initial):
            raise TrainingDivergedError(f"Stage {name}: validation loss is {initial} before training",
                                        self._last_good())
        result.val_loss.append(initial)
        best_loss, best_state = initial, copy.deepcopy(self.model.state_dict())
        result.checkpoint = self.checkpoints.save(self.model, name, self.method, name, 0, initial)

        if epochs == 0:
            return result

        sched = self.cfg.schedule
        data_generator = torch.Generator().manual_seed(self._stage_seed())
        gumbel_generator = torch.Generator().manual_seed(self._stage_seed() + 1)
        loader = DataLoader(MixtureDataset(train), batch_size=sched.batch_size, shuffle=True,
                            generator=data_generator, num_workers=0)
        n_batches = len(loader)
        self.optimizer = self._build_optimizer(groups, carry_optimizer)
        scheduler = make_scheduler(self.optimizer, epochs * n_batches, sched.warmup_ratio)

        progress = tqdm(range(1, epochs + 1), desc=name, disable=self.quiet or not sys.stderr.isatty())
        for epoch in progress:
            self.model.train()
            running = 0.0
            for i, batch in enumerate(loader):
                batch = {k: v.to(self.device) for k, v in batch.items()}
                tau_now = self._set_tau(tau, epoch - 1 + i / n_batches)
                lr_now = self.optimizer.param_groups[0]["lr"]

                loss, breakdown = batch_loss(self.model, batch, weights, gumbel_generator)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"Stage {name}: loss became {float(loss)} at epoch {epoch}, step {self.global_step}",
                        self._last_good(),
                    )
                self.optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(trainable, sched.grad_clip)
                self.optimizer.step()
                scheduler.step()

                self.global_step += 1
                running += float(loss)
                self.metrics.log({
                    "step": self.global_step,
                    **breakdown.as_dict(),
                    "total": float(loss),
                    "lr": lr_now,
                    "tau": tau_now,
                    "stage": name,
                    "epoch": epoch,
                })

            self._set_tau(tau, epoch)
            val_loss = self._validate(val, weights)
            result.train_loss.append(running / n_batches)
            result.val_loss.append(val_loss)
            logger.info("%s epoch %d/%d: train %.4f, val %.4f", name, epoch, epochs,
                        result.train_loss[-1], val_loss)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(f"Stage {name}: validation loss became {val_loss} at epoch {epoch}",
                                            self._last_good())
            if val_loss < best_loss:
                best_loss, best_state = val_loss, copy.deepcopy(self.model.state_dict())
                result.best_epoch = epoch
                result.checkpoint = self.checkpoints.save(self.model, name, self.method, name, epoch, val_loss)

        self.model.load_state_dict(best_state)
        logger.info("Stage %s finished: best val %.4f at epoch %d", name, best_loss, result.best_epoch)
        return result

    def _last_good(self) -> Optional[str]:
        return str(self.checkpoints.last_good) if self.checkpoints.last_good else None


def _check_channels(train: List[MixtureExample], cfg: RunConfig) -> int:
    if not train:
        raise ValueError("Training set is empty")
    q = train[0].eeg.n_channels
    if q != cfg.model.eeg_channels:
        raise ShapeMismatchError(f"Dataset has {q} EEG channels, model.eeg_channels is {cfg.model.eeg_channels}")
    return q


def _write_history(run_dir: Path, method: str, stages: Dict[str, StageResult], extra: Optional[dict] = None) -> None:
    os.makedirs(run_dir, exist_ok=True)
    history = {"method": method, "stages": [s.to_dict() for s in stages.values()], **(extra or {})}
    with open(run_dir / "history.json", "w", encoding="utf-8") as f:
        json.dump(history, f, indent=2, sort_keys=True)


def validate_gamma_list(gamma_list: Sequence[float]) -> List[float]:
    """Sweep levels must start at 0 and increase strictly."""
    gammas = [float(g) for g in gamma_list]
    if not gammas or gammas[0] != 0.0 or any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise ConfigValidationError(["convrs.gamma_list"],
                                    [f"convrs.gamma_list must start at 0 and increase strictly, got {gammas}"])
    return gammas


def gamma_tag(gamma: float) -> str:
    return f"gamma{gamma:.2f}"


def train_basen(train: List[MixtureExample], val: List[MixtureExample], cfg: RunConfig,
                run_dir: Union[str, Path], quiet: bool = False) -> TrainingOutcome:
    """Train BASEN alone on the full EEG montage."""
    run_dir = Path(run_dir)
    _check_channels(train, cfg)
    torch.manual_seed(cfg.seed)
    model = SparseBasen(BASEN(cfg.model))
    weights = replace(cfg.loss, beta=0.0, gamma=0.0)

    trainer = Trainer(model, cfg, run_dir, "basen", quiet)
    try:
        stage = trainer.run_stage("basen", train, val, cfg.schedule.total_epochs,
                                  [(model.basen, cfg.schedule.max_lr)], weights)
    finally:
        trainer.close()
    stages = {"basen": stage}
    _write_history(run_dir, "basen", stages)
    return TrainingOutcome("basen", stage.checkpoint, model, None, stages)


def train_gcs(train: List[MixtureExample], val: List[MixtureExample], cfg: RunConfig,
              run_dir: Union[str, Path], quiet: bool = False) -> TrainingOutcome:
    """Plain GCS baseline: K selected channels feed a K-channel BASEN, trained jointly from scratch."""
    run_dir = Path(run_dir)
    q = _check_channels(train, cfg)
    k = cfg.resgs.k_neurons
    torch.manual_seed(cfg.seed)
    selector = GumbelChannelSelector(q, k)
    model = SparseBasen(BASEN(replace(cfg.model, eeg_channels=k)), selector, mode="gcs")
    weights = replace(cfg.loss, beta=0.0, gamma=0.0)

    trainer = Trainer(model, cfg, run_dir, "gcs", quiet)
    try:
        stage = trainer.run_stage("gcs", train, val, cfg.schedule.total_epochs,
                                  [(model.basen, cfg.schedule.max_lr), (selector, cfg.resgs.selector_lr)],
                                  weights, tau=cfg.temperature)
    finally:
        trainer.close()
    subset = selector.test_select(method="gcs")
    subset.to_json(run_dir / "subset.json")
    stages = {"gcs": stage}
    _write_history(run_dir, "gcs", stages)
    logger.info("GCS selected %s (%d duplicates)", subset.indices, subset.duplicate_count)
    return TrainingOutcome("gcs", stage.checkpoint, model, subset, stages)


def train_resgs(train: List[MixtureExample], val: List[MixtureExample], cfg: RunConfig,
                run_dir: Union[str, Path], pretrained: Optional[Union[str, Path]] = None,
                quiet: bool = False) -> TrainingOutcome:
    """
    Two-stage residual Gumbel selection on top of a pre-trained BASEN.

    Stage 1 trains GCS and BASEN with the residual blend under temperature
    annealing. Stage 2 freezes GCS, switches it to hard argmax selection,
    drops the residual and fine-tunes BASEN on the padded selection alone.
    Without `pretrained`, BASEN is first trained under <run_dir>/pretrain.
    """
    run_dir = Path(run_dir)
    q = _check_channels(train, cfg)
    pretrained = pretrained or cfg.resgs.pretrained_checkpoint
    if pretrained is None:
        logger.info("No pre-trained BASEN given; training one first")
        pretrained = train_basen(train, val, cfg, run_dir / "pretrain", quiet).checkpoint
    base, _ = load_checkpoint(pretrained, expected_config=cfg.model, device=cfg.device)

    torch.manual_seed(cfg.seed)
    selector = GumbelChannelSelector(q, cfg.resgs.k_neurons)
    model = SparseBasen(base.basen, selector, mode="resgs",
                        residual_weight=cfg.resgs.residual_weight, placement=cfg.resgs.placement)
    weights = replace(cfg.loss, beta=0.0, gamma=0.0)

    trainer = Trainer(model, cfg, run_dir, "resgs", quiet)
    try:
        stage1 = trainer.run_stage("resgs_stage1", train, val, cfg.resgs.stage1_epochs,
                                   [(model.basen, cfg.schedule.max_lr), (selector, cfg.resgs.selector_lr)],
                                   weights, tau=cfg.temperature)
        selector.hard = True
        model.residual = False
        stage2 = trainer.run_stage("resgs_stage2", train, val, cfg.resgs.stage2_epochs,
                                   [(model.basen, cfg.schedule.max_lr)], weights,
                                   carry_optimizer=not cfg.resgs.fresh_optimizer)
    finally:
        trainer.close()

    subset = selector.test_select(method="resgs")
    subset.to_json(run_dir / "subset.json")
    stages = {"resgs_stage1": stage1, "resgs_stage2": stage2}
    _write_history(run_dir, "resgs", stages, {"pretrained": str(pretrained)})
    logger.info("ResGS selected %s (%d duplicates)", subset.indices, subset.duplicate_count)
    return TrainingOutcome("resgs", stage2.checkpoint, model, subset, stages)


def train_convrs_progressive(train: List[MixtureExample], val: List[MixtureExample], cfg: RunConfig,
                             run_dir: Union[str, Path], gamma_list: Optional[Sequence[float]] = None,
                             quiet: bool = False) -> Dict[float, TrainingOutcome]:
    """
    Progressive ConvRS sweep over increasing sparsity weights.

    gamma = 0 trains selector and BASEN jointly from scratch. Every later
    gamma starts from the previous model: stage 1 trains the selector with
    BASEN frozen, stage 2 fine-tunes BASEN with the selector frozen. Each
    level's subset aggregates selection vectors over the validation set.
    """
    run_dir = Path(run_dir)
    gammas = validate_gamma_list(cfg.convrs.gamma_list if gamma_list is None else gamma_list)
    q = _check_channels(train, cfg)
    rs = cfg.convrs
    torch.manual_seed(cfg.seed)
    selector = ConvRSelector(q, rs.n_blocks, rs.reduced_length, rs.kernel_size)
    model = SparseBasen(BASEN(cfg.model), selector, mode="convrs")
    subsets_dir = run_dir / "subsets"
    os.makedirs(subsets_dir, exist_ok=True)

    outcomes: Dict[float, TrainingOutcome] = {}
    stages: Dict[str, StageResult] = {}
    sweep = []
    trainer = Trainer(model, cfg, run_dir, "convrs", quiet)
    try:
        for gamma in gammas:
            tag = gamma_tag(gamma)
            weights = replace(cfg.loss, gamma=gamma)
            if gamma == 0.0:
                joint = trainer.run_stage(f"{tag}_joint", train, val, rs.initial_epochs,
                                          [(selector, rs.selector_lr), (model.basen, cfg.schedule.max_lr)],
                                          weights)
                level = {joint.name: joint}
            else:
                stage1 = trainer.run_stage(f"{tag}_stage1", train, val, rs.stage1_epochs,
                                           [(selector, rs.stage1_lr)], weights)
                stage2 = trainer.run_stage(f"{tag}_stage2", train, val, rs.stage2_epochs,
                                           [(model.basen, rs.stage2_lr)], weights)
                level = {stage1.name: stage1, stage2.name: stage2}
            stages.update(level)
            last = list(level.values())[-1]

            vectors = collect_selection_vectors(model, val or train, trainer.device)
            subset = aggregate_selection(vectors, rs.threshold, gamma=gamma)
            subset.to_json(subsets_dir / f"{tag}.json")
            snapshot = SparseBasen(copy.deepcopy(model.basen), copy.deepcopy(selector), mode="convrs")
            outcomes[gamma] = TrainingOutcome("convrs", last.checkpoint, snapshot, subset, level)
            sweep.append({"gamma": gamma, "n_channels": len(subset.indices), "indices": subset.indices,
                          "val_loss": last.val_loss[last.best_epoch], "checkpoint": str(last.checkpoint)})
            logger.info("gamma %.2f: %d channels selected %s", gamma, len(subset.indices), subset.indices)
    finally:
        trainer.close()

    final = outcomes[gammas[-1]].subset
    final.to_json(run_dir / "subset.json")
    _write_history(run_dir, "convrs", stages, {"sweep": sweep})
    return outcomes
