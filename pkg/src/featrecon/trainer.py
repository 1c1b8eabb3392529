"""Minimax training of the feature-conditional generator across progressive
stages.

Each step runs one critic update (score fakes minus reals plus gradient
penalty) followed by one generator update (scheduled sum of latent-metric,
distillation, adversarial and pixel losses). Identity-space losses are
computed on bilinearly upsampled outputs at the full matcher resolution; the
adversarial and pixel terms operate at the stage resolution against avg-pooled
reals.

Determinism: every per-step random draw (batch indices, background noise,
penalty interpolation, pair sampling) is derived statelessly from
(seed, step), so fixed-seed reruns and mid-run resumes reproduce the exact
step sequence.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import Dataset, load_dataset
from .distiller import StudentModel, load_student
from .errors import CheckpointError, ConfigError, NumericError, TrainingDivergenceError
from .flow import FlowModel, load_flow
from .gan import Critic, GanConfig, Generator, grow_stage, sample_background
from .losses import (
    DistillWeights,
    LossComponents,
    LossWeights,
    ScheduleState,
    adversarial_loss,
    bijective_loss,
    discriminator_loss,
    distillation_loss,
    generator_total_loss,
    recon_l1,
    schedule_weights,
)
from .oracle import TeacherModel, load_teacher

CHECKPOINT_VERSION = 1

METRICS_COLUMNS = [
    "step", "stage", "fade_in", "loss_g", "loss_d",
    "l_biject", "l_distill", "l_adv", "l_recon",
    "lambda_b", "lambda_d", "lambda_adv", "lambda_r",
]


@dataclass
class TrainMetrics:
    step: int
    stage: int
    fade_in: float
    loss_g: float
    loss_d: float
    l_biject: float
    l_distill: float
    l_adv: float
    l_recon: float
    weights: LossWeights
    wall_clock: float

    def csv_row(self) -> list:
        return [
            self.step, self.stage, repr(self.fade_in),
            repr(self.loss_g), repr(self.loss_d),
            repr(self.l_biject), repr(self.l_distill),
            repr(self.l_adv), repr(self.l_recon),
            repr(self.weights.b), repr(self.weights.d),
            repr(self.weights.adv), repr(self.weights.r),
        ]


@dataclass
class Batch:
    images: torch.Tensor  # full resolution
    ids: np.ndarray
    features: torch.Tensor  # cached blackbox features of the full-res reals


def _derived_seed(*key) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def save_checkpoint(models: dict, optim_state: dict, step: int, path: str, extra: dict | None = None):
    """Persist model + optimizer tensors losslessly."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "models": {k: v.state_dict() for k, v in models.items()},
        "optim": optim_state,
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path: str) -> dict:
    """Read a checkpoint; truncated or incompatible files raise
    :class:`CheckpointError`."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload.get('format_version')!r}"
        )
    return payload


class GanTrainer:
    """Owns the generator/critic pair, the frozen identity models, and the
    stage plan."""

    def __init__(
        self,
        config: RunConfig,
        teacher: TeacherModel,
        flow: FlowModel,
        dataset: Dataset,
        student: StudentModel | None = None,
    ):
        if config.mode == "blackbox" and student is None:
            raise ConfigError("blackbox mode requires a distilled student")
        if dataset.resolution != teacher.resolution:
            raise ConfigError("dataset resolution does not match the teacher")
        self.config = config
        self.teacher = teacher
        self.flow = flow
        self.student = student
        self.dataset = dataset

        torch.manual_seed(config.trainer.seed)
        gan_cfg = GanConfig(
            feature_dim=teacher.feature_dim,
            channels=dataset.channels,
            max_resolution=config.trainer.max_resolution,
            stage_channels=tuple(config.gan.stage_channels),
            noise_dim=config.gan.noise_dim,
            cond_dim=config.gan.cond_dim,
            mapping_layers=config.gan.mapping_layers,
            fade_fraction=config.gan.fade_fraction,
        )
        self.G = Generator(gan_cfg)
        self.D = Critic(gan_cfg)
        self.opt_g = torch.optim.Adam(
            self.G.parameters(), lr=config.optim.lr, betas=(config.optim.beta1, config.optim.beta2)
        )
        self.opt_d = torch.optim.Adam(
            self.D.parameters(), lr=config.optim.lr, betas=(config.optim.beta1, config.optim.beta2)
        )

        # Frozen supervision sources: the attack input is always the
        # blackbox's own feature; the student only backs the distill term.
        for p in self.flow.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.flow.eval()
        for p in self.teacher.net.parameters():
            p.requires_grad_(False)
            p.grad = None  # stale gradients from the teacher's own training
        if self.student is not None:
            for p in self.student.parameters():
                p.requires_grad_(False)
                p.grad = None
            self.student.net.eval()

        if config.mode == "whitebox":
            self.feature_net = teacher.tap_model()
        else:
            self.feature_net = student
        n_taps = len(self.feature_net.tap_shapes)
        lam_j = list(config.losses.lambda_j)
        if len(lam_j) == 1:
            lam_j = lam_j * n_taps
        if len(lam_j) != n_taps:
            raise ConfigError(f"{len(lam_j)} layer weights for {n_taps} tap layers")
        self.distill_weights = DistillWeights(tuple(lam_j), config.losses.lambda_a)

        self.schedule = ScheduleState(
            alpha=config.losses.alpha, beta=config.losses.beta, r_max=config.num_stages
        )

        self.images = torch.from_numpy(dataset.images)
        self.ids = dataset.labels
        with torch.no_grad():
            feats = [
                teacher.embed(self.images[i : i + 512])
                for i in range(0, len(dataset), 512)
            ]
            self.features = torch.cat(feats)

        # stage plan: (stage, first_step, steps, batch, fade_ramp_steps)
        self.stage_plan = []
        first = 0
        for stage in range(1, config.num_stages + 1):
            steps = config.steps_for_stage(stage)
            ramp = int(config.gan.fade_fraction * steps) if stage > 1 else 0
            self.stage_plan.append(
                {"stage": stage, "first_step": first, "steps": steps,
                 "batch": config.batch_size_for_stage(stage), "ramp": ramp}
            )
            first += steps
        self.total_steps = first
        self._lr_reduced = False
        self._last_stable = self._capture_state()

    # -- deterministic per-step draws ------------------------------------

    def _stage_at(self, step: int) -> dict:
        for plan in self.stage_plan:
            if step < plan["first_step"] + plan["steps"]:
                return plan
        raise ValueError(f"step {step} beyond schedule ({self.total_steps})")

    def _fade_at(self, step: int) -> float:
        plan = self._stage_at(step)
        if plan["stage"] == 1 or plan["ramp"] == 0:
            return 1.0
        return min(1.0, (step - plan["first_step"]) / plan["ramp"])

    def make_batch(self, step: int) -> Batch:
        plan = self._stage_at(step)
        rng = np.random.default_rng(np.random.SeedSequence([self.config.trainer.seed, 11, step]))
        idx = rng.choice(len(self.dataset), size=min(plan["batch"], len(self.dataset)), replace=False)
        return Batch(
            images=self.images[idx],
            ids=self.ids[idx],
            features=self.features[idx],
        )

    # -- one minimax step --------------------------------------------------

    def training_step(self, batch: Batch, step: int) -> TrainMetrics:
        t0 = time.monotonic()
        cfg = self.config
        plan = self._stage_at(step)
        stage, fade = plan["stage"], self._fade_at(step)
        res = 4 * 2 ** (stage - 1)
        weights = schedule_weights(self.schedule, stage)

        real_full = batch.images
        real_stage = real_full
        while real_stage.shape[-1] > res:
            real_stage = F.avg_pool2d(real_stage, 2)

        v = sample_background(
            len(batch.ids), cfg.gan.noise_dim, seed=_derived_seed(cfg.trainer.seed, 13, step)
        )
        fake = self.G(batch.features, v, stage, fade)

        # critic update (Eq-style: fakes up, reals down, unit-gradient anchor)
        self.opt_d.zero_grad()
        eps_gen = torch.Generator().manual_seed(_derived_seed(cfg.trainer.seed, 17, step))
        loss_d = discriminator_loss(
            lambda x: self.D(x, stage, fade),
            real_stage,
            fake.detach(),
            gp_weight=cfg.losses.gp_weight,
            eps_generator=eps_gen,
        )
        if not torch.isfinite(loss_d):
            raise NumericError(f"non-finite critic loss at step {step}")
        loss_d.backward()
        self.opt_d.step()

        # generator update with the stage's scheduled weights. Identity-space
        # losses compare at the matcher resolution against the same degraded
        # view of the real (the target must be reachable at this stage).
        self.opt_g.zero_grad()
        l_adv = adversarial_loss(self.D(fake, stage, fade))
        l_recon = recon_l1(fake, real_stage)
        # identity losses may run on a sub-batch (same expectation, cheaper
        # steps at the large-batch low-resolution stages)
        k = cfg.losses.identity_subbatch
        ident_idx = slice(None) if k is None else slice(0, max(2, min(k, len(batch.ids))))
        fake_ident = fake[ident_idx]
        real_stage_ident = real_stage[ident_idx]
        ids_ident = batch.ids[ident_idx]
        if fake.shape[-1] != real_full.shape[-1]:
            size = real_full.shape[-2:]
            fake_full = F.interpolate(fake_ident, size=size, mode="bilinear", align_corners=False)
            real_ident = F.interpolate(real_stage_ident, size=size, mode="bilinear", align_corners=False)
        else:
            fake_full = fake_ident
            real_ident = real_full[ident_idx]
        if cfg.ablation.enable_distill:
            l_distill = distillation_loss(fake_full, real_ident, self.feature_net, self.distill_weights)
        else:
            l_distill = fake.new_zeros(())
        if cfg.ablation.enable_biject:
            pair_rng = np.random.default_rng(np.random.SeedSequence([cfg.trainer.seed, 19, step]))
            l_biject, _ = bijective_loss(
                fake_full,
                real_ident,
                ids_ident,
                self.flow,
                margin=cfg.losses.margin,
                mode=cfg.losses.moment_mode,
                groups=cfg.losses.moment_groups,
                pair_rng=pair_rng,
            )
        else:
            l_biject = fake.new_zeros(())
        loss_g = generator_total_loss(
            LossComponents(biject=l_biject, distill=l_distill, adv=l_adv, recon=l_recon),
            weights,
        )
        loss_g.backward()
        self.opt_g.step()

        if cfg.mode == "blackbox":
            self._assert_teacher_firewall(step)

        return TrainMetrics(
            step=step,
            stage=stage,
            fade_in=fade,
            loss_g=float(loss_g.detach()),
            loss_d=float(loss_d.detach()),
            l_biject=float(l_biject.detach()),
            l_distill=float(l_distill.detach()),
            l_adv=float(l_adv.detach()),
            l_recon=float(l_recon.detach()),
            weights=weights,
            wall_clock=time.monotonic() - t0,
        )

    def _assert_teacher_firewall(self, step: int):
        for p in self.teacher.net.parameters():
            if p.grad is not None and p.grad.abs().max() > 0:
                raise RuntimeError(f"teacher gradient leaked in blackbox mode at step {step}")

    # -- checkpointing ------------------------------------------------------

    def _capture_state(self) -> dict:
        return {
            "G": {k: v.clone() for k, v in self.G.state_dict().items()},
            "D": {k: v.clone() for k, v in self.D.state_dict().items()},
        }

    def save(self, path: str, step: int):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        gc = self.G.config
        save_checkpoint(
            {"G": self.G, "D": self.D},
            {"opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict()},
            step,
            path,
            extra={
                "stage_count": self.config.num_stages,
                "current_stage": self.G.current_stage,
                "gan_config": {
                    "feature_dim": gc.feature_dim,
                    "channels": gc.channels,
                    "max_resolution": gc.max_resolution,
                    "stage_channels": list(gc.stage_channels),
                    "noise_dim": gc.noise_dim,
                    "cond_dim": gc.cond_dim,
                    "mapping_layers": gc.mapping_layers,
                    "fade_fraction": gc.fade_fraction,
                },
            },
        )

    def restore(self, path: str) -> int:
        payload = load_checkpoint(path)
        if payload.get("stage_count") != self.config.num_stages:
            raise CheckpointError(
                f"checkpoint has {payload.get('stage_count')} stages, "
                f"config has {self.config.num_stages}"
            )
        self.G.load_state_dict(payload["models"]["G"])
        self.D.load_state_dict(payload["models"]["D"])
        self.opt_g.load_state_dict(payload["optim"]["opt_g"])
        self.opt_d.load_state_dict(payload["optim"]["opt_d"])
        self.G.current_stage = payload["current_stage"]
        self.D.current_stage = payload["current_stage"]
        return payload["step"]

    # -- the full run --------------------------------------------------------

    def train(self, resume: str | None = None, verbose: bool = False):
        """Run every stage; returns the list of checkpoint paths written."""
        cfg = self.config
        os.makedirs(cfg.trainer.out_dir, exist_ok=True)
        metrics_path = os.path.join(cfg.trainer.out_dir, "metrics.csv")
        start_step = 0
        if resume is not None:
            start_step = self.restore(resume) + 1
            self._last_stable = self._capture_state()

        mode = "a" if resume is not None and os.path.exists(metrics_path) else "w"
        checkpoints = []
        with open(metrics_path, mode, newline="") as metrics_file:
            writer = csv.writer(metrics_file)
            if mode == "w":
                writer.writerow(METRICS_COLUMNS)
            for step in range(start_step, self.total_steps):
                plan = self._stage_at(step)
                if plan["stage"] != self.G.current_stage:
                    grow_stage(self.G, self.D, self.G.current_stage + 1)
                batch = self.make_batch(step)
                try:
                    metrics = self.training_step(batch, step)
                except NumericError as exc:
                    if self._lr_reduced:
                        raise TrainingDivergenceError(
                            f"diverged again after learning-rate reduction: {exc}"
                        ) from exc
                    self._lr_reduced = True
                    self.G.load_state_dict(self._last_stable["G"])
                    self.D.load_state_dict(self._last_stable["D"])
                    for opt in (self.opt_g, self.opt_d):
                        for group in opt.param_groups:
                            group["lr"] *= 0.5
                    if verbose:
                        print(f"[gan] step {step}: {exc}; reloaded last stable state, lr halved")
                    metrics = self.training_step(batch, step)
                writer.writerow(metrics.csv_row())
                if (step + 1) % cfg.trainer.checkpoint_every == 0 or step + 1 == self.total_steps:
                    self._last_stable = self._capture_state()
                    path = os.path.join(cfg.trainer.out_dir, f"ckpt_{step + 1:06d}.pt")
                    self.save(path, step)
                    checkpoints.append(path)
                if verbose and (step % 100 == 0 or step + 1 == self.total_steps):
                    print(
                        f"[gan] step {step}/{self.total_steps} stage {metrics.stage} "
                        f"fade {metrics.fade_in:.2f} loss_g {metrics.loss_g:.3f} "
                        f"loss_d {metrics.loss_d:.3f} ({metrics.wall_clock:.2f}s)"
                    )
        return checkpoints


def load_generator(path: str):
    """Rebuild a standalone generator (and its stage) from a trainer
    checkpoint."""
    payload = load_checkpoint(path)
    if "gan_config" not in payload:
        raise CheckpointError(f"{path}: no generator configuration stored")
    raw = dict(payload["gan_config"])
    raw["stage_channels"] = tuple(raw["stage_channels"])
    G = Generator(GanConfig(**raw))
    G.load_state_dict(payload["models"]["G"])
    G.eval()
    G.current_stage = payload["current_stage"]
    return G, payload["current_stage"]


def train_gan(
    config: RunConfig,
    resume: str | None = None,
    verbose: bool = False,
    teacher: TeacherModel | None = None,
    flow: FlowModel | None = None,
    student: StudentModel | None = None,
    dataset: Dataset | None = None,
) -> GanTrainer:
    """Resolve artifacts from the config, run all stages, return the trainer.

    Preloaded objects can be injected to skip disk round-trips; otherwise the
    checkpoint paths in the config are loaded, with a config error naming any
    missing artifact.
    """
    missing = []
    if teacher is None:
        if not config.artifacts.teacher or not os.path.exists(config.artifacts.teacher):
            missing.append(f"teacher checkpoint: {config.artifacts.teacher!r}")
        else:
            teacher = load_teacher(config.artifacts.teacher)
    if flow is None:
        if not config.artifacts.flow or not os.path.exists(config.artifacts.flow):
            missing.append(f"flow checkpoint: {config.artifacts.flow!r}")
        else:
            flow = load_flow(config.artifacts.flow)
    if student is None and config.mode == "blackbox":
        if not config.artifacts.student or not os.path.exists(config.artifacts.student):
            missing.append(f"student checkpoint: {config.artifacts.student!r}")
        else:
            student = load_student(config.artifacts.student)
    if missing:
        raise ConfigError("missing prerequisite artifacts: " + "; ".join(missing))
    if dataset is None:
        dataset = load_dataset(
            config.dataset.id,
            split="train",
            root=config.dataset.root,
            size=config.dataset.train_size,
            seed=config.dataset.seed,
        )
    trainer = GanTrainer(config, teacher, flow, dataset, student=student)
    trainer.train(resume=resume, verbose=verbose)
    return trainer
