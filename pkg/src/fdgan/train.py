"""Three-stage training with alternating discriminator/generator updates.

Stage 1 trains E and V on verification alone. Stage 2 freezes E and V and
trains G, D_id and D_pd. Stage 3 fine-tunes everything with E's batch-norm
layers fixed. In stages 2 and 3 every mini-batch runs one discriminator
update followed by one G/E/V update.
"""

from __future__ import annotations

import contextlib
import copy
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_digest
from .data.sampler import PairSampler
from .losses import (
    LossReport,
    LossWeights,
    TrainingDivergence,
    adversarial_discriminator_loss,
    adversarial_generator_loss,
    reconstruction_loss,
    same_pose_loss,
    total_objective,
    verification_loss,
)
from .models import FDGAN, ModelConfig
from .schedule import build_optimizer, default_schedule, set_lr

log = logging.getLogger(__name__)

DISCRIMINATORS = ("D_id", "D_pd")


@dataclass
class TrainConfig:
    seed: int = 0
    epoch_scale: float = 4.0
    iters_per_epoch: int = 10
    batch_pairs: int = 32
    positive_pairs: int = 8
    bandwidth_range: tuple = (1.0, 1.5)
    pose_augmentation: bool = True
    # per-stage overrides: {"stage1": {"E": 0.01}, ...}
    rates: dict = field(default_factory=dict)
    epochs: dict = field(default_factory=dict)
    weight_decay: float = 5e-4
    probe_pairs: int = 16
    audit: bool = True
    checkpoint_every_epoch: bool = True

    def __post_init__(self):
        self.bandwidth_range = tuple(self.bandwidth_range)
        if self.iters_per_epoch < 1 or self.batch_pairs < 1:
            raise ValueError("iters_per_epoch and batch_pairs must be >= 1")
        if not 0 <= self.positive_pairs <= self.batch_pairs:
            raise ValueError("positive_pairs must be within [0, batch_pairs]")
        if self.epoch_scale <= 0:
            raise ValueError("epoch_scale must be positive")
        for key in list(self.rates) + list(self.epochs):
            if key not in ("stage1", "stage2", "stage3"):
                raise ValueError(f"unknown stage key {key!r} (use stage1/stage2/stage3)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["bandwidth_range"] = list(self.bandwidth_range)
        return d

    def schedule(self, stage):
        sched = default_schedule(stage, self.epoch_scale)
        key = f"stage{stage}"
        if key in self.rates:
            sched = sched.with_rates(**self.rates[key])
        if key in self.epochs:
            ratio = float(self.epochs[key]) / sched.epochs
            sched = replace(sched, epochs=float(self.epochs[key]),
                            step_every=sched.step_every * ratio,
                            constant_epochs=sched.constant_epochs * ratio)
        return replace(sched, weight_decay=self.weight_decay)


class FreezeViolation(AssertionError):
    pass


# ---------------------------------------------------------------------------
# state


class TrainState:
    """Everything needed to continue a stage bit-exactly."""

    def __init__(self, model, stage, schedule, weights, rng, optimizers, iteration=0,
                 epoch=0, stats=None, running=None):
        self.model = model
        self.stage = stage
        self.schedule = schedule
        self.weights = weights
        self.rng = rng
        self.optimizers = optimizers
        self.iteration = iteration
        self.epoch = epoch
        self.stats = stats if stats is not None else Counter()
        self.running = running if running is not None else {}
        self.audit = True
        self.class_index = None

    @property
    def cfg(self):
        return self.model.cfg

    def trainable_blocks(self):
        return [b for b in self.schedule.rates if b not in self.schedule.freeze]

    def payload(self):
        blocks = ("E", "V", "C") if self.stage == 1 else ("E", "G", "V", "D_id", "D_pd", "C")
        groups = self.model.groups()
        # deep copy: state_dict tensors alias the live parameters and moments
        return copy.deepcopy({
            "stage": self.stage,
            "epoch": self.epoch,
            "iteration": self.iteration,
            "model_config": self.cfg.to_dict(),
            "loss_weights": self.weights.to_dict(),
            "weights": {b: groups[b].state_dict() for b in blocks if b in groups},
            "optimizers": {b: opt.state_dict() for b, opt in self.optimizers.items()},
            "rng": self.rng.bit_generator.state,
            "running": dict(self.running),
            "stats": dict(self.stats),
        })

    def save(self, path):
        return save_checkpoint(self.payload(), path)


def _block_params(model, block):
    if block == "D_id":
        return model.D_id.parameters()
    return model.groups()[block].parameters()


def _bn_modules(module):
    return [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def configure_stage(model, schedule):
    """Set ``requires_grad`` according to the stage's freeze rules."""
    for p in model.parameters():
        p.requires_grad_(False)
    for block in schedule.rates:
        if block in schedule.freeze:
            continue
        for p in _block_params(model, block):
            p.requires_grad_(True)
    if schedule.stage == 1 and model.cfg.single_branch_classifier:
        for p in model.C.parameters():
            p.requires_grad_(True)
    if schedule.freeze_encoder_bn:
        for m in _bn_modules(model.E):
            for p in m.parameters():
                p.requires_grad_(False)


def build_optimizers(model, schedule):
    opts = {}
    for block, kind in schedule.optimizers.items():
        if block in schedule.freeze:
            continue
        params = list(_block_params(model, block))
        if schedule.stage == 1 and block == "V" and model.cfg.single_branch_classifier:
            params += list(model.C.parameters())
        params = [p for p in params if p.requires_grad]
        if params:
            opts[block] = build_optimizer(kind, params, schedule.rates[block], schedule.weight_decay)
    return opts


def new_state(model, stage, tcfg, weights, rng=None):
    schedule = tcfg.schedule(stage)
    configure_stage(model, schedule)
    rng = rng if rng is not None else np.random.default_rng(tcfg.seed + 1000 * stage)
    return TrainState(model, stage, schedule, weights, rng, build_optimizers(model, schedule))


def restore_state(payload, tcfg, model=None):
    """Rebuild a :class:`TrainState` from a checkpoint of the same stage."""
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = model if model is not None else FDGAN(cfg)
    groups = model.groups()
    for name, sd in payload["weights"].items():
        groups[name].load_state_dict(sd)
    weights = LossWeights.from_dict(payload["loss_weights"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    state = new_state(model, payload["stage"], tcfg, weights, rng)
    for block, sd in payload["optimizers"].items():
        state.optimizers[block].load_state_dict(sd)
    state.iteration = payload["iteration"]
    state.epoch = payload["epoch"]
    state.stats = Counter(payload.get("stats", {}))
    state.running = dict(payload.get("running", {}))
    return state


def init_from_stage1(payload, model_cfg=None):
    """Fresh model whose E, V and D_id are copied from a stage-1 checkpoint."""
    cfg = model_cfg or ModelConfig.from_dict(payload["model_config"])
    model = FDGAN(cfg)
    model.E.load_state_dict(payload["weights"]["E"])
    model.V.load_state_dict(payload["weights"]["V"])
    if "C" in payload["weights"] and cfg.single_branch_classifier:
        model.C.load_state_dict(payload["weights"]["C"])
    if model.D_id.backbone is not None:
        model.D_id.backbone.load_state_dict(payload["weights"]["E"])
    model.D_id.head.load_state_dict(payload["weights"]["V"])
    return model


def init_from_stage2(payload, model_cfg=None):
    cfg = model_cfg or ModelConfig.from_dict(payload["model_config"])
    model = FDGAN(cfg)
    groups = model.groups()
    for name, sd in payload["weights"].items():
        groups[name].load_state_dict(sd)
    return model


# ---------------------------------------------------------------------------
# modes and audits


def set_modes(model, stage, phase):
    """Train/eval flags for one phase: ``"stage1"``, ``"d"`` or ``"g"``."""
    model.eval()
    if phase == "stage1":
        model.E.train()
        model.V.train()
        return
    if stage == 3:
        model.E.train()
        model.V.train()
        for m in _bn_modules(model.E):
            m.eval()
    model.G.train()
    if phase == "d":
        model.D_id.train()
        model.D_pd.train()


def _digests(model, blocks):
    groups = model.groups()
    return {b: state_digest(groups[b]) for b in blocks}


def _assert_unchanged(before, after, what):
    changed = sorted(b for b in before if before[b] != after[b])
    if changed:
        raise FreezeViolation(f"{what} modified frozen blocks {changed}")


def _finite(report):
    for k, v in report.to_dict().items():
        if not math.isfinite(v):
            raise TrainingDivergence(k, v)


def _set_rates(state):
    epoch = state.epoch
    for block, opt in state.optimizers.items():
        set_lr(opt, state.schedule.lr(block, epoch))


# ---------------------------------------------------------------------------
# steps


def stage1_step(state, batch, class_index=None):
    model = state.model
    set_modes(model, 1, "stage1")
    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)
    b = len(batch)
    emb = model.encode(torch.cat([batch.x1, batch.x2]))
    e1, e2 = emb[:b], emb[b:]
    d = model.verify(e1, e2)
    if model.cfg.single_branch_classifier:
        labels = torch.as_tensor(class_index, dtype=torch.long)
        loss = F.cross_entropy(model.classify_identity(emb), labels)
    else:
        loss = verification_loss(d, batch.same, state.stats)
    report = LossReport(L_v=float(loss.detach()), total=float(loss.detach()))
    _finite(report)
    loss.backward()
    for opt in state.optimizers.values():
        opt.step()
    acc = float(((d.detach() > 0.5).float() == batch.same).float().mean())
    return report, {"pair_acc": acc}


def generate_pair(model, batch, stage):
    """Forward both branches; returns ``(e1, e2, y1, y2)``."""
    b = len(batch)
    x = torch.cat([batch.x1, batch.x2])
    if stage == 2:
        with torch.no_grad():
            emb = model.encode(x)
    else:
        emb = model.encode(x)
    pose_feat = model.encode_pose(batch.target_pose)
    y = model.generate(emb, torch.cat([pose_feat, pose_feat]), torch.cat([batch.noise, batch.noise]))
    return emb[:b], emb[b:], y[:b], y[b:]


def discriminator_step(state, batch, y1, y2):
    """Update D_id and D_pd on real targets vs detached generations."""
    model, weights = state.model, state.weights
    set_modes(model, state.stage, "d")
    for block in DISCRIMINATORS:
        if block in state.optimizers:
            state.optimizers[block].zero_grad(set_to_none=True)
    model.zero_grad(set_to_none=True)
    y1, y2 = y1.detach(), y2.detach()
    b = len(batch)
    pos = batch.has_truth2
    n_pos = int(pos.sum())
    loss = 0.0
    l_id = l_pd = torch.zeros(())
    if weights.lambda_id > 0:
        x = torch.cat([batch.x1, batch.x2])
        cand = torch.cat([batch.truth1, batch.truth2[pos], y1, y2])
        # a shared backbone belongs to E, so only the head learns here
        shared = model.D_id.backbone is None
        with torch.no_grad() if shared else contextlib.nullcontext():
            feats = model.identity_features(torch.cat([x, cand]))
        fx, fc = feats[: 2 * b], feats[2 * b:]
        anchor_f = torch.cat([fx[:b], fx[b:][pos], fx[:b], fx[b:]])
        scores = model.D_id.head(anchor_f, fc)
        real = [scores[:b]] + ([scores[b:b + n_pos]] if n_pos else [])
        fake = [scores[b + n_pos: 2 * b + n_pos], scores[2 * b + n_pos:]]
        l_id = adversarial_discriminator_loss(real, fake, weights.label_smoothing, state.stats)
        loss = loss + l_id
    if weights.lambda_pd > 0:
        p = batch.target_pose
        imgs = torch.cat([batch.truth1, batch.truth2[pos], y1, y2])
        poses = torch.cat([p, p[pos], p, p])
        scores = model.discriminate_pose(imgs, poses)
        real = [scores[:b]] + ([scores[b:b + n_pos]] if n_pos else [])
        fake = [scores[b + n_pos: 2 * b + n_pos], scores[2 * b + n_pos:]]
        l_pd = adversarial_discriminator_loss(real, fake, weights.label_smoothing, state.stats)
        loss = loss + l_pd
    l_id, l_pd = float(l_id.detach()), float(l_pd.detach())
    for name, v in (("L_id_D", l_id), ("L_pd_D", l_pd)):
        if not math.isfinite(v):
            raise TrainingDivergence(name, v)
    if isinstance(loss, torch.Tensor) and loss.requires_grad:
        loss.backward()
        for block in DISCRIMINATORS:
            if block in state.optimizers:
                state.optimizers[block].step()
    model.zero_grad(set_to_none=True)
    return l_id, l_pd


def generator_parts(state, batch, e1, e2, y1, y2):
    """Generator-side loss terms as tensors (E/G/V objective)."""
    model, weights = state.model, state.weights
    b = len(batch)
    pos = batch.has_truth2
    parts = {}
    if state.stage == 2:
        with torch.no_grad():
            d = model.verify(e1, e2)
    else:
        d = model.verify(e1, e2)
    if model.cfg.single_branch_classifier:
        labels = torch.as_tensor(state.class_index(batch), dtype=torch.long)
        parts["L_v"] = F.cross_entropy(model.classify_identity(torch.cat([e1, e2])), labels)
    else:
        parts["L_v"] = verification_loss(d, batch.same, state.stats)
    y = torch.cat([y1, y2])
    if weights.lambda_id > 0:
        with torch.no_grad():
            fx = model.identity_features(torch.cat([batch.x1, batch.x2]))
        s = model.D_id.head(fx, model.identity_features(y))
        parts["L_id_G"] = adversarial_generator_loss([s[:b], s[b:]], state.stats)
    if weights.lambda_pd > 0:
        p = batch.target_pose
        s = model.discriminate_pose(y, torch.cat([p, p]))
        parts["L_pd_G"] = adversarial_generator_loss([s[:b], s[b:]], state.stats)
    parts["L_r"] = (reconstruction_loss(y1, batch.truth1, batch.has_truth1)
                    + reconstruction_loss(y2, batch.truth2, pos))
    if bool(pos.any()):
        parts["L_sp"] = same_pose_loss(y1[pos], y2[pos])
    else:
        parts["L_sp"] = y1.sum() * 0.0
    return parts


def generator_step(state, batch, e1, e2, y1, y2):
    model = state.model
    set_modes(model, state.stage, "g")
    # discriminator weights are read-only here
    for block in DISCRIMINATORS:
        for p in _block_params(model, block):
            p.requires_grad_(False)
    try:
        parts = generator_parts(state, batch, e1, e2, y1, y2)
        total = total_objective(parts, state.weights)
        gen_blocks = [b for b in state.optimizers if b not in DISCRIMINATORS]
        for block in gen_blocks:
            state.optimizers[block].zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
        for block in gen_blocks:
            state.optimizers[block].step()
    finally:
        configure_stage(model, state.schedule)
    model.zero_grad(set_to_none=True)
    return {k: float(v.detach()) for k, v in parts.items()}, float(total.detach())


def alternate_step(state, batch):
    """One D update then one G/E/V update on the same batch."""
    if state.stage not in (2, 3):
        raise ValueError("alternate_step runs in stage 2 or 3")
    model = state.model
    audit = state.audit
    if audit and state.schedule.freeze_encoder_bn:
        bn_before = [state_digest(m) for m in _bn_modules(model.E)]
    set_modes(model, state.stage, "g")
    e1, e2, y1, y2 = generate_pair(model, batch, state.stage)

    if audit:
        gen_side = [b for b in ("E", "G", "V") if b in model.groups()]
        before = _digests(model, gen_side)
    l_id_d, l_pd_d = discriminator_step(state, batch, y1, y2)
    if audit:
        _assert_unchanged(before, _digests(model, gen_side), "discriminator step")
        frozen = sorted(set(state.schedule.freeze) | set(DISCRIMINATORS))
        before = _digests(model, frozen)
    # generator step re-reads the freshly updated discriminators
    parts, total = generator_step(state, batch, e1, e2, y1, y2)
    if audit:
        _assert_unchanged(before, _digests(model, frozen), "generator step")
        if state.schedule.freeze_encoder_bn and bn_before != [state_digest(m) for m in _bn_modules(model.E)]:
            raise FreezeViolation("encoder batch-norm layers changed during stage 3")

    report = LossReport(
        L_v=parts.get("L_v", 0.0), L_id_D=l_id_d, L_id_G=parts.get("L_id_G", 0.0),
        L_pd_D=l_pd_d, L_pd_G=parts.get("L_pd_G", 0.0), L_r=parts["L_r"],
        L_sp=parts["L_sp"], total=total,
    )
    _finite(report)
    return report


# ---------------------------------------------------------------------------
# stage driver


class TrainLog:
    """Line-delimited JSON log; one record per iteration or event."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a")
        self.records = []

    def write(self, record):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _class_lookup(dataset):
    ids = np.unique(dataset.identities)
    table = {int(k): i for i, k in enumerate(ids)}
    return lambda batch: [table[int(dataset.identities[i])] for i in np.concatenate([batch.index1, batch.index2])]


def probe_reconstruction(model, probe):
    """Eval-mode L1 between generations and ground truth on a fixed batch."""
    was = model.training
    model.eval()
    with torch.no_grad():
        e = model.encode(torch.cat([probe.x1, probe.x2]))
        pf = model.encode_pose(probe.target_pose)
        y = model.generate(e, torch.cat([pf, pf]), torch.cat([probe.noise, probe.noise]))
        b = len(probe)
        val = float(reconstruction_loss(y[:b], probe.truth1, probe.has_truth1)
                    + reconstruction_loss(y[b:], probe.truth2, probe.has_truth2))
    model.train(was)
    return val


def run_stage(state, dataset, tcfg, train_log=None, checkpoint_path=None, max_iterations=None,
              on_epoch_end=None):
    """Drive ``state`` through its schedule (or ``max_iterations`` more steps)."""
    sampler = PairSampler(dataset, state.cfg.noise_dim, tcfg.bandwidth_range, tcfg.pose_augmentation)
    class_index = _class_lookup(dataset)
    state.class_index = class_index
    state.audit = tcfg.audit
    ipe = tcfg.iters_per_epoch
    total_iters = state.schedule.total_epochs * ipe
    stop = total_iters if max_iterations is None else min(total_iters, state.iteration + max_iterations)
    train_log = train_log or TrainLog()
    probe = None
    if state.stage in (2, 3):
        probe = sampler.sample(tcfg.probe_pairs, max(1, tcfg.probe_pairs // 4),
                               np.random.default_rng(tcfg.seed + 7919))
        if state.iteration == 0:
            train_log.write({"event": "stage_start", "stage": state.stage, "epoch": 0, "iteration": 0,
                             "probe_L_r": probe_reconstruction(state.model, probe)})
    last_good = None
    while state.iteration < stop:
        epoch = state.iteration // ipe + 1
        state.epoch = epoch
        _set_rates(state)
        # per-iteration torch seed drawn from the numpy stream keeps dropout resumable
        torch.manual_seed(int(state.rng.integers(2 ** 62)))
        t0 = time.perf_counter()
        try:
            if state.stage == 1:
                batch = sampler.sample(tcfg.batch_pairs, tcfg.positive_pairs, state.rng, render=False)
                report, extra = stage1_step(state, batch, class_index(batch))
            else:
                batch = sampler.sample(tcfg.batch_pairs, tcfg.positive_pairs, state.rng)
                report, extra = alternate_step(state, batch), {}
        except TrainingDivergence as exc:
            exc.checkpoint = last_good
            train_log.write({"event": "divergence", "stage": state.stage, "term": exc.term,
                             "iteration": state.iteration, "checkpoint": str(last_good)})
            raise
        state.iteration += 1
        for k, v in report.to_dict().items():
            state.running[k] = 0.9 * state.running.get(k, v) + 0.1 * v
        train_log.write({
            "stage": state.stage, "epoch": epoch, "iteration": state.iteration,
            "losses": report.to_dict(), **extra,
            "lr": {b: state.schedule.lr(b, epoch) for b in state.optimizers},
            "seconds": round(time.perf_counter() - t0, 4),
        })
        if state.iteration % ipe == 0:
            record = {"event": "epoch_end", "stage": state.stage, "epoch": epoch,
                      "iteration": state.iteration}
            if probe is not None:
                record["probe_L_r"] = probe_reconstruction(state.model, probe)
            if on_epoch_end is not None:
                record.update(on_epoch_end(state) or {})
            train_log.write(record)
            if checkpoint_path and tcfg.checkpoint_every_epoch:
                last_good = state.save(checkpoint_path)
    if checkpoint_path:
        state.save(checkpoint_path)
    return state


def run_stage1(dataset, model_cfg, tcfg, weights=None, checkpoint_path=None, train_log=None,
               resume=None, **kw):
    weights = weights or LossWeights()
    if resume is not None:
        payload = load_checkpoint(resume, stages={1}) if not isinstance(resume, dict) else resume
        state = restore_state(payload, tcfg)
    else:
        torch.manual_seed(tcfg.seed)
        model = FDGAN(model_cfg)
        state = new_state(model, 1, tcfg, weights)
    return run_stage(state, dataset, tcfg, train_log, checkpoint_path, **kw)


def run_stage2(dataset, stage1_ckpt, tcfg, weights=None, checkpoint_path=None, train_log=None,
               model_cfg=None, **kw):
    """Start from a stage-1 checkpoint, or resume a stage-2 one."""
    payload = stage1_ckpt if isinstance(stage1_ckpt, dict) else load_checkpoint(stage1_ckpt, stages={1, 2})
    if payload["stage"] == 2:
        state = restore_state(payload, tcfg)
    else:
        torch.manual_seed(tcfg.seed + 2)
        model = init_from_stage1(payload, model_cfg)
        state = new_state(model, 2, tcfg, weights or LossWeights.from_dict(payload["loss_weights"]))
    return run_stage(state, dataset, tcfg, train_log, checkpoint_path, **kw)


def run_stage3(dataset, stage2_ckpt, tcfg, weights=None, checkpoint_path=None, train_log=None, **kw):
    payload = stage2_ckpt if isinstance(stage2_ckpt, dict) else load_checkpoint(stage2_ckpt, stages={2, 3})
    if payload["stage"] == 3:
        state = restore_state(payload, tcfg)
    elif payload["stage"] == 2:
        model = init_from_stage2(payload)
        state = new_state(model, 3, tcfg, weights or LossWeights.from_dict(payload["loss_weights"]))
    else:
        raise CheckpointError(f"stage 3 needs a stage-2 checkpoint, got stage {payload['stage']}")
    return run_stage(state, dataset, tcfg, train_log, checkpoint_path, **kw)
