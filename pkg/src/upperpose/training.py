"""Deterministic training loop (Adam, fresh tape per step), evaluation on
seeded synthetic sets, and the three-way ablation runner."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, no_grad
from .body import BodyTemplate
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import TrainSample, synth_dataset
from .errors import IntegrityError, NumericError
from .foreground import PfeConfig
from .metrics import LossBreakdown, MetricReport, mesh_report, total_loss
from .model import ModelOutput, UpperBodyModel


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            p = params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_records(self) -> dict[str, np.ndarray]:
        rec = {}
        for name, arr in self.m.items():
            rec[f"m/{name}"] = arr
        for name, arr in self.v.items():
            rec[f"v/{name}"] = arr
        return rec

    def load_records(self, rec: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key, arr in rec.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                self.m[name] = arr.copy()
            elif kind == "v":
                self.v[name] = arr.copy()
            else:
                raise IntegrityError(f"unknown optimizer record {key!r}")


def build_model(config: RunConfig, template: BodyTemplate | None = None,
                seed: int | None = None) -> UpperBodyModel:
    pfe_cfg = PfeConfig(feature_dim=config.feature_dim,
                        prior_tokens=config.prior_tokens,
                        strip_len=config.strip_len)
    return UpperBodyModel(seed=config.seed if seed is None else seed,
                          pfe_cfg=pfe_cfg, heads=config.heads,
                          roi_grid=config.roi_grid,
                          interaction=config.interaction,
                          pfe_enabled=(config.pfe == "on"),
                          template=template)


def sample_loss(model: UpperBodyModel, sample: TrainSample) -> tuple[LossBreakdown, ModelOutput]:
    out = model.forward(Tensor(sample.image))
    loss = total_loss(out.params, sample.gt_params,
                      out.mesh.joints3d, sample.gt_joints3d,
                      out.mesh.keypoints2d, sample.gt_kpts2d,
                      out.boxes, sample.gt_boxes)
    return loss, out


def make_checkpoint(config: RunConfig, model: UpperBodyModel, optim: Adam,
                    step: int) -> Checkpoint:
    return Checkpoint(config=config,
                      params={n: p.data.copy() for n, p in model.params.items()},
                      template=model.template,
                      optim=optim.state_records(),
                      step=step)


def restore_model(ckpt: Checkpoint) -> UpperBodyModel:
    model = build_model(ckpt.config, template=ckpt.template)
    names = set(model.params)
    saved = set(ckpt.params)
    if names != saved:
        raise IntegrityError(
            f"checkpoint parameter set mismatch: missing {sorted(names - saved)}, "
            f"unexpected {sorted(saved - names)}")
    for name, arr in ckpt.params.items():
        p = model.params[name]
        if p.data.shape != arr.shape:
            raise IntegrityError(f"shape mismatch for {name}: "
                                 f"{p.data.shape} vs {arr.shape}")
        p.data = arr.copy()
    return model


@dataclass
class TrainResult:
    model: UpperBodyModel
    optim: Adam
    trace: list[tuple[int, float, float, float, float]]  # step, lp, lk, lb, total
    checkpoint: Checkpoint
    dataset: list[TrainSample] = field(default_factory=list)


def train(config: RunConfig, resume: Checkpoint | None = None,
          on_step=None) -> TrainResult:
    config.validate()
    if resume is not None:
        model = restore_model(resume)
        optim = Adam()
        optim.load_records(resume.optim, resume.step)
        start = resume.step
    else:
        model = build_model(config)
        optim = Adam()
        start = 0

    dataset = synth_dataset(config.seed, config.dataset_size,
                            config.occlusion_prob, template=model.template,
                            image_size=config.image_size)
    n = len(dataset)
    trace: list[tuple[int, float, float, float, float]] = []

    os.makedirs(config.out_dir, exist_ok=True)
    for step in range(start, config.steps):
        idxs = [(step * config.batch_size + i) % n for i in range(config.batch_size)]
        comps = np.zeros(3)
        batch_total = None
        for i in idxs:
            loss, _ = sample_loss(model, dataset[i])
            comps += np.array([loss.l_param.item(), loss.l_kpts.item(),
                               loss.l_bbox.item()])
            batch_total = loss.total if batch_total is None else batch_total + loss.total
        batch_total = batch_total * (1.0 / config.batch_size)
        comps /= config.batch_size
        total_val = batch_total.item()
        if not math.isfinite(total_val):
            bad = ["l_param", "l_kpts", "l_bbox"][int(np.argmax(~np.isfinite(comps)))]
            raise NumericError(f"non-finite loss at step {step} (component {bad})")
        model.store.zero_grad()
        batch_total.backward()
        optim.step(model.params, config.learning_rate)
        trace.append((step, comps[0], comps[1], comps[2], total_val))
        if on_step is not None:
            on_step(step, total_val)
        if config.checkpoint_every > 0 and (step + 1) % config.checkpoint_every == 0 \
                and (step + 1) < config.steps:
            ckpt = make_checkpoint(config, model, optim, step + 1)
            save_checkpoint(os.path.join(config.out_dir, f"step{step + 1:06d}.coev"), ckpt)

    final = make_checkpoint(config, model, optim, config.steps)
    return TrainResult(model=model, optim=optim, trace=trace,
                       checkpoint=final, dataset=dataset)


def evaluate(model: UpperBodyModel, eval_seed: int, n_samples: int,
             occlusion_prob: float = 0.0, with_scale: bool = True,
             image_size: int = 64,
             samples: list[TrainSample] | None = None) -> MetricReport:
    if samples is None:
        samples = synth_dataset(eval_seed, n_samples, occlusion_prob,
                                template=model.template, image_size=image_size)
    pairs = []
    with no_grad():
        for s in samples:
            out = model.forward(Tensor(s.image))
            pairs.append((out.mesh.vertices.data, s.gt_vertices,
                          out.mesh.joints3d.data[0], s.gt_joints3d.data[0]))
    return mesh_report(pairs, model.template.part_vertex_masks,
                       with_scale=with_scale)


ABLATION_ROWS = (("w/o C.E.E.", "variant1", "on"),
                 ("w/o P.F.E.", "full", "off"),
                 ("Ours", "full", "on"))


@dataclass
class AblationResult:
    # label -> one MetricReport per seed, in seed order
    reports: dict[str, list[MetricReport]]
    seeds: list[int]
    sample_digests: dict[str, list[str]]  # label -> digests of the training stream

    def majority_better(self, baseline_label: str) -> bool:
        ours = self.reports["Ours"]
        base = self.reports[baseline_label]
        wins = sum(1 for o, b in zip(ours, base) if o.mpvpe_all < b.mpvpe_all)
        return wins * 2 > len(ours)


def ablate(config: RunConfig, on_step=None) -> AblationResult:
    import dataclasses as dc
    reports: dict[str, list[MetricReport]] = {label: [] for label, _, _ in ABLATION_ROWS}
    digests: dict[str, list[str]] = {label: [] for label, _, _ in ABLATION_ROWS}
    seeds = [config.seed + k for k in range(config.ablation_seeds)]
    for seed in seeds:
        eval_seed = seed * 7919 + 101
        for label, interaction, pfe in ABLATION_ROWS:
            run_cfg = dc.replace(config, seed=seed, interaction=interaction, pfe=pfe,
                                 checkpoint_every=0,
                                 out_dir=os.path.join(config.out_dir, f"seed{seed}",
                                                      label.replace(" ", "_").replace("/", "")))
            result = train(run_cfg, on_step=on_step)
            digests[label].extend(s.digest() for s in result.dataset)
            reports[label].append(evaluate(result.model, eval_seed,
                                           config.eval_count,
                                           occlusion_prob=config.eval_occlusion,
                                           image_size=config.image_size))
    return AblationResult(reports=reports, seeds=seeds, sample_digests=digests)
