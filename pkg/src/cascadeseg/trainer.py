"""
The four-step training schedule.

=====  =============================  ====================  =============
step   input                          loss                  frozen
=====  =============================  ====================  =============
1      full volume, coarse grid       roi1                  network 2
2      class-balanced subvolumes      roi1 + dice1          network 2
3      class-balanced subvolumes      dice1 + dice2         none
4      stacks of K full axial slices  dice2                 network 1
=====  =============================  ====================  =============
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import STEP_TERMS, LossConfig, ProbabilityField, one_hot_tensor, step_loss
from .networks import Net1, Net1Config, Net2, Net2Config, build_net1, build_net2, compose_net2_input
from .sampler import Batch, Case, SamplerConfig, make_batch
from .volumes import IntensityVolume

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cascadeseg-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("iteration", "step", "total", "roi1", "dice1", "dice2")

DEFAULT_FROZEN = {1: "net2", 2: "net2", 3: "none", 4: "net1"}
INPUT_SPEC = {
    1: "full volume on the coarse grid",
    2: "class-balanced subvolumes",
    3: "class-balanced subvolumes",
    4: "stacks of K full axial slices",
}


@dataclass
class StepSpec:
    step_id: int
    epochs: int
    iterations_per_epoch: int
    frozen: str = ""

    def __post_init__(self):
        if self.step_id not in STEP_TERMS:
            raise ValueError(f"step_id must be in 1..4, got {self.step_id}")
        if self.epochs < 0 or self.iterations_per_epoch < 0:
            raise ValueError("epochs and iterations_per_epoch must be non-negative")
        self.frozen = self.frozen or DEFAULT_FROZEN[self.step_id]
        if self.frozen not in ("net1", "net2", "none"):
            raise ValueError(f"frozen must be net1, net2 or none, got {self.frozen!r}")

    @property
    def iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch

    @property
    def loss_terms(self) -> tuple:
        return STEP_TERMS[self.step_id]

    @property
    def input_spec(self) -> str:
        return INPUT_SPEC[self.step_id]


@dataclass
class TrainSchedule:
    steps: list = field(default_factory=list)
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.steps = [s if isinstance(s, StepSpec) else StepSpec(**s) for s in self.steps]
        ids = [s.step_id for s in self.steps]
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            raise ValueError(f"steps must be unique and ordered, got {ids}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def full_scale(cls, seed: int = 0) -> "TrainSchedule":
        """200 epochs of 16 iterations for each of the four steps."""
        return cls([StepSpec(i, 200, 16) for i in (1, 2, 3, 4)], 1e-4, seed)

    @classmethod
    def desk(cls, epochs: int = 50, iterations_per_epoch: int = 4, seed: int = 0,
             learning_rate: float = 1e-4) -> "TrainSchedule":
        return cls([StepSpec(i, epochs, iterations_per_epoch) for i in (1, 2, 3, 4)],
                   learning_rate, seed)

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.steps)

    def spec(self, step_id: int) -> StepSpec:
        for s in self.steps:
            if s.step_id == step_id:
                return s
        raise KeyError(f"step {step_id} is not in the schedule")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    net1: Net1
    net2: Net2
    completed_steps: list = field(default_factory=list)
    iteration: int = 0
    inference: dict = field(default_factory=dict)


def save_checkpoint(path: os.PathLike, ckpt: Checkpoint) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net1_config": asdict(ckpt.net1.cfg),
        "net2_config": asdict(ckpt.net2.cfg),
        "net1_state": ckpt.net1.state_dict(),
        "net2_state": ckpt.net2.state_dict(),
        "completed_steps": list(ckpt.completed_steps),
        "iteration": int(ckpt.iteration),
        "inference": dict(ckpt.inference),
    }
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    net1 = build_net1(Net1Config(**payload["net1_config"]))
    net2 = build_net2(Net2Config(**payload["net2_config"]))
    net1.load_state_dict(payload["net1_state"])
    net2.load_state_dict(payload["net2_state"])
    inference = dict(payload["inference"])
    if "coarse_spacing" in inference:
        inference["coarse_spacing"] = tuple(inference["coarse_spacing"])
    return Checkpoint(net1, net2, list(payload["completed_steps"]), payload["iteration"], inference)


def parameter_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class Trainer:
    """Owns both networks and runs the schedule over a list of prepared cases."""

    def __init__(self, net1: Net1, net2: Net2, cases: list[Case], schedule: TrainSchedule,
                 sampler_cfg: SamplerConfig = SamplerConfig(), loss_cfg: LossConfig = LossConfig(),
                 inference: dict | None = None, out_dir: os.PathLike | None = None,
                 completed_steps=(), iteration: int = 0):
        if not cases:
            raise ValueError("dataset is empty")
        if net1.cfg.num_classes != net2.cfg.num_classes:
            raise ValueError("networks disagree on the number of classes")
        if any(c.num_classes != net1.cfg.num_classes for c in cases):
            raise ValueError("cases and networks disagree on the number of classes")
        self.net1, self.net2 = net1, net2
        self.cases = cases
        self.schedule = schedule
        self.sampler_cfg = sampler_cfg
        self.loss_cfg = loss_cfg
        self.inference = dict(inference or {})
        self.inference.setdefault("coarse_spacing", (3.0, 3.0, 3.0))
        self.inference.setdefault("roi_margin", 8)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.completed_steps = list(completed_steps)
        self.iteration = iteration
        self.log: list[dict] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cases, schedule, **kwargs) -> "Trainer":
        kwargs.setdefault("inference", ckpt.inference)
        return cls(ckpt.net1, ckpt.net2, cases, schedule, completed_steps=ckpt.completed_steps,
                   iteration=ckpt.iteration, **kwargs)

    @property
    def K(self) -> int:
        return self.net2.cfg.K

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.net1, self.net2, list(self.completed_steps), self.iteration,
                          dict(self.inference))

    # -- pieces -----------------------------------------------------------

    def attach_net1_predictions(self) -> None:
        """Cache network 1's inference-path output on every case (used by step 4)."""
        from .inference import locate, net1_label_channel

        for case in self.cases:
            iv = IntensityVolume(data=case.image, spacing=case.spacing)
            p1, _ = locate(iv, self.net1, self.inference["coarse_spacing"],
                           self.inference["roi_margin"],
                           self.inference.get("refine_net1_on_roi", False))
            case.net1_channel = net1_label_channel(p1)

    def compute_loss(self, batch: Batch):
        """Forward pass and loss terms for one batch of the given step."""
        n = self.net1.cfg.num_classes
        step = batch.step
        x = torch.from_numpy(batch.image)
        p1 = p2 = t1 = t2 = None
        if step in (1, 2, 3):
            p1 = ProbabilityField(self.net1(x), 1)
            t1 = one_hot_tensor(torch.from_numpy(batch.labels), n)
        if step == 3:
            p2 = self.net2(compose_net2_input(x, p1.data))
        elif step == 4:
            p2 = self.net2(torch.cat([x, torch.from_numpy(batch.net1_channel)], dim=1))
        if p2 is not None:
            p2 = ProbabilityField(p2, 2)
            t2 = one_hot_tensor(torch.from_numpy(batch.fine_labels), n)
        return step_loss(step, p1, p2, t1, t2, self.loss_cfg)

    def _set_frozen(self, frozen: str) -> list:
        trainable = []
        for name, net in (("net1", self.net1), ("net2", self.net2)):
            is_frozen = frozen == name
            net.requires_grad_(not is_frozen)
            net.train(not is_frozen)
            if not is_frozen:
                trainable += list(net.parameters())
        return trainable

    def _write_log(self, rows: list[dict]) -> None:
        if self.out_dir is None or not rows:
            return
        path = self.out_dir / "train_log.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            if new:
                writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in LOG_COLUMNS})

    def _save(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / name
        save_checkpoint(path, self.checkpoint())
        return path

    # -- schedule ---------------------------------------------------------

    def run_step(self, step_id: int, from_scratch: bool = False) -> list[dict]:
        """
        Run every iteration of one step and return its log rows. Steps after
        the first require the previous step to have completed unless
        ``from_scratch`` is set.
        """
        spec = self.schedule.spec(step_id)
        if step_id > 1 and not from_scratch and (step_id - 1) not in self.completed_steps:
            raise RuntimeError(
                f"step {step_id} needs a checkpoint that completed step {step_id - 1} "
                "(or an explicit from-scratch run)")
        torch.manual_seed(self.schedule.seed * 1000 + step_id)
        rng = np.random.default_rng([self.sampler_cfg.rng_seed, step_id])

        if step_id == 4:
            self.net1.eval()
            self.attach_net1_predictions()
        trainable = self._set_frozen(spec.frozen)
        optimizer = torch.optim.Adam(trainable, lr=self.schedule.learning_rate)

        rows = []
        written = 0
        start = time.time()
        try:
            for _ in range(spec.iterations):
                batch = make_batch(self.cases, step_id, self.sampler_cfg, rng, K=self.K)
                optimizer.zero_grad(set_to_none=True)
                loss = self.compute_loss(batch)
                value = loss.total.item()
                if not math.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite loss at iteration {self.iteration} (step {step_id}): "
                        + ", ".join(f"{k}={v.item()}" for k, v in loss.terms.items()))
                loss.total.backward()
                optimizer.step()
                self.iteration += 1
                row = {"iteration": self.iteration, "step": step_id, "total": value}
                row.update({k: v.item() for k, v in loss.terms.items()})
                rows.append(row)
                every = self.schedule.checkpoint_every
                if every and self.iteration % every == 0:
                    self._write_log(rows[written:])
                    written = len(rows)
                    self._save("checkpoint_latest.pt")
        finally:
            self._set_frozen("none")

        self._write_log(rows[written:])
        self.log += rows
        self.completed_steps = sorted(set(self.completed_steps) | {step_id})
        self._save(f"checkpoint_step{step_id}.pt")
        if rows:
            logger.info("step %d: %d iterations in %.1fs, loss %.4f -> %.4f", step_id, len(rows),
                        time.time() - start, rows[0]["total"], rows[-1]["total"])
        return rows

    def run_all(self) -> Checkpoint:
        for spec in self.schedule.steps:
            self.run_step(spec.step_id, from_scratch=spec.step_id == self.schedule.steps[0].step_id)
        self._save("checkpoint_final.pt")
        return self.checkpoint()


def gradient_audit(trainer: Trainer, step_id: int, n_batches: int = 4, seed: int = 0) -> dict:
    """
    Names of trainable parameters that received no nonzero gradient over
    ``n_batches`` batches of ``step_id``, keyed by network.
    """
    try:
        frozen = trainer.schedule.spec(step_id).frozen
    except KeyError:
        frozen = DEFAULT_FROZEN[step_id]
    if step_id == 4 and any(c.net1_channel is None for c in trainer.cases):
        trainer.attach_net1_predictions()
    trainer._set_frozen(frozen)
    rng = np.random.default_rng(seed)
    touched = {}
    try:
        for _ in range(n_batches):
            batch = make_batch(trainer.cases, step_id, trainer.sampler_cfg, rng, K=trainer.K)
            for net in (trainer.net1, trainer.net2):
                net.zero_grad(set_to_none=True)
            trainer.compute_loss(batch).total.backward()
            for prefix, net in (("net1", trainer.net1), ("net2", trainer.net2)):
                for name, p in net.named_parameters():
                    if p.requires_grad:
                        key = f"{prefix}.{name}"
                        nonzero = p.grad is not None and bool(p.grad.abs().sum() > 0)
                        touched[key] = touched.get(key, False) or nonzero
    finally:
        trainer._set_frozen("none")
        for net in (trainer.net1, trainer.net2):
            net.zero_grad(set_to_none=True)
    dead = {"net1": [], "net2": []}
    for key, ok in touched.items():
        if not ok:
            dead[key.split(".", 1)[0]].append(key)
    return dead


@dataclass
class TraceReport:
    start: float
    end: float
    status: str
    iterations: int

    @property
    def healthy(self) -> bool:
        return self.status == "healthy"


def loss_trace_monotonicity_report(log, window: int = 20, key: str = "total",
                                   tol: float = 1e-6) -> TraceReport:
    """
    Compare the mean of the first and last ``window`` values of a loss trace:
    ``healthy`` if it went down, ``stalled`` if flat, ``increasing`` otherwise.
    """
    values = np.asarray([row[key] if isinstance(row, dict) else row for row in log], dtype=float)
    if values.size == 0:
        raise ValueError("empty loss log")
    w = max(1, min(window, values.size))
    start, end = float(values[:w].mean()), float(values[-w:].mean())
    if start - end > tol:
        status = "healthy"
    elif abs(end - start) <= tol:
        status = "stalled"
    else:
        status = "increasing"
    return TraceReport(start, end, status, int(values.size))
