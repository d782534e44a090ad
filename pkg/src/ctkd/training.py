"""Two-stage collaborative training and the baseline methods.

Stage 1 trains the expert teacher on cross-entropy alone. Stage 2 trains the
student together with a scratch teacher, with the frozen expert supplying
attention maps (or soft targets / hints for the KD and FitNet baselines).
Only student, scratch-teacher and adapter parameters are ever updated.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor, no_grad
from .config import METHODS, TrainConfig
from .data import (
    STREAM_ADAPTER,
    STREAM_INIT_EXPERT,
    STREAM_INIT_SCRATCH,
    STREAM_INIT_STUDENT,
    STREAM_SUBSET,
    AugmentPolicy,
    Dataset,
    SyntheticSpec,
    augment,
    augment_rng,
    batch_iter,
    epoch_batches,
    load_cifar_binary,
    stream,
    stream_seed,
    synthetic_dataset,
)
from .errors import ConfigError, DataError, ShapeError, StateError
from .losses import (
    LossBundle,
    attention_transfer_loss,
    cross_entropy,
    fitnet_hint_loss,
    kd_softened_loss,
    logits_l2,
    total_ctkd_loss,
)
from .metrics import MetricsRecord, read_csv, steps_to_csv, write_csv
from .models import Model, build_wrn, transfer_lower_weights

log = logging.getLogger(__name__)

CTKD_TERMS = frozenset({"ce_s", "ce_t2", "l2", "at"})
METHOD_TERMS = {
    "baseline": frozenset({"ce_s"}),
    "kd": frozenset({"ce_s", "kd"}),
    "atkd": frozenset({"ce_s", "at"}),
    "rlkd": frozenset({"ce_s", "ce_t2", "l2"}),
    "rlkd+kd": frozenset({"ce_s", "ce_t2", "l2", "kd"}),
    "ctkd": CTKD_TERMS,
    "ctkd_wt": CTKD_TERMS,
    "fitnet": frozenset({"ce_s", "hint"}),
}


def method_loss_mask(method: str) -> frozenset[str]:
    """Loss terms a method switches on."""
    try:
        return METHOD_TERMS[method]
    except KeyError:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}") from None


def uses_weight_transfer(method: str) -> bool:
    return method == "ctkd_wt"


def needs_expert(method: str) -> bool:
    return bool(method_loss_mask(method) & {"at", "kd", "hint"}) or uses_weight_transfer(method)


def needs_scratch(method: str) -> bool:
    return "ce_t2" in method_loss_mask(method)


# -- schedule and optimizers ------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    initial: float
    milestones: tuple[int, ...] = ()
    decay: float = 0.2


def lr_schedule(epoch: int, schedule: LrSchedule) -> float:
    drops = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.initial * schedule.decay**drops


def sgd_momentum_step(param, grad, velocity, lr, momentum, weight_decay):
    """v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v."""
    velocity = momentum * velocity + grad + weight_decay * param
    return param - lr * velocity, velocity


def _decays(name: str) -> bool:
    return name.endswith(".weight")


class SGD:
    def __init__(self, named: list[tuple[str, Tensor]], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.named = named
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(t.data) for n, t in named}

    def step(self, lr: float) -> None:
        dt = None
        for name, t in self.named:
            if t.grad is None:
                continue
            dt = t.data.dtype
            wd = self.weight_decay if _decays(name) else 0.0
            new, self.velocity[name] = sgd_momentum_step(
                t.data, t.grad, self.velocity[name], dt.type(lr), dt.type(self.momentum), dt.type(wd)
            )
            t.data = new.astype(dt, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        return {f"sgd.v.{n}": v for n, v in self.velocity.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.velocity:
            self.velocity[n] = arrays[f"sgd.v.{n}"].copy()


class Adam:
    def __init__(self, named, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 5e-4):
        self.named = named
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in named}
        self.v = {n: np.zeros_like(t.data) for n, t in named}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, t in self.named:
            if t.grad is None:
                continue
            g = t.grad + (self.weight_decay * t.data if _decays(name) else 0)
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            upd = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            t.data = (t.data - upd).astype(t.data.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": v for n, v in self.m.items()}
        out.update({f"adam.v.{n}": v for n, v in self.v.items()})
        out["adam.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state(self, arrays) -> None:
        for n in self.m:
            self.m[n] = arrays[f"adam.m.{n}"].copy()
            self.v[n] = arrays[f"adam.v.{n}"].copy()
        self.t = int(arrays["adam.t"][0])


def make_optimizer(cfg: TrainConfig, named):
    if cfg.optimizer == "adam":
        return Adam(named, weight_decay=cfg.weight_decay)
    return SGD(named, cfg.momentum, cfg.weight_decay)


# -- evaluation ----------------------------------------------------------------

def evaluate(model: Model, test: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy over the whole split, eval mode, in order, no augmentation."""
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test set")
    correct = 0
    dtype = next(iter(model.params.values())).dtype
    with no_grad():
        for idx in batch_iter(len(test), batch_size):
            logits, _ = model.forward(Tensor(test.images[idx], dtype=dtype), train=False)
            correct += int((logits.data.argmax(axis=1) == test.labels[idx]).sum())
    return correct / len(test)


# -- data ------------------------------------------------------------------

@dataclass
class Data:
    train: Dataset
    test: Dataset


def load_data(cfg: TrainConfig) -> Data:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        spec = SyntheticSpec(ds.num_classes, ds.train_samples, ds.test_samples, 32, ds.separation, ds.noise, ds.data_seed)
        train, test = synthetic_dataset(spec, "train"), synthetic_dataset(spec, "test")
    else:
        train = load_cifar_binary(ds.path, "train", ds.kind)
        test = load_cifar_binary(ds.path, "test", ds.kind, stats=(train.mean, train.std))
    if ds.train_subset is not None:
        train = train.subset(np.sort(stream(ds.data_seed, STREAM_SUBSET).permutation(len(train))[: ds.train_subset]))
    if ds.test_subset is not None:
        test = test.subset(np.arange(min(ds.test_subset, len(test))))
    return Data(train, test)


# -- loss composition --------------------------------------------------------

def compose_loss(
    terms: frozenset[str],
    cfg: TrainConfig,
    labels: np.ndarray,
    student_out,
    scratch_out=None,
    expert_out=None,
    adapter: Tensor | None = None,
) -> LossBundle:
    """Sum the active terms for a method; the CTKD term set goes through total_ctkd_loss."""
    if terms == CTKD_TERMS:
        return total_ctkd_loss(
            student_out, scratch_out, expert_out[1], labels, cfg.l2_lambda, cfg.beta, cfg.p, cfg.attention_form
        )
    a_s, s_taps = student_out
    ce_s = cross_entropy(a_s, labels)
    total = ce_s
    b = LossBundle(total=ce_s, ce_student=ce_s.item(), l2_lambda=cfg.l2_lambda, beta=cfg.beta,
                   kd_lambda=cfg.kd_lambda, hint_weight=cfg.hint_weight, tau=cfg.tau)
    if "ce_t2" in terms:
        ce_t2 = cross_entropy(scratch_out[0], labels)
        total = total + ce_t2
        b.ce_scratch_teacher = ce_t2.item()
    if "l2" in terms:
        l2 = logits_l2(a_s, scratch_out[0])
        total = total + l2 * cfg.l2_lambda
        b.logits_l2 = l2.item()
    if "at" in terms:
        at = attention_transfer_loss(s_taps, expert_out[1], cfg.p, cfg.attention_form)
        total = total + at * cfg.beta
        b.attention = at.item()
    if "kd" in terms:
        kd = kd_softened_loss(a_s, expert_out[0], cfg.tau, cfg.kd_scale_tau_sq)
        total = total + kd * cfg.kd_lambda
        b.kd_soft = kd.item()
    if "hint" in terms:
        hint = fitnet_hint_loss(s_taps[cfg.hint_tap], expert_out[1][cfg.hint_tap], adapter)
        total = total + hint * cfg.hint_weight
        b.fitnet_hint = hint.item()
    b.total = total
    return b


# -- the training loop ---------------------------------------------------------

@dataclass
class RunResult:
    student: Model
    scratch: Model | None
    metrics: list[MetricsRecord]
    adapter: Tensor | None = None
    expert_hash_before: str | None = None
    expert_hash_after: str | None = None
    permutation_ok: bool = True
    steps: list[dict] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].acc_s


def _check_taps(student: Model, expert: Model, sample: np.ndarray) -> None:
    x = Tensor(sample[:2])
    with no_grad():
        _, s_taps = student.forward(x, train=False)
        _, e_taps = expert.forward(x, train=False)
    for j, (s, e) in enumerate(zip(s_taps, e_taps)):
        if s.shape[2:] != e.shape[2:]:
            raise ShapeError(f"tap {j}: student spatial size {s.shape[2:]} differs from expert {e.shape[2:]}")


def _fit(
    cfg: TrainConfig,
    data: Data,
    terms: frozenset[str],
    student: Model,
    scratch: Model | None,
    expert: Model | None,
    adapter: Tensor | None,
    stage: int,
    run_key: str,
    epochs: int,
    out_dir: Path | None,
    resume: bool,
    on_epoch: Callable[[MetricsRecord], None] | None,
) -> RunResult:
    sched = LrSchedule(cfg.lr, tuple(cfg.milestones), cfg.lr_decay)
    policy = AugmentPolicy(cfg.pad, (32, 32), cfg.hflip_prob, cfg.augment)
    train, test = data.train, data.test
    if expert is not None:
        expert.requires_grad_(False)

    metrics: list[MetricsRecord] = []
    steps: list[dict] = []
    start_epoch, step = 0, 0
    opt_state = None
    if resume and out_dir is not None and (out_dir / "state.ckpt").exists():
        _, meta, opt_state = checkpoint.load(out_dir / "state.ckpt")
        if meta.get("run_key") != run_key or meta.get("stage") != stage:
            raise StateError(f"state in {out_dir} belongs to a different run")
        restored = checkpoint.load_model(out_dir / "student.ckpt")
        student.params, student.stats = restored.params, restored.stats
        if scratch is not None:
            restored = checkpoint.load_model(out_dir / "scratch.ckpt")
            scratch.params, scratch.stats = restored.params, restored.stats
        if adapter is not None:
            adapter.data = opt_state["adapter.weight"].copy()
        start_epoch, step = meta["epoch"] + 1, meta["step"]
        metrics = read_csv(out_dir / "metrics.csv")[:start_epoch]
        log.info("resuming stage %d at epoch %d", stage, start_epoch)

    named = [(f"student.{n}", t) for n, t in student.named_parameters()]
    if scratch is not None:
        named += [(f"scratch.{n}", t) for n, t in scratch.named_parameters()]
    if adapter is not None:
        named.append(("adapter.weight", adapter))
    opt = make_optimizer(cfg, named)
    if opt_state is not None:
        opt.load_state(opt_state)

    expert_hash = expert.fingerprint() if expert is not None else None
    permutation_ok = True
    dtype = next(iter(student.params.values())).dtype

    for epoch in range(start_epoch, epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, sched)
        sums: dict[str, float] = {}
        seen = []
        nsteps = 0
        aug_rng = augment_rng(cfg.seed, epoch, stage)
        for idx in epoch_batches(len(train), cfg.batch_size, cfg.seed, epoch, stage):
            seen.append(idx)
            x = Tensor(augment(train.images[idx], policy, aug_rng), dtype=dtype)
            y = train.labels[idx]
            s_out = student.forward(x, train=True)
            t_out = scratch.forward(x, train=True) if scratch is not None else None
            e_out = None
            if expert is not None and terms & {"at", "kd", "hint"}:
                with no_grad():
                    e_out = expert.forward(x, train=False)
            bundle = compose_loss(terms, cfg, y, s_out, t_out, e_out, adapter)
            for _, t in named:
                t.zero_grad()
            ad.backward(bundle.total)
            opt.step(lr)

            parts = bundle.weighted()
            parts["total"] = bundle.total.item()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            nsteps += 1
            step += 1
            if cfg.log_every and step % cfg.log_every == 0:
                steps.append({"step": step, "epoch": epoch, **parts})

        order = np.concatenate(seen)
        if not np.array_equal(np.sort(order), np.arange(len(train))):
            permutation_ok = False
            raise StateError(f"epoch {epoch} did not visit every training index exactly once")

        means = {k: v / nsteps for k, v in sums.items()}
        rec = MetricsRecord(
            epoch=epoch,
            lr=lr,
            ce_s=means["ce_s"],
            ce_t2=means.get("ce_t2"),
            l2=means.get("l2"),
            at=means.get("at"),
            total=means["total"],
            acc_s=evaluate(student, test),
            acc_t2=evaluate(scratch, test) if scratch is not None else None,
            secs=(time.perf_counter() - t0) if cfg.clock == "wall" else 0.0,
            kd=means.get("kd"),
            hint=means.get("hint"),
        )
        metrics.append(rec)
        log.info(
            "stage %d epoch %d lr %.4g total %.4f acc_s %.4f%s",
            stage, epoch, lr, rec.total, rec.acc_s,
            "" if rec.acc_t2 is None else f" acc_t2 {rec.acc_t2:.4f}",
        )
        if on_epoch is not None:
            on_epoch(rec)
        if out_dir is not None:
            _save_progress(out_dir, run_key, stage, epoch, step, student, scratch, adapter, opt, metrics, steps)

    expert_after = expert.fingerprint() if expert is not None else None
    if expert_hash != expert_after:
        raise StateError("expert teacher parameters changed during collaborative training")
    return RunResult(student, scratch, metrics, adapter, expert_hash, expert_after, permutation_ok, steps)


def _save_progress(out_dir, run_key, stage, epoch, step, student, scratch, adapter, opt, metrics, steps) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out_dir / "student.ckpt", student)
    if scratch is not None:
        checkpoint.save(out_dir / "scratch.ckpt", scratch)
    extras = dict(opt.state())
    if adapter is not None:
        extras["adapter.weight"] = adapter.data
    write_csv(out_dir / "metrics.csv", metrics)
    (out_dir / "steps.csv").write_text(steps_to_csv(steps))
    # state last: its presence marks the epoch as complete
    meta = {"run_key": run_key, "stage": stage, "epoch": epoch, "step": step}
    checkpoint.save(out_dir / "state.ckpt", meta=meta, extras=extras)


def init_models(cfg: TrainConfig) -> tuple[Model, Model | None]:
    """Student and (when the method has one) scratch teacher, each from its own seed stream."""
    student = build_wrn(cfg.student_spec, stream_seed(cfg.seed, STREAM_INIT_STUDENT))
    scratch = None
    if needs_scratch(cfg.method):
        scratch = build_wrn(cfg.teacher_spec, stream_seed(cfg.seed, STREAM_INIT_SCRATCH))
    return student, scratch


def train_expert(
    cfg: TrainConfig,
    data: Data,
    out_dir: Path | None = None,
    resume: bool = False,
    on_epoch=None,
) -> tuple[Model, list[MetricsRecord]]:
    """Stage 1: cross-entropy training of the expert teacher for the configured epoch budget."""
    cfg.validate()
    if data.train.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {data.train.num_classes} classes but config expects {cfg.num_classes}")
    expert = build_wrn(cfg.teacher_spec, stream_seed(cfg.seed, STREAM_INIT_EXPERT))
    with threadpool_limits(cfg.threads):
        result = _fit(cfg, data, METHOD_TERMS["baseline"], expert, None, None, None, 1, cfg.expert_key(),
                      cfg.total_expert_epochs, Path(out_dir) if out_dir else None, resume, on_epoch)
    if out_dir is not None:
        checkpoint.save(Path(out_dir) / "expert.ckpt", result.student,
                        meta={"final_accuracy": result.final_accuracy, "expert_key": cfg.expert_key()})
    return result.student, result.metrics


def train_collaborative(
    cfg: TrainConfig,
    expert: Model | None,
    data: Data,
    out_dir: Path | None = None,
    resume: bool = False,
    on_epoch=None,
) -> RunResult:
    """Stage 2 for any method: updates student (and scratch teacher / adapter) only."""
    cfg.validate()
    terms = method_loss_mask(cfg.method)
    if data.train.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {data.train.num_classes} classes but config expects {cfg.num_classes}")
    if needs_expert(cfg.method) and expert is None:
        raise ConfigError(f"method {cfg.method} needs an expert teacher checkpoint")
    student, scratch = init_models(cfg)
    if expert is not None:
        _check_taps(student, expert, data.train.images)
    if uses_weight_transfer(cfg.method):
        student = transfer_lower_weights(student, expert, cfg.transfer_groups)
    adapter = None
    if "hint" in terms:
        c_s = cfg.student_spec.widths[cfg.hint_tap]
        c_t = expert.spec.widths[cfg.hint_tap]
        rng = stream(cfg.seed, STREAM_ADAPTER)
        adapter = Tensor(rng.normal(0.0, np.sqrt(2.0 / c_s), size=(c_t, c_s, 1, 1)).astype(np.float32),
                         requires_grad=True)
    with threadpool_limits(cfg.threads):
        return _fit(cfg, data, terms, student, scratch, expert if needs_expert(cfg.method) else None,
                    adapter, 2, cfg.run_id(), cfg.epochs, Path(out_dir) if out_dir else None, resume, on_epoch)
