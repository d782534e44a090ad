"""Run orchestration: single runs, seed sweeps, method comparisons, attention export."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Tensor, no_grad
from .config import DatasetConfig, TrainConfig, dump_config
from .errors import ParameterError
from .losses import attention_map
from .models import build_wrn, param_count
from .training import Data, load_data, needs_expert, train_collaborative, train_expert

log = logging.getLogger(__name__)

def expert_path(cfg: TrainConfig) -> Path:
    if cfg.expert_checkpoint:
        return Path(cfg.expert_checkpoint)
    return Path(cfg.output_dir) / "experts" / cfg.expert_key() / "expert.ckpt"


def obtain_expert(cfg: TrainConfig, data: Data, resume: bool = False):
    """Load the expert checkpoint, running Stage 1 first when it does not exist yet."""
    path = expert_path(cfg)
    if path.exists():
        return checkpoint.load_model(path)
    stage_cfg = cfg.replace(seed=0) if cfg.share_expert else cfg
    log.info("expert checkpoint %s absent; running stage 1", path)
    out = path.parent
    dump_config(stage_cfg, out / "config.yaml")
    expert, metrics = train_expert(stage_cfg, data, out_dir=out, resume=resume)
    if path.name != "expert.ckpt":
        checkpoint.save(path, expert, meta={"final_accuracy": metrics[-1].acc_s})
    return expert


@dataclass
class RunSummary:
    method: str
    seed: int
    run_dir: str
    final_accuracy: float | None
    scratch_accuracy: float | None = None
    params: int | None = None
    expert_frozen: bool | None = None
    permutation_ok: bool | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_dir(cfg: TrainConfig) -> Path:
    return Path(cfg.output_dir) / f"{cfg.method}-s{cfg.seed}-{cfg.run_id()}"


def run(cfg: TrainConfig, data: Data | None = None, resume: bool = False) -> RunSummary:
    """Stage 1 when needed, then the configured method; artifacts land in run_dir(cfg)."""
    cfg.validate()
    out = run_dir(cfg)
    dump_config(cfg, out / "config.yaml")
    data = data or load_data(cfg)
    expert = obtain_expert(cfg, data, resume) if needs_expert(cfg.method) else None
    result = train_collaborative(cfg, expert, data, out_dir=out, resume=resume)
    summary = RunSummary(
        method=cfg.method,
        seed=cfg.seed,
        run_dir=str(out),
        final_accuracy=result.final_accuracy,
        scratch_accuracy=result.metrics[-1].acc_t2,
        params=param_count(result.student),
        expert_frozen=None if expert is None else result.expert_hash_before == result.expert_hash_after,
        permutation_ok=result.permutation_ok,
    )
    (out / "summary.json").write_text(json.dumps(summary.__dict__, indent=2, sort_keys=True))
    return summary


def _run_safely(cfg: TrainConfig, data: Data | None = None) -> RunSummary:
    try:
        return run(cfg, data)
    except Exception as exc:  # a failed seed is reported, not fatal to the sweep
        log.exception("run %s seed %d failed", cfg.method, cfg.seed)
        return RunSummary(cfg.method, cfg.seed, str(run_dir(cfg)), None, error=f"{type(exc).__name__}: {exc}")


def lower_median(values: list[float]) -> float:
    """Median; for an even count, the lower of the two middle elements."""
    if not values:
        raise ValueError("median of an empty list")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class SweepReport:
    method: str
    runs: list[RunSummary]
    median: float | None = None
    failed: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "median": self.median,
            "failed_seeds": self.failed,
            "runs": [r.__dict__ for r in self.runs],
        }


def sweep(cfg: TrainConfig, seeds: list[int], jobs: int = 1, data: Data | None = None) -> SweepReport:
    if not seeds:
        raise ParameterError("sweep needs at least one seed")
    configs = [cfg.replace(seed=s) for s in seeds]
    if jobs > 1:
        # experts for distinct seeds are independent; workers load their own data
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_safely, configs))
    else:
        data = data or load_data(cfg)
        runs = [_run_safely(c, data) for c in configs]
    ok = [r.final_accuracy for r in runs if not r.failed]
    return SweepReport(
        method=cfg.method,
        runs=runs,
        median=lower_median(ok) if ok else None,
        failed=[r.seed for r in runs if r.failed],
    )


def compare(cfg: TrainConfig, methods: list[str], seeds: list[int], jobs: int = 1) -> list[SweepReport]:
    """Every method under the same seeds, hence the same data and augmentation streams."""
    for m in methods:
        cfg.replace(method=m).validate()
    data = load_data(cfg) if jobs <= 1 else None
    reports = [sweep(cfg.replace(method=m), seeds, jobs, data) for m in methods]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(comparison_table(cfg, reports))
    (out / "comparison.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    return reports


def comparison_table(cfg: TrainConfig, reports: list[SweepReport]) -> str:
    params = param_count(build_wrn(cfg.student_spec, 0)) / 1e6
    lines = ["method,model,params_m,median_acc,seeds,failed"]
    for r in reports:
        med = "" if r.median is None else f"{r.median:.4f}"
        seeds = ";".join(str(x.seed) for x in r.runs)
        failed = ";".join(str(s) for s in r.failed)
        lines.append(f"{r.method},{cfg.student_spec.name},{params:.2f},{med},{seeds},{failed}")
    return "\n".join(lines) + "\n"


# -- attention export -----------------------------------------------------

def write_pgm(path, values: np.ndarray) -> None:
    """Binary greymap, scaled so the per-image maximum maps to 255."""
    top = values.max()
    scaled = np.zeros(values.shape, dtype=np.uint8) if top <= 0 else np.round(values / top * 255).astype(np.uint8)
    h, w = values.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_map_csv(path, values: np.ndarray) -> None:
    Path(path).write_text("\n".join(",".join(repr(float(v)) for v in row) for row in values) + "\n")


def read_map_csv(path) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines()])


def export_attention(checkpoint_path, images: np.ndarray, tap: int, p: float, out_dir) -> list[Path]:
    """Write each sample's channel-collapsed attention map as PGM plus raw CSV."""
    if tap not in (0, 1, 2):
        raise ParameterError(f"tap must be 0, 1 or 2, got {tap}")
    model = checkpoint.load_model(checkpoint_path)
    dtype = next(iter(model.params.values())).dtype
    with no_grad():
        _, taps = model.forward(Tensor(np.asarray(images), dtype=dtype), train=False)
        maps = attention_map(taps[tap], p).data
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, m in enumerate(maps):
        write_pgm(out / f"sample{i:04d}_tap{tap}.pgm", m)
        write_map_csv(out / f"sample{i:04d}_tap{tap}.csv", m)
        written.append(out / f"sample{i:04d}_tap{tap}.csv")
    return written


# -- the scaled CIFAR-10 experiment ------------------------------------------

DESK_METHODS = ("baseline", "rlkd", "ctkd")
DESK_SEEDS = (1, 2, 3, 4, 5)


def desk_config(cifar_dir, output_dir) -> TrainConfig:
    """CIFAR-10 5000-image subset, WRN-10-1 student, WRN-16-1 teachers, 40 epochs."""
    return TrainConfig(
        method="ctkd",
        student="WRN-10-1",
        teacher="WRN-16-1",
        epochs=40,
        milestones=[20, 30],
        batch_size=128,
        lr=0.1,
        clock="none",
        output_dir=str(output_dir),
        dataset=DatasetConfig(kind="cifar10", path=str(cifar_dir), train_subset=5000),
    ).validate()


def desk_experiment(cifar_dir, output_dir, seeds=DESK_SEEDS, jobs: int = 1) -> dict:
    cfg = desk_config(cifar_dir, output_dir)
    reports = {r.method: r for r in compare(cfg, list(DESK_METHODS), list(seeds), jobs)}
    ctkd_runs = reports["ctkd"].runs
    return {
        "medians": {m: r.median for m, r in reports.items()},
        "failed": {m: r.failed for m, r in reports.items() if r.failed},
        "expert_frozen": all(r.expert_frozen for r in ctkd_runs if not r.failed),
        "permutation_ok": all(r.permutation_ok for rep in reports.values() for r in rep.runs if not r.failed),
    }
