"""Training orchestration: phased cross-validation with rotating holdout
splits, per-epoch exponential learning-rate decay, early stopping,
best-weights restoration, a short all-data fine-tune phase, and fully
resumable state."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.records import Dataset
from .data.sampler import DynamicSampler, FixedSampler, SamplerConfig
from .errors import ConfigError, NumericError
from .losses import LossConfig, total_loss
from .metrics import evaluate_model
from .model import MaxFusionUNet, load_arrays, save_arrays
from .tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)

FINE_TUNE_PHASE = -1  # phase id used in logs for the all-data fine-tune


@dataclass
class ScheduleConfig:
    folds: int = 5
    epochs: tuple[int, ...] = (50, 40, 30, 20, 15)
    learning_rates: tuple[float, ...] = (0.0001, 0.00009, 0.00008, 0.00006, 0.00005)
    fine_tune_epochs: int = 10
    fine_tune_lr: float = 0.00004
    decay: float = 0.98
    early_stop_patience: int = 8
    early_stop_min_improve: float = 1e-4
    iters_per_epoch: int = 0  # 0 = derive from dataset size and pixel budget
    checkpoint_every: int = 0  # epochs; 0 = phase boundaries only
    reset_optimizer_between_phases: bool = False

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        self.learning_rates = tuple(float(v) for v in self.learning_rates)
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if len(self.epochs) != self.folds or len(self.learning_rates) != self.folds:
            raise ConfigError(
                f"need exactly {self.folds} epoch budgets and learning rates, "
                f"got {len(self.epochs)} / {len(self.learning_rates)}"
            )
        if any(e < 1 for e in self.epochs) or self.fine_tune_epochs < 0:
            raise ConfigError("epoch budgets must be positive")
        if any(lr <= 0 for lr in self.learning_rates) or self.fine_tune_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")

    def truncated(self, folds: int) -> "ScheduleConfig":
        return ScheduleConfig(
            folds=folds,
            epochs=self.epochs[:folds],
            learning_rates=self.learning_rates[:folds],
            fine_tune_epochs=self.fine_tune_epochs,
            fine_tune_lr=self.fine_tune_lr,
            decay=self.decay,
            early_stop_patience=self.early_stop_patience,
            early_stop_min_improve=self.early_stop_min_improve,
            iters_per_epoch=self.iters_per_epoch,
            checkpoint_every=self.checkpoint_every,
            reset_optimizer_between_phases=self.reset_optimizer_between_phases,
        )


def desk_schedule(**over) -> ScheduleConfig:
    """Scaled-down profile for laptop-scale runs on phantoms."""
    base = dict(
        epochs=(5, 4, 3, 2, 2),
        learning_rates=(0.001, 0.0009, 0.0008, 0.0006, 0.0005),
        fine_tune_epochs=2,
        fine_tune_lr=0.0004,
    )
    base.update(over)
    return ScheduleConfig(**base)


def split_dataset(cases: list[str], k: int = 5, seed: int = 0) -> list[list[str]]:
    """Case-level partition into k splits with sizes differing by at most
    one; deterministic for a given seed."""
    cases = sorted(cases)
    if len(cases) < k:
        raise ConfigError(f"need at least {k} cases for {k}-fold splitting, got {len(cases)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EC7]))
    order = rng.permutation(len(cases))
    shuffled = [cases[i] for i in order]
    return [sorted(part.tolist()) for part in np.array_split(np.array(shuffled, dtype=object), k)]


class Adam:
    """Adaptive-moment optimizer with global gradient-norm clipping.

    Non-finite gradients skip the step (counted, logged) rather than
    poisoning the moments.
    """

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=5.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.clip_norm = beta1, beta2, eps, clip_norm
        self.t = 0
        self.skipped = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> dict:
        grads = {}
        sq = 0.0
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads[n] = g
            sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
        norm = float(np.sqrt(sq))
        if not np.isfinite(norm):
            self.skipped += 1
            logger.warning("non-finite gradient norm; skipping step %d", self.t + 1)
            for p in self.params.values():
                p.zero_grad()
            return {"grad_norm": norm, "clip_scale": 0.0, "skipped": True}
        scale = 1.0 if norm <= self.clip_norm else self.clip_norm / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in self.params.items():
            g = grads[n] * scale if scale != 1.0 else grads[n]
            m = self.m[n]
            v = self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype)
            p.zero_grad()
        return {"grad_norm": norm, "clip_scale": scale, "skipped": False}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.params:
            self.m[n] = arrays[f"adam.m.{n}"].copy()
            self.v[n] = arrays[f"adam.v.{n}"].copy()

    def reset(self) -> None:
        self.t = 0
        for n in self.params:
            self.m[n][...] = 0.0
            self.v[n][...] = 0.0


class JsonlLogger:
    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w")

    def log(self, event: str, **fields) -> None:
        clean = {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in fields.items()}
        self._fh.write(json.dumps({"event": event, **clean}, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class TrainState:
    phase: int = 0  # index of the phase in progress; folds = fine-tune; folds+1 = done
    epoch_in_phase: int = 0  # epochs completed in the current phase
    global_iter: int = 0
    best_val: float = float("inf")
    best_epoch: int = -1
    patience: int = 0
    sampled_cases: list[str] = field(default_factory=list)


class Trainer:
    def __init__(
        self,
        model: MaxFusionUNet,
        dataset: Dataset,
        loss_config: LossConfig,
        sampler_config: SamplerConfig,
        schedule: ScheduleConfig,
        out_dir: str | Path,
        seed: int = 0,
        no_resample: bool = False,
    ):
        n_cases = len(dataset.cases())
        if n_cases < schedule.folds:
            logger.warning(
                "only %d cases for %d folds; reducing rotation to %d phases",
                n_cases, schedule.folds, n_cases,
            )
            schedule = schedule.truncated(n_cases)
        self.model = model
        self.dataset = dataset
        self.loss_config = loss_config
        self.sampler_config = sampler_config
        self.schedule = schedule
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.no_resample = no_resample
        self.splits = split_dataset(dataset.cases(), schedule.folds, seed)
        self.params = dict(model.named_parameters())
        self.adam = Adam(self.params)
        self.state = TrainState()
        self._best_arrays: dict[str, np.ndarray] | None = None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.logger = JsonlLogger(self.out_dir / "metrics.jsonl", append=False)
        self.phase_reports: list[dict] = []

    # -- checkpoint/resume -------------------------------------------------
    def save_state(self, directory: str | Path) -> None:
        arrays = dict(self.model.state_arrays())
        arrays.update(self.adam.state_arrays())
        if self._best_arrays is not None:
            arrays.update({f"best.{n}": a for n, a in self._best_arrays.items()})
        meta = {
            "kind": "train-state",
            "phase": self.state.phase,
            "epoch_in_phase": self.state.epoch_in_phase,
            "global_iter": self.state.global_iter,
            "adam_t": self.adam.t,
            "adam_skipped": self.adam.skipped,
            "best_val": self.state.best_val,
            "best_epoch": self.state.best_epoch,
            "patience": self.state.patience,
            "seed": self.seed,
            "has_best": self._best_arrays is not None,
        }
        save_arrays(directory, arrays, meta=meta)

    def load_state(self, directory: str | Path) -> None:
        arrays, meta = load_arrays(directory)
        if meta.get("kind") != "train-state":
            raise ConfigError(f"{directory} is not a training-state checkpoint")
        model_arrays = {n: a for n, a in arrays.items() if not n.startswith(("adam.", "best."))}
        self.model.load_state(model_arrays)
        self.adam.load_state_arrays(arrays)
        self.adam.t = int(meta["adam_t"])
        self.adam.skipped = int(meta["adam_skipped"])
        self.state.phase = int(meta["phase"])
        self.state.epoch_in_phase = int(meta["epoch_in_phase"])
        self.state.global_iter = int(meta["global_iter"])
        self.state.best_val = float(meta["best_val"])
        self.state.best_epoch = int(meta["best_epoch"])
        self.state.patience = int(meta["patience"])
        if meta.get("has_best"):
            self._best_arrays = {
                n[len("best."):]: a.copy() for n, a in arrays.items() if n.startswith("best.")
            }
        else:
            self._best_arrays = None

    # -- internals -----------------------------------------------------------
    def _iters_per_epoch(self, n_train_slices: int) -> int:
        if self.schedule.iters_per_epoch:
            return self.schedule.iters_per_epoch
        if self.no_resample:
            return max(1, -(-n_train_slices // self.sampler_config.n0))
        total_px = n_train_slices * self.dataset.image_size ** 2
        return max(1, -(-total_px // self.sampler_config.pixel_budget()))

    def _train_step(self, batch: dict[str, np.ndarray], lr: float) -> dict:
        xs = [Tensor(batch[k].astype(self.model.dtype)) for k in ("x_lge", "x_t2", "x_bssfp")]
        self.model.zero_grad()
        with Tape():
            out = self.model.forward(*xs)
            loss, breakdown = total_loss(out, batch["y_ana"], batch["y_pat"], self.loss_config)
            backward(loss)
        self.adam.step(lr)
        return breakdown

    def _validate(self, records) -> dict:
        rows = evaluate_model(self.model, records)
        anatomy = float(np.mean([(r["myocardium"] + r["left_ventricle"] + r["right_ventricle"]) / 3 for r in rows]))
        infarct = float(np.mean([r["infarct"] for r in rows]))
        edema = float(np.mean([r["edema"] for r in rows]))
        losses = {
            "val_anatomy_dice_loss": 1.0 - anatomy,
            "val_infarct_dice_loss": 1.0 - infarct,
            "val_edema_dice_loss": 1.0 - edema,
        }
        losses["val_loss"] = float(np.mean(list(losses.values())))
        return losses

    def _snapshot_best(self) -> None:
        self._best_arrays = {n: p.data.copy() for n, p in self.params.items()}

    def _restore_best(self) -> None:
        if self._best_arrays is not None:
            for n, p in self.params.items():
                p.data = self._best_arrays[n].copy()

    def _run_phase(self, phase: int) -> None:
        is_fine_tune = phase == self.schedule.folds
        if is_fine_tune:
            train_cases = self.dataset.cases()
            val_cases = train_cases  # logged for monitoring; no holdout remains
            epochs = self.schedule.fine_tune_epochs
            lr0 = self.schedule.fine_tune_lr
            label = FINE_TUNE_PHASE
        else:
            val_cases = self.splits[phase]
            train_cases = sorted(set(self.dataset.cases()) - set(val_cases))
            epochs = self.schedule.epochs[phase]
            lr0 = self.schedule.learning_rates[phase]
            label = phase
        if epochs == 0:
            return
        train_ds = self.dataset.subset(train_cases)
        val_records = self.dataset.subset(val_cases).records
        sampler_cls = FixedSampler if self.no_resample else DynamicSampler
        sampler = sampler_cls(train_ds, self.sampler_config)
        iters = self._iters_per_epoch(len(train_ds))
        start_epoch = self.state.epoch_in_phase
        if start_epoch == 0:
            self.state.best_val = float("inf")
            self.state.best_epoch = -1
            self.state.patience = 0
            self._best_arrays = None
            self.state.sampled_cases = []
            if self.schedule.reset_optimizer_between_phases and not is_fine_tune and phase > 0:
                self.adam.reset()
            self.logger.log(
                "phase_start",
                phase=label,
                val_cases=list(val_cases) if not is_fine_tune else [],
                train_cases=list(train_cases),
                epochs=epochs,
                lr0=lr0,
                iters_per_epoch=iters,
            )
        sampled = set(self.state.sampled_cases)
        stopped = False
        for epoch in range(start_epoch, epochs):
            lr = lr0 * self.schedule.decay**epoch
            sums: dict[str, float] = {}
            for _ in range(iters):
                draw, batch = sampler.sample(self.state.global_iter)
                self.state.global_iter += 1
                for item in draw.items:
                    sampled.add(train_ds.records[item.slice_index].case_id)
                breakdown = self._train_step(batch, lr)
                for k, v in breakdown.items():
                    sums[k] = sums.get(k, 0.0) + v
            means = {f"train_{k}": v / iters for k, v in sums.items()}
            val = self._validate(val_records)
            improved = val["val_loss"] < self.state.best_val - self.schedule.early_stop_min_improve
            if improved or self.state.best_epoch < 0:
                self.state.best_val = val["val_loss"]
                self.state.best_epoch = epoch
                self.state.patience = 0
                self._snapshot_best()
            else:
                self.state.patience += 1
            self.state.epoch_in_phase = epoch + 1
            self.state.sampled_cases = sorted(sampled)
            self.logger.log(
                "epoch",
                phase=label,
                epoch=epoch,
                lr=lr,
                train_loss=means.get("train_total", 0.0),
                **means,
                **val,
                best_val=self.state.best_val,
                best_epoch=self.state.best_epoch,
                patience=self.state.patience,
            )
            if self.schedule.checkpoint_every and (epoch + 1) % self.schedule.checkpoint_every == 0:
                self.save_state(self.out_dir / "checkpoints" / f"phase{label}_epoch{epoch + 1}")
            if (not is_fine_tune) and self.state.patience >= self.schedule.early_stop_patience:
                stopped = True
                break
        if not is_fine_tune:
            self._restore_best()
        self.phase_reports.append(
            {
                "phase": label,
                "val_cases": list(val_cases) if not is_fine_tune else [],
                "epochs_run": self.state.epoch_in_phase,
                "early_stopped": stopped,
                "best_val": self.state.best_val,
                "best_epoch": self.state.best_epoch,
                "sampled_cases": sorted(sampled),
            }
        )
        self.logger.log(
            "phase_end",
            phase=label,
            epochs_run=self.state.epoch_in_phase,
            early_stopped=stopped,
            best_val=self.state.best_val,
            best_epoch=self.state.best_epoch,
        )
        self.state.phase = phase + 1
        self.state.epoch_in_phase = 0
        self.save_state(self.out_dir / "checkpoints" / (f"phase{label}" if not is_fine_tune else "final"))

    def run(self) -> dict:
        """Rotation phases then fine-tune, resuming from loaded state."""
        try:
            start = self.state.phase
            for phase in range(start, self.schedule.folds + 1):
                self._run_phase(phase)
        except NumericError:
            diag = self.out_dir / "checkpoints" / "diagnostic"
            self.save_state(diag)
            self.logger.log("abort", phase=self.state.phase, reason="non-finite", checkpoint=str(diag))
            self.logger.close()
            raise
        report = {
            "phases": self.phase_reports,
            "final_checkpoint": str(self.out_dir / "checkpoints" / "final"),
            "global_iters": self.state.global_iter,
            "optimizer_skipped_steps": self.adam.skipped,
        }
        self.logger.log("run_end", global_iters=self.state.global_iter)
        self.logger.close()
        return report
