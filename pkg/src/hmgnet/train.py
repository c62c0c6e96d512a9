"""Multi-task training loop: loss, schedule, early stopping, checkpoints,
evaluation, and the ablation run modes."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .dataset import DatasetCache
from .graph import CompositionVocab
from .ingest import SplitSpec, split_dataset
from .model import ForwardOutput, ModelConfig, forward, init_params
from .optim import AmsGrad, ParameterStore

CHECKPOINT_KIND = "hmgnet-checkpoint"

# Short-range targets use the tighter cutoff.
SHORT_CUTOFF_TARGETS = frozenset({"zpve", "u", "u0", "h", "g", "cv"})


def default_cutoff(target: str) -> float:
    return 3.0 if target in SHORT_CUTOFF_TARGETS else 5.0


@dataclass
class TrainConfig:
    """Every training hyperparameter plus ablation switches and seeds.

    Step-count defaults are desk scale; the full-scale values used for the
    QM9 benchmark runs live in configs/qm9_full.json.
    """

    target: str = "u0"
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 100_000      # full scale: 2_000_000
    max_steps: int = 5_000                # full scale: 3_000_000
    eval_interval: int = 500
    patience_evals: int = 20              # full scale: 1_000_000 steps / cadence
    l2_lambda: float = 1e-6
    cutoff: float = 0.0                   # 0 -> per-target default
    n_feat: int = 128
    n_interactions: int = 5
    k_rbf: int = 64
    seed: int = 0
    n_train: int = 0                      # 0 -> 80/10/10 of the cache
    n_val: int = 0
    n_test: int = 0
    use_mtl_loss: bool = True
    use_inter_order: bool = True
    use_order_2: bool = True
    grad_clip_norm: float = 0.0           # 0 -> no clipping
    precision: str = "f64"

    def __post_init__(self):
        if self.batch_size < 1 or self.lr < 0 or self.l2_lambda < 0:
            raise ValueError("batch_size must be >= 1; lr and l2_lambda >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")

    def resolved_cutoff(self) -> float:
        return self.cutoff if self.cutoff > 0 else default_cutoff(self.target)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        valid = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - valid
        if unknown:
            raise ValueError(
                f"unknown config keys: {sorted(unknown)}; valid keys: {sorted(valid)}"
            )
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Step-decayed learning rate: lr * factor^(step // interval)."""
    return config.lr * config.lr_decay_factor ** (step // config.lr_decay_interval)


def mtl_loss(out: ForwardOutput, y: np.ndarray, params: ParameterStore,
             l2_lambda: float, use_mtl: bool) -> ad.Tensor:
    """Mean over molecules of the per-molecule multi-task absolute error,
    plus the L2 penalty over all trainable parameters.

    With the multi-task term enabled the per-molecule loss averages the
    fused error with each per-order error; without it only the fused error
    remains."""
    y_col = np.asarray(y, dtype=ad.get_default_dtype()).reshape(-1, 1)
    err_fused = ad.absolute(ad.sub(out.fused, ad.Tensor(y_col)))
    if use_mtl:
        err_orders = ad.absolute(ad.sub(out.per_order, ad.Tensor(y_col)))
        n_terms = 1 + out.per_order.data.shape[1]
        per_mol = ad.scale(
            ad.tsum(ad.concat([err_fused, err_orders], axis=1), axis=1),
            1.0 / n_terms)
    else:
        per_mol = ad.tsum(err_fused, axis=1)
    loss = ad.tmean(per_mol)
    if l2_lambda > 0:
        loss = ad.add(loss, ad.scale(params.l2_sumsq(), l2_lambda))
    return loss


@dataclass
class EvalReport:
    split: str
    n_molecules: int
    mae_fused: float
    mae_order1: float
    mae_order2: float | None
    mean_alpha: list[float]
    step: int
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "split": self.split, "n_molecules": self.n_molecules,
            "mae_fused": self.mae_fused, "mae_order1": self.mae_order1,
            "mae_order2": self.mae_order2, "mean_alpha": self.mean_alpha,
            "step": self.step, "wall_time": self.wall_time,
        }


def evaluate(params: ParameterStore, mconfig: ModelConfig, cache: DatasetCache,
             indices, target: str, split: str = "val", step: int = 0,
             batch_size: int = 128) -> EvalReport:
    """Inference-mode MAEs (fused and per order) plus mean fusion weights."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError(f"cannot evaluate an empty {split!r} split")
    t0 = time.perf_counter()
    abs_fused = abs_orders = alpha_sum = None
    for lo in range(0, indices.size, batch_size):
        chunk = indices[lo : lo + batch_size]
        hmg, feats, y = cache.make_batch(chunk, target)
        out = forward(params, mconfig, hmg, feats, training=False)
        err_f = np.abs(out.fused.data[:, 0] - y).sum()
        err_o = np.abs(out.per_order.data - y[:, None]).sum(axis=0)
        a = out.alpha.data.sum(axis=0)
        abs_fused = err_f if abs_fused is None else abs_fused + err_f
        abs_orders = err_o if abs_orders is None else abs_orders + err_o
        alpha_sum = a if alpha_sum is None else alpha_sum + a
    n = indices.size
    return EvalReport(
        split=split, n_molecules=int(n),
        mae_fused=float(abs_fused / n),
        mae_order1=float(abs_orders[0] / n),
        mae_order2=float(abs_orders[1] / n) if mconfig.use_order_2 else None,
        mean_alpha=[float(v / n) for v in alpha_sum],
        step=step, wall_time=time.perf_counter() - t0,
    )


def _epoch_permutation(train_idx: np.ndarray, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch])
    return train_idx[rng.permutation(train_idx.size)]


def _clip_gradients(store: ParameterStore, max_norm: float) -> None:
    total = 0.0
    for name in store.names():
        g = store.grad_of(name)
        total += float((g * g).sum())
    norm = total ** 0.5
    if norm > max_norm:
        factor = max_norm / norm
        for p in store.params.values():
            if p.grad is not None:
                p.grad *= factor


def make_model_config(tconfig: TrainConfig, vocab: CompositionVocab) -> ModelConfig:
    # Composition ids are globally dense, so every lookup table covers the
    # full id range regardless of order.
    v = vocab.table_size
    return ModelConfig(
        n_feat=tconfig.n_feat, n_interactions=tconfig.n_interactions,
        k_rbf=tconfig.k_rbf, cutoff=tconfig.resolved_cutoff(),
        use_mtl_loss=tconfig.use_mtl_loss,
        use_inter_order=tconfig.use_inter_order,
        use_order_2=tconfig.use_order_2,
        n_comp1=v, n_comp2=v,
    )


def resolve_splits(cache: DatasetCache, tconfig: TrainConfig):
    n = cache.n_molecules
    n_train, n_val, n_test = tconfig.n_train, tconfig.n_val, tconfig.n_test
    if n_train == n_val == n_test == 0:
        n_val = max(1, n // 10)
        n_test = max(1, n // 10)
        n_train = n - n_val - n_test
    return split_dataset(n, SplitSpec(n_train, n_val, n_test, seed=tconfig.seed))


def save_checkpoint(path, params: ParameterStore, opt: AmsGrad,
                    mconfig: ModelConfig, tconfig: TrainConfig,
                    vocab: CompositionVocab, banks_meta: dict,
                    counters: dict) -> None:
    arrays = {}
    arrays.update(params.state_arrays())
    arrays.update(opt.state_arrays())
    arrays.update(vocab.to_arrays())
    for key, value in counters.items():
        arrays[f"train/{key}"] = np.asarray([value], dtype=np.float64)
    container.save_arrays(path, arrays, meta={
        "kind": CHECKPOINT_KIND,
        "model": mconfig.to_dict(),
        "train": tconfig.to_dict(),
        "banks": banks_meta,
    })


def load_checkpoint(path):
    """Returns (params, opt, model config, train config, vocab, banks meta,
    counters)."""
    arrays, meta = container.load_arrays(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a checkpoint")
    mconfig = ModelConfig.from_dict(meta["model"])
    tconfig = TrainConfig.from_dict(meta["train"])
    ad.set_default_dtype(np.float32 if tconfig.precision == "f32" else np.float64)
    params = init_params(mconfig, seed=tconfig.seed)
    params.load_state_arrays(arrays)
    opt = AmsGrad(params, lr=tconfig.lr)
    opt.load_state_arrays(arrays)
    vocab = CompositionVocab.from_arrays(arrays, frozen=True)
    counters = {key.removeprefix("train/"): float(arr[0])
                for key, arr in arrays.items() if key.startswith("train/")}
    return params, opt, mconfig, tconfig, vocab, meta["banks"], counters


@dataclass
class TrainResult:
    best_step: int
    best_val_mae: float
    steps_run: int
    stopped_early: bool
    history: list[EvalReport]
    checkpoint_best: Path
    checkpoint_last: Path
    metrics_path: Path


def train_loop(cache: DatasetCache, tconfig: TrainConfig, out_dir,
               resume_from=None) -> TrainResult:
    """Run (or resume) training; writes best/last checkpoints and a metrics
    log under ``out_dir`` and reports the best validation MAE."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ad.set_default_dtype(np.float32 if tconfig.precision == "f32" else np.float64)

    if tconfig.cutoff > 0 and abs(tconfig.cutoff - cache.cutoff) > 1e-12:
        raise ValueError(
            f"config cutoff {tconfig.cutoff} does not match cache cutoff "
            f"{cache.cutoff}; re-run prepare"
        )
    if tconfig.k_rbf != cache.banks.distance.k:
        raise ValueError(
            f"config k_rbf {tconfig.k_rbf} does not match cache basis size "
            f"{cache.banks.distance.k}; re-run prepare"
        )
    train_idx, val_idx, _ = resolve_splits(cache, tconfig)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("train and validation splits must be nonempty")

    mconfig = make_model_config(tconfig, cache.vocab)
    if resume_from is not None:
        params, opt, mconfig, rconfig, _, _, counters = load_checkpoint(resume_from)
        if rconfig.to_dict() != tconfig.to_dict():
            raise ValueError("resume config does not match checkpoint config")
        step = int(counters["step"])
        epoch = int(counters["epoch"])
        pos = int(counters["pos"])
        best_val = float(counters["best_val"])
        best_step = int(counters["best_step"])
        evals_since_improve = int(counters["evals_since_improve"])
    else:
        params = init_params(mconfig, seed=tconfig.seed)
        opt = AmsGrad(params, lr=tconfig.lr)
        step = epoch = pos = 0
        best_val = float("inf")
        best_step = -1
        evals_since_improve = 0

    best_path = out_dir / "checkpoint_best.bin"
    last_path = out_dir / "checkpoint_last.bin"
    metrics_path = out_dir / "metrics.jsonl"
    banks_meta = cache.banks.to_meta()
    history: list[EvalReport] = []
    perm = _epoch_permutation(train_idx, tconfig.seed, epoch)
    stopped_early = False

    def checkpoint(path):
        save_checkpoint(path, params, opt, mconfig, tconfig, cache.vocab,
                        banks_meta, counters={
                            "step": step, "epoch": epoch, "pos": pos,
                            "best_val": best_val, "best_step": best_step,
                            "evals_since_improve": evals_since_improve,
                        })

    with open(metrics_path, "a") as metrics:
        while step < tconfig.max_steps:
            if pos >= perm.size:
                epoch += 1
                pos = 0
                perm = _epoch_permutation(train_idx, tconfig.seed, epoch)
            batch_idx = perm[pos : pos + tconfig.batch_size]
            pos += batch_idx.size
            step += 1

            hmg, feats, y = cache.make_batch(batch_idx, tconfig.target)
            out = forward(params, mconfig, hmg, feats, training=True)
            loss = mtl_loss(out, y, params, tconfig.l2_lambda,
                            tconfig.use_mtl_loss)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise RuntimeError(f"non-finite training loss at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            if tconfig.grad_clip_norm > 0:
                _clip_gradients(params, tconfig.grad_clip_norm)
            opt.step(lr=lr_at(step - 1, tconfig))

            if step % tconfig.eval_interval == 0 or step == tconfig.max_steps:
                report = evaluate(params, mconfig, cache, val_idx,
                                  tconfig.target, split="val", step=step)
                history.append(report)
                if report.mae_fused < best_val:
                    best_val = report.mae_fused
                    best_step = step
                    evals_since_improve = 0
                    checkpoint(best_path)
                else:
                    evals_since_improve += 1
                metrics.write(json.dumps({
                    "step": step, "lr": lr_at(step - 1, tconfig),
                    "train_loss": loss_value, **report.to_dict(),
                    "best_val": best_val,
                }) + "\n")
                if evals_since_improve >= tconfig.patience_evals:
                    stopped_early = True
                    break

    checkpoint(last_path)
    if best_step < 0:
        checkpoint(best_path)
    return TrainResult(
        best_step=best_step, best_val_mae=best_val, steps_run=step,
        stopped_early=stopped_early, history=history,
        checkpoint_best=best_path, checkpoint_last=last_path,
        metrics_path=metrics_path,
    )


ABLATION_MODES = ("remove_mtl", "remove_iomp", "remove_ho")


def ablation_config(tconfig: TrainConfig, mode: str) -> TrainConfig:
    if mode == "remove_mtl":
        return replace(tconfig, use_mtl_loss=False)
    if mode == "remove_iomp":
        return replace(tconfig, use_inter_order=False)
    if mode == "remove_ho":
        return replace(tconfig, use_order_2=False)
    raise ValueError(f"unknown ablation mode {mode!r}; valid: {ABLATION_MODES}")


def run_ablation(mode: str, cache: DatasetCache, tconfig: TrainConfig, out_dir):
    """Train the default and the ablated variant with shared seeds; returns
    (default EvalReport, variant EvalReport) on the validation split."""
    variant_cfg = ablation_config(tconfig, mode)
    out_dir = Path(out_dir)
    reports = []
    for label, cfg in (("default", tconfig), (mode, variant_cfg)):
        result = train_loop(cache, cfg, out_dir / label)
        params, _, mconfig, _, _, _, counters = load_checkpoint(result.checkpoint_best)
        _, val_idx, _ = resolve_splits(cache, cfg)
        reports.append(evaluate(params, mconfig, cache, val_idx, cfg.target,
                                split=f"val/{label}", step=int(counters["step"])))
    return tuple(reports)
