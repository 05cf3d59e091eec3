"""Training loop, 5-fold cross-validation, ablation matrices, and the
medical-only logistic baseline.

Determinism contract: given (seed, config, data) every run produces identical
parameter trajectories and metrics. All randomness flows from seeded
Generators (data order from (seed, fold, epoch), dropout from (seed, fold)),
kernels write disjoint outputs per thread, and evaluation is pure.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import meshproj
from .errors import ConfigError, DataError, DivergenceError
from .loss import LossConfig, init_centers, inverse_prevalence_weights, total_loss
from .metrics import MetricReport, aggregate_by_participant, confusion_metrics, full_report
from .net import ModelConfig, MvBodyModel, save_checkpoint
from .records import (
    DatasetManifest,
    MedicalRecord,
    NormalizationStats,
    RecordSchema,
    normalize_records,
)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    use_smtcl: bool = True
    use_transformer_blocks: bool = True
    use_first_stage_fusion: bool = True
    mask: str = "full"  # key into meshproj.DEFAULT_MASKS
    patience: int = 10  # early stopping on validation AUC
    threshold: float = 0.5
    clip_norm: float = 1.0  # global gradient-norm clip; 0 disables
    lr_min_frac: float = 0.1  # cosine decay floor as a fraction of lr

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.use_smtcl and self.batch_size < 2:
            raise ConfigError("SMTCL needs intra-batch structure: batch_size >= 2")
        if self.mask not in meshproj.DEFAULT_MASKS:
            raise ConfigError(f"unknown mask {self.mask!r}; options {sorted(meshproj.DEFAULT_MASKS)}")
        self.loss.validate()
        self.model.validate()
        return self

    def effective_model(self) -> ModelConfig:
        return replace(
            self.model,
            use_transformer_blocks=self.use_transformer_blocks,
            use_first_stage_fusion=self.use_first_stage_fusion,
        )

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["model"]["conv_widths"] = list(self.model.conv_widths)
        return obj


@dataclass
class TrainData:
    """Scan-level arrays plus per-participant records (raw, unnormalized)."""

    views: np.ndarray  # (n_scans, n_views, S, S) float32 grayscale
    scan_pids: list
    scan_ids: list
    records: dict  # participant_id -> MedicalRecord
    schema: RecordSchema

    def indices_of(self, pids) -> np.ndarray:
        wanted = set(pids)
        return np.array([i for i, p in enumerate(self.scan_pids) if p in wanted], dtype=np.int64)

    def labels_of(self, idx) -> np.ndarray:
        return np.array([self.records[self.scan_pids[i]].label for i in idx], dtype=np.int64)


def load_scan_data(manifest: DatasetManifest, records: list, root, mask_name: str = "full",
                   schema: RecordSchema = RecordSchema()) -> TrainData:
    """Load rendered projections for every manifest entry, applying the mask."""
    root = Path(root)
    mask = meshproj.DEFAULT_MASKS[mask_name]
    rec_by_pid = {}
    for r in records:
        rec_by_pid[r.participant_id] = r
    views_list, pids, sids = [], [], []
    for e in manifest.entries:
        if e.participant_id not in rec_by_pid:
            raise DataError(f"scan {e.scan_id}: no medical record for {e.participant_id}")
        d = Path(e.proj_dir)
        if not d.is_absolute():
            d = root / d
        if not (d / "manifest.json").exists():
            raise DataError(f"scan {e.scan_id}: projections missing at {d}")
        vs = meshproj.load_views(d)
        vs = meshproj.apply_mask(vs, mask)
        views_list.append(vs.images[:, :, :, 0])
        pids.append(e.participant_id)
        sids.append(e.scan_id)
    views = np.stack(views_list).astype(np.float32)
    return TrainData(views=views, scan_pids=pids, scan_ids=sids, records=rec_by_pid, schema=schema)


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with decoupled weight decay and optional global-norm gradient
    clipping; parameters stepped in sorted-name order."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float = 0.0):
        self.params = dict(sorted(params.items()))
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _clip(self):
        if not self.clip_norm:
            return
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = np.sqrt(total)
        if norm > self.clip_norm:
            scale = self.clip_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale

    def step(self):
        self._clip()
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data = p.data - self.lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ------------------------------------------------------------------ training

@dataclass
class FoldResult:
    fold_index: int
    log: list  # per-epoch dicts (epoch, ce, smtcl, mean_omega, val metrics)
    best_epoch: int
    val_report: MetricReport
    val_scores: list  # (participant_id, score) at the best epoch
    state: dict  # parameter arrays at the best epoch (incl. centers)
    stats: NormalizationStats
    param_count: int


def _batch_views(data: TrainData, idx: np.ndarray, channels: int) -> np.ndarray:
    v = data.views[idx][..., None]
    if channels > 1:
        v = np.repeat(v, channels, axis=-1)
    return v


def _med_matrix(data: TrainData, stats: NormalizationStats) -> dict:
    """participant_id -> normalized medical vector."""
    pids = sorted(data.records)
    mat = normalize_records([data.records[p] for p in pids], stats, data.schema)
    return {p: mat[i].astype(np.float32) for i, p in enumerate(pids)}


def predict_scores(model: MvBodyModel, data: TrainData, med_by_pid: dict, idx: np.ndarray,
                   batch_size: int = 16) -> list:
    """Per-scan positive-class scores, deterministic order."""
    out = []
    for s in range(0, len(idx), batch_size):
        chunk = idx[s : s + batch_size]
        views = _batch_views(data, chunk, model.cfg.channels)
        med = np.stack([med_by_pid[data.scan_pids[i]] for i in chunk])
        risk = model.forward(views, med, mode="infer").risk
        out.extend((data.scan_pids[i], float(r)) for i, r in zip(chunk, risk))
    return out


def evaluate_participants(model: MvBodyModel, data: TrainData, med_by_pid: dict, pids,
                          threshold: float = 0.5):
    """Participant-level report: max score over each participant's scans."""
    idx = data.indices_of(pids)
    scan_scores = predict_scores(model, data, med_by_pid, idx)
    agg = aggregate_by_participant(scan_scores)
    labels = np.array([data.records[p].label for p, _ in agg], dtype=np.int64)
    scores = np.array([s for _, s in agg], dtype=np.float64)
    return full_report(scores, labels, threshold), agg


def train_fold(data: TrainData, train_pids, val_pids, cfg: TrainConfig,
               fold_index: int = 0, forbidden_pids=()) -> FoldResult:
    """Train one fold; deterministic under (seed, config, data)."""
    cfg.validate()
    train_set, val_set = set(train_pids), set(val_pids)
    if train_set & set(forbidden_pids):
        raise DataError("test participants leaked into a training fold")
    if train_set & val_set:
        raise DataError("participants shared between train and validation")

    stats = NormalizationStats.fit([data.records[p] for p in sorted(train_set)])
    med_by_pid = _med_matrix(data, stats)

    seed_root = np.random.SeedSequence((cfg.seed, fold_index))
    init_seed, dropout_seed, order_seed = seed_root.spawn(3)
    model = MvBodyModel(cfg.effective_model(), seed=init_seed.generate_state(1)[0], dtype=np.float32)
    centers = init_centers(model.cfg.fused_width, np.random.default_rng(init_seed.generate_state(2)[1]))
    dropout_rng = np.random.default_rng(dropout_seed.generate_state(1)[0])

    train_idx = data.indices_of(sorted(train_set))
    if len(train_idx) == 0:
        raise DataError("no training scans")
    train_labels = data.labels_of(train_idx)
    lcfg = cfg.loss
    if lcfg.class_weights is None:
        lcfg = replace(lcfg, class_weights=tuple(inverse_prevalence_weights(train_labels)))
    if not cfg.use_smtcl:
        lcfg = replace(lcfg, lambda_smtcl=0.0)

    opt_params = dict(model.params)
    opt_params["centers"] = centers
    opt = Adam(opt_params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)

    log = []
    best = {"auc": -1.0, "epoch": -1, "state": None, "report": None, "scores": None}
    epochs_since_best = 0
    order_root = np.random.default_rng(order_seed.generate_state(1)[0])
    epoch_seeds = order_root.integers(0, 2**63 - 1, size=cfg.epochs)

    for epoch in range(cfg.epochs):
        # cosine decay from lr to lr * lr_min_frac across the epoch budget
        if cfg.epochs > 1:
            frac = epoch / (cfg.epochs - 1)
            opt.lr = cfg.lr * (cfg.lr_min_frac + (1 - cfg.lr_min_frac) * 0.5 * (1 + np.cos(np.pi * frac)))
        perm = np.random.default_rng(epoch_seeds[epoch]).permutation(len(train_idx))
        ce_sum = sm_sum = om_sum = 0.0
        n_batches = 0
        for s in range(0, len(perm), cfg.batch_size):
            chunk = train_idx[perm[s : s + cfg.batch_size]]
            views = _batch_views(data, chunk, model.cfg.channels)
            med = np.stack([med_by_pid[data.scan_pids[i]] for i in chunk])
            labels = data.labels_of(chunk)
            out = model.forward(views, med, mode="train", rng=dropout_rng)
            loss_t, parts = total_loss(out.logits, labels, out.features, centers, lcfg)
            if not np.isfinite(loss_t.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss_t.backward()
            opt.step()
            ce_sum += parts["ce"]
            sm_sum += parts["smtcl"]
            om_sum += 0.0 if np.isnan(parts["mean_omega"]) else parts["mean_omega"]
            n_batches += 1

        val_report, val_scores = evaluate_participants(model, data, med_by_pid, sorted(val_set),
                                                       cfg.threshold)
        entry = {
            "epoch": epoch,
            "ce": ce_sum / n_batches,
            "smtcl": sm_sum / n_batches,
            "mean_omega": om_sum / n_batches,
            "val_auc": val_report.auc,
            "val_accuracy": val_report.accuracy,
        }
        log.append(entry)
        if val_report.auc > best["auc"] + 1e-12:
            state = {k: p.data.copy() for k, p in model.params.items()}
            state["centers"] = centers.data.copy()
            best.update(auc=val_report.auc, epoch=epoch, state=state, report=val_report,
                        scores=val_scores)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    model.load_state({k: v for k, v in best["state"].items() if k != "centers"})
    centers.data = best["state"]["centers"]
    return FoldResult(
        fold_index=fold_index,
        log=log,
        best_epoch=best["epoch"],
        val_report=best["report"],
        val_scores=best["scores"],
        state=best["state"],
        stats=stats,
        param_count=model.param_count(),
    )


def restore_model(cfg: TrainConfig, result: FoldResult) -> tuple:
    """Rebuild (model, centers ndarray) from a FoldResult state."""
    model = MvBodyModel(cfg.effective_model(), seed=0, dtype=np.float32)
    model.load_state({k: v for k, v in result.state.items() if k != "centers"})
    return model, result.state["centers"]


def cross_validate(data: TrainData, plan_folds, cfg: TrainConfig, forbidden_pids=()):
    """Run train_fold per fold; pool validation scores over folds for the
    aggregate report (each participant validates exactly once)."""
    results = []
    pooled = []
    for k, (train_pids, val_pids) in enumerate(plan_folds):
        res = train_fold(data, train_pids, val_pids, cfg, fold_index=k,
                         forbidden_pids=forbidden_pids)
        results.append(res)
        pooled.extend(res.val_scores)
    labels = np.array([data.records[p].label for p, _ in pooled], dtype=np.int64)
    scores = np.array([s for _, s in pooled], dtype=np.float64)
    report = full_report(scores, labels, cfg.threshold)
    return results, report, pooled


# ------------------------------------------------------------------ baseline

def train_baseline_lr(records_by_pid: dict, train_pids, eval_pids,
                      schema: RecordSchema = RecordSchema(), lr: float = 0.5,
                      max_iter: int = 20000, tol: float = 1e-6):
    """Medical-only logistic regression by full-batch gradient descent.

    Runs until the gradient norm drops below tol (or max_iter). Returns
    (MetricReport on eval participants, coefficient vector, eval scores).
    """
    train_pids, eval_pids = sorted(train_pids), sorted(eval_pids)
    train_recs = [records_by_pid[p] for p in train_pids]
    stats = NormalizationStats.fit(train_recs)
    X = normalize_records(train_recs, stats, schema)
    y = np.array([r.label for r in train_recs], dtype=np.float64)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(max_iter):
        z = X @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        gw = X.T @ (p - y) / n
        gb = float(np.mean(p - y))
        if np.sqrt(np.sum(gw**2) + gb**2) < tol:
            break
        w -= lr * gw
        b -= lr * gb
    eval_recs = [records_by_pid[p] for p in eval_pids]
    Xe = normalize_records(eval_recs, stats, schema)
    scores = 1.0 / (1.0 + np.exp(-(Xe @ w + b)))
    labels = np.array([r.label for r in eval_recs], dtype=np.int64)
    if labels.min() == labels.max():  # single-class eval set: AUC undefined
        report = confusion_metrics(scores, labels)[1]
    else:
        report = full_report(scores, labels)
    return report, np.concatenate([w, [b]]), list(zip(eval_pids, scores))


# ------------------------------------------------------------------ ablation

COMPONENT_MATRIX = (
    # (name, use_smtcl, use_transformer_blocks, use_first_stage_fusion)
    ("none", False, False, False),
    ("smtcl", True, False, False),
    ("transformer", False, True, False),
    ("first_stage_fusion", False, False, True),
    ("all", True, True, True),
)

MASK_MATRIX = ("no_legs", "no_head_shoulders", "no_head", "full")


def component_configs(base: TrainConfig):
    for name, sm, tr, fu in COMPONENT_MATRIX:
        yield name, replace(base, use_smtcl=sm, use_transformer_blocks=tr, use_first_stage_fusion=fu)


def mask_configs(base: TrainConfig):
    for name in MASK_MATRIX:
        yield name, replace(base, mask=name)


# ------------------------------------------------------------------- logging

def log_digest(log: list) -> str:
    blob = json.dumps(log, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_jsonl(log: list, path) -> None:
    with open(path, "w") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def save_fold_checkpoint(path, cfg: TrainConfig, result: FoldResult) -> None:
    model, centers = restore_model(cfg, result)
    save_checkpoint(
        path,
        model,
        centers,
        extra={
            "seed": cfg.seed,
            "train_config": cfg.to_json(),
            "normalization_stats": result.stats.to_json(),
            "log_digest": log_digest(result.log),
            "fold_index": result.fold_index,
            "best_epoch": result.best_epoch,
        },
    )
