"""Integrated Gradients attribution and the three export surfaces.

IG integrates the gradient of the positive-class logit along the straight
path from an all-zero baseline (black images, zero medical vector) to the
input, then scales by (x - baseline). The trapezoid rule is the default
quadrature (exact for linear models at any step count); left-Riemann is kept
for cross-checking the literal discretization. Completeness
(sum of attributions == F(x) - F(baseline)) is verified per sample against a
relative tolerance and recorded in every report.

Three granularities are exported: per medical feature (bubble CSVs with
equal-width value clusters), per shape token (token 0 is the learnable global
token), and per pixel (8-bit magnitude PNGs with raw signed .f32 sidecars).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import pngio
from .autodiff import Tensor
from .errors import ConfigError, NonFiniteError
from .net import MvBodyModel
from .records import BINARY_FIELDS, NUMERIC_FIELDS, MedicalRecord, RecordSchema


@dataclass(frozen=True)
class AttributionConfig:
    steps: int = 64
    token_steps: int = 2048  # token-layer path needs finer quadrature, see below
    target: str = "cs_logit"
    quadrature: str = "trapezoid"  # or "left-riemann"
    completeness_tol: float = 1e-3  # relative
    chunk: int = 16  # alpha values evaluated per forward batch

    def validate(self) -> "AttributionConfig":
        if self.steps < 2 or self.token_steps < 2:
            raise ConfigError(f"steps must be >= 2, got {self.steps}/{self.token_steps}")
        if self.quadrature not in ("trapezoid", "left-riemann"):
            raise ConfigError(f"unknown quadrature {self.quadrature!r}")
        if self.target != "cs_logit":
            raise ConfigError(f"unsupported attribution target {self.target!r}")
        return self

    def grid(self):
        """(alphas, weights) of the configured quadrature on [0, 1]."""
        if self.quadrature == "trapezoid":
            alphas = np.linspace(0.0, 1.0, self.steps)
            w = np.full(self.steps, 1.0 / (self.steps - 1))
            w[0] *= 0.5
            w[-1] *= 0.5
        else:
            alphas = np.arange(self.steps) / self.steps
            w = np.full(self.steps, 1.0 / self.steps)
        return alphas, w


@dataclass
class AttributionRow:
    """All attributions for one scan."""

    sample_id: str
    medical: np.ndarray  # (d,) signed
    tokens: np.ndarray | None  # (13,) signed, index 0 = global token
    pixels: np.ndarray  # (n_views, S, S) signed
    completeness_residual: float
    token_residual: float
    f_x: float
    f_baseline: float
    accepted: bool


def path_integral(grad_eval, parts: list, cfg: AttributionConfig):
    """Shared IG path machinery over a zero baseline.

    parts: list of input arrays (one sample, no batch axis). grad_eval takes
    batched copies (alpha-scaled along axis 0) and returns (list of gradient
    arrays, (B,) target values). Returns (list of attribution arrays,
    f_baseline, f_x, completeness_residual).
    """
    alphas, weights = cfg.grid()
    acc = [np.zeros(p.shape, dtype=np.float64) for p in parts]
    f_at = {}
    for s in range(0, len(alphas), cfg.chunk):
        a = alphas[s : s + cfg.chunk]
        w = weights[s : s + cfg.chunk]
        batched = [a.reshape((-1,) + (1,) * p.ndim) * p[None] for p in parts]
        grads, f = grad_eval(batched)
        _check_finite(f, *grads)
        for acc_i, g in zip(acc, grads):
            acc_i += np.tensordot(w, g.astype(np.float64), axes=1)
        for ai, fi in zip(a, f):
            f_at[float(ai)] = float(fi)
    for a_need in (0.0, 1.0):
        if a_need not in f_at:
            batched = [np.full((1,) + p.shape, a_need, dtype=np.float64) * p[None] for p in parts]
            f_at[a_need] = float(grad_eval(batched)[1][0])
    attrs = [p.astype(np.float64) * a for p, a in zip(parts, acc)]
    f_base, f_x = f_at[0.0], f_at[1.0]
    total = float(sum(a.sum() for a in attrs))
    residual = abs(total - (f_x - f_base)) / max(abs(f_x - f_base), 1e-12)
    return attrs, f_base, f_x, residual


def _cs_logit_grads(model: MvBodyModel, views_b: np.ndarray, med_b: np.ndarray):
    """Gradients of the positive-class logit w.r.t. both inputs, batched."""
    views_t = Tensor(views_b.astype(model.dtype))
    med_t = Tensor(med_b.astype(model.dtype))
    views_t.requires_grad = med_t.requires_grad = True
    fused_tokens, _, f_m = model.shape_head(views_t, med_t)
    logits, _, _ = model.tail_from_tokens(fused_tokens, f_m)
    seed = np.zeros_like(logits.data)
    seed[:, 1] = 1.0
    logits.backward(seed)
    if views_t.grad is None or med_t.grad is None:
        raise NonFiniteError("gradient did not reach the inputs")
    return views_t.grad, med_t.grad, logits.data[:, 1].astype(np.float64)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("NaN/Inf in attribution gradients")


def integrated_gradients(model: MvBodyModel, views: np.ndarray, med: np.ndarray,
                         cfg: AttributionConfig = AttributionConfig(),
                         sample_id: str = "", with_tokens: bool = True) -> AttributionRow:
    """IG for one scan; views (n_views, S, S, C), med (d,). Baselines are zero.

    with_tokens=False skips the token-layer pass (it needs a much finer grid,
    see token_attributions) when only medical/pixel attributions are wanted."""
    cfg.validate()
    views = np.asarray(views, dtype=np.float64)
    med = np.asarray(med, dtype=np.float64)

    def grad_eval(batched):
        gv, gm, f = _cs_logit_grads(model, batched[0], batched[1])
        return [gv, gm], f

    (ig_views, ig_med), f_base, f_x, residual = path_integral(grad_eval, [views, med], cfg)
    if with_tokens:
        tokens, token_residual = token_attributions(model, views, med, cfg)
    else:
        tokens, token_residual = None, float("nan")
    pixels = ig_views.sum(axis=-1)  # channel-summed per-pixel attribution
    return AttributionRow(
        sample_id=sample_id,
        medical=ig_med,
        tokens=tokens,
        pixels=pixels,
        completeness_residual=residual,
        token_residual=token_residual,
        f_x=f_x,
        f_baseline=f_base,
        accepted=residual <= cfg.completeness_tol,
    )


def token_attributions(model: MvBodyModel, views: np.ndarray, med: np.ndarray,
                       cfg: AttributionConfig = AttributionConfig()):
    """IG treating the 13 post-fusion shape tokens as the input layer.

    The medical feature vector F_M stays fixed at its actual value; the
    baseline is the all-zero token set. Per-token attribution is the signed
    sum over that token's channels. Returns ((13,) attributions, residual).

    Uses cfg.token_steps rather than cfg.steps: the layer norms following the
    token layer are scale-invariant, which concentrates the path integrand's
    curvature near the zero-token baseline, so this integral needs a finer
    grid than the input-layer one for the same completeness tolerance. The
    tail (tokens to logits) skips the conv encoder, so the extra steps are
    cheap.
    """
    cfg.validate()
    cfg = replace(cfg, steps=cfg.token_steps)
    views_t = Tensor(np.asarray(views, dtype=model.dtype)[None])
    med_t = Tensor(np.asarray(med, dtype=model.dtype)[None])
    fused_tokens, _, f_m = model.shape_head(views_t, med_t)
    tokens0 = fused_tokens.data[0].astype(np.float64)  # (13, C')
    f_m0 = f_m.data[0]

    def grad_eval(batched):
        toks = Tensor(batched[0].astype(model.dtype), requires_grad=True)
        fm_b = Tensor(np.repeat(f_m0[None], len(batched[0]), axis=0))
        logits, _, _ = model.tail_from_tokens(toks, fm_b)
        seed = np.zeros_like(logits.data)
        seed[:, 1] = 1.0
        logits.backward(seed)
        return [toks.grad], logits.data[:, 1].astype(np.float64)

    (ig,), _, _, residual = path_integral(grad_eval, [tokens0], cfg)
    return ig.sum(axis=1), residual


# ------------------------------------------------------------------- exports

def _is_binary_feature(name: str) -> bool:
    return name in BINARY_FIELDS or name.startswith("race_")


def _raw_feature_value(record: MedicalRecord, name: str) -> float:
    if name.startswith("race_"):
        return 1.0 if record.race == name[len("race_"):] else 0.0
    return float(getattr(record, name))


def export_bubble_data(rows: list, records: list, out_dir,
                       schema: RecordSchema = RecordSchema(), n_bins: int = 10) -> list:
    """Per-feature CSVs of (raw value, attribution) points plus value clusters.

    records[i] is the MedicalRecord behind rows[i]. Returns feature names
    ranked by mean |attribution| (descending), also written to ranking.csv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = schema.feature_names()
    attr = np.stack([r.medical for r in rows])  # (n, d)
    raw = np.array([[_raw_feature_value(rec, n) for n in names] for rec in records])
    order = np.argsort(-np.abs(attr).mean(axis=0), kind="stable")
    ranking = [names[i] for i in order]

    for j, name in enumerate(names):
        lines = ["kind,x,attribution,count"]
        for v, a in zip(raw[:, j], attr[:, j]):
            lines.append(f"point,{v:.6g},{a:.6g},1")
        vals = raw[:, j]
        if _is_binary_feature(name):
            for v in (0.0, 1.0):
                m = vals == v
                if m.any():
                    lines.append(f"cluster,{v:.6g},{attr[m, j].mean():.6g},{int(m.sum())}")
        else:
            lo, hi = vals.min(), vals.max()
            if hi - lo < 1e-12:
                lines.append(f"cluster,{lo:.6g},{attr[:, j].mean():.6g},{len(vals)}")
            else:
                edges = np.linspace(lo, hi, n_bins + 1)
                which = np.clip(np.digitize(vals, edges[1:-1]), 0, n_bins - 1)
                for b in range(n_bins):
                    m = which == b
                    if m.any():
                        center = 0.5 * (edges[b] + edges[b + 1])
                        lines.append(f"cluster,{center:.6g},{attr[m, j].mean():.6g},{int(m.sum())}")
        (out_dir / f"bubble_{name}.csv").write_text("\n".join(lines) + "\n")

    rank_lines = ["feature,mean_abs_attribution"]
    for i in order:
        rank_lines.append(f"{names[i]},{np.abs(attr[:, i]).mean():.6g}")
    (out_dir / "ranking.csv").write_text("\n".join(rank_lines) + "\n")
    return ranking


def export_token_data(rows: list, out_dir) -> Path:
    """tokens.csv: sample_id plus 13 signed attributions (token 0 = global)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    head = "sample_id," + ",".join(f"token_{i:02}" for i in range(len(rows[0].tokens)))
    lines = [head]
    for r in rows:
        lines.append(r.sample_id + "," + ",".join(f"{v:.6g}" for v in r.tokens))
    path = out_dir / "tokens.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def export_pixel_maps(row: AttributionRow, out_dir) -> Path:
    """Per-view |attribution| maps as 8-bit PNGs (normalized by the sample's
    max) plus raw signed float32 sidecars."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mags = np.abs(row.pixels)
    peak = float(mags.max())
    for k in range(row.pixels.shape[0]):
        if peak > 0:
            img = np.round(mags[k] / peak * 255.0).astype(np.uint8)
        else:
            img = np.zeros(mags[k].shape, dtype=np.uint8)
        pngio.write_png(out_dir / f"attr_view_{k:02}.png", img)
        row.pixels[k].astype("<f4").tofile(out_dir / f"attr_view_{k:02}.f32")
    return out_dir


def export_reports(rows: list, records: list, out_dir, cfg: AttributionConfig,
                   checkpoint_hash: str = "", schema: RecordSchema = RecordSchema(),
                   split_used: str = "") -> dict:
    """All three exports plus the tying manifest. Returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranking = export_bubble_data(rows, records, out_dir, schema)
    if all(r.tokens is not None for r in rows):
        export_token_data(rows, out_dir)
    for r in rows:
        export_pixel_maps(r, out_dir / r.sample_id)
    manifest = {
        "checkpoint_sha256": checkpoint_hash,
        "config": {
            "steps": cfg.steps,
            "quadrature": cfg.quadrature,
            "target": cfg.target,
            "completeness_tol": cfg.completeness_tol,
        },
        "split_used": split_used,
        "samples": [
            {
                "sample_id": r.sample_id,
                "completeness_residual": r.completeness_residual,
                "token_residual": r.token_residual,
                "accepted": r.accepted,
                "f_x": r.f_x,
                "f_baseline": r.f_baseline,
            }
            for r in rows
        ],
        "feature_ranking": ranking,
    }
    with open(out_dir / "attribution_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
