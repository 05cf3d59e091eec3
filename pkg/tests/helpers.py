"""Shared test utilities: finite-difference oracles and dataset fixtures."""

import numpy as np

from mvbody.autodiff import Tensor


def render_dataset_to_traindata(ds, image_size: int = 16):
    """Render a SynthDataset's meshes in memory into a train.TrainData."""
    from mvbody.meshproj import ViewConfig, normalize_mesh, render_views
    from mvbody.records import RecordSchema
    from mvbody.train import TrainData

    cfg = ViewConfig(image_size=image_size, render_mode="depth", channels=1)
    views, pids, sids = [], [], []
    for scan in ds.scans:
        vs = render_views(normalize_mesh(scan.mesh), cfg)
        views.append(vs.images[:, :, :, 0])
        pids.append(scan.participant_id)
        sids.append(scan.scan_id)
    return TrainData(
        views=np.stack(views).astype(np.float32),
        scan_pids=pids,
        scan_ids=sids,
        records={r.participant_id: r for r in ds.records},
        schema=RecordSchema(),
    )


def toy_records(ages, labels):
    """Records varying age (and a second field to keep stats fittable)."""
    from mvbody.records import MedicalRecord

    recs = []
    for i, (age, label) in enumerate(zip(ages, labels)):
        recs.append(
            MedicalRecord(
                participant_id=f"t{i:03}",
                race="white",
                age=float(age),
                height=150.0 + (i % 7) * 5.0,
                pre_pregnancy_weight=55.0 + (i % 5) * 8.0,
                gravidity=1.0 + (i % 3),
                parity=float(i % 2),
                prior_cs=0,
                hist_gest_htn=0,
                hist_gdm=0,
                hist_preeclampsia=0,
                chronic_asthma=0,
                chronic_htn=0,
                chronic_dm=0,
                current_weight=68.0 + (i % 5) * 8.0,
                gestational_age_at_scan=31.0 + (i % 8),
                label=int(label),
            )
        )
    return recs


def numerical_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grad(build, x0: np.ndarray, eps: float = 1e-6, tol: float = 1e-6) -> float:
    """Compare autodiff gradient of scalar-valued `build(Tensor)` against FD.

    `build` maps a leaf Tensor to a scalar Tensor. Returns the relative error.
    """
    leaf = Tensor(x0.astype(np.float64), requires_grad=True)
    out = build(leaf)
    assert out.data.size == 1, "check_grad expects a scalar objective"
    out.backward()
    fd = numerical_grad(lambda x: float(build(Tensor(x)).data), x0.astype(np.float64), eps)
    err = rel_err(leaf.grad, fd)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def model_grad_check(model, batch=4, coords_per_group=3, seed=0, eps=1e-5, lambda_smtcl=0.2):
    """Central finite differences of total_loss vs analytic gradients for every
    parameter group of a model (plus the class centers).

    The check runs at a generic parameter point: zero-initialized residual
    output layers are randomized first, both because gradients at the exact
    zero point are degenerate (q/k/v gradients vanish identically there, so
    bugs would be invisible) and because near-zero gradients make central
    differences cancel below double-precision resolution.

    Samples `coords_per_group` coordinates per parameter tensor. The model must
    be float64. Returns the worst relative error over all sampled coordinates.
    """
    from mvbody.loss import LossConfig, init_centers, total_loss

    assert model.dtype == np.float64, "finite differences need a float64 model"
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if np.all(p.data == 0) and not name.endswith(("bias", ".b")):
            p.data = rng.standard_normal(p.data.shape) * 0.05
    cfg = model.cfg
    views = rng.random((batch, cfg.n_views, cfg.image_size, cfg.image_size, cfg.channels))
    med = rng.uniform(-1, 1, (batch, cfg.d))
    labels = rng.integers(0, 2, batch)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    centers = init_centers(cfg.fused_width, rng, dtype=np.float64)
    lcfg = LossConfig(lambda_smtcl=lambda_smtcl, beta=1.1)
    groups = dict(model.params)
    groups["centers"] = centers

    def loss_value() -> float:
        out = model.forward(views, med)  # deterministic path (no dropout)
        return float(total_loss(out.logits, labels, out.features, centers, lcfg)[0].data)

    out = model.forward(views, med)
    total, _ = total_loss(out.logits, labels, out.features, centers, lcfg)
    model.zero_grad()
    centers.grad = None
    total.backward()

    worst = 0.0
    for name, p in groups.items():
        flat = p.data.ravel()
        gflat = np.zeros_like(flat) if p.grad is None else p.grad.ravel()

        # (a) directional derivative along a random unit direction: checks the
        # whole group jointly at a magnitude FD can resolve
        u = rng.standard_normal(flat.size)
        u /= np.linalg.norm(u)
        saved = flat.copy()
        flat += eps * u
        up = loss_value()
        flat[:] = saved - eps * u
        lo = loss_value()
        flat[:] = saved
        fd_dir = (up - lo) / (2 * eps)
        an_dir = float(gflat @ u)
        worst = max(worst, abs(fd_dir - an_dir) / max(abs(fd_dir), abs(an_dir), 1e-6))

        # (b) per-coordinate checks where the gradient is largest (healthy scale)
        for i in np.argsort(-np.abs(gflat))[:coords_per_group]:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_value()
            flat[i] = orig - eps
            lo = loss_value()
            flat[i] = orig
            fd = (up - lo) / (2 * eps)
            an = gflat[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst
