"""The two-branch risk model: medical MLP+Transformer branch, shared-weight
CNN view encoder with a learnable global token, multiplicative first-stage
fusion gated by the intermediate medical features, max+global aggregation,
and a single-token fusion Transformer head producing two logits.

All math runs on the autodiff Tensor type so one implementation serves
training, finite-difference verification, and integrated-gradients
attribution (which needs input and intermediate-token gradients).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, WeightImportError

CHECKPOINT_MAGIC = b"MVBD\x01"
SCHEMA_VERSION = 1

VGG11_CONVS = [(64, None), (128, 64), (256, 128), (256, 256), (512, 256), (512, 512), (512, 512), (512, 512)]
VGG11_POOL_AFTER = {0, 1, 3, 5, 7}


@dataclass(frozen=True)
class ModelConfig:
    d: int  # medical input width (schema-derived)
    d_prime: int = 256  # medical intermediate width; must equal c_prime
    d_double_prime: int = 64  # medical feature width
    c_prime: int = 256  # token channel width
    n_heads: int = 4
    backbone: str = "small-conv"  # or "vgg11-import"
    image_size: int = 32  # model input H = W
    channels: int = 3
    n_views: int = 12
    dropout: float = 0.1
    conv_widths: tuple = (32, 64, 128, 256)
    mlp_ratio: int = 4  # transformer MLP expansion
    use_transformer_blocks: bool = True  # ablation: False replaces blocks by identity
    use_first_stage_fusion: bool = True  # ablation: False forces gate == 1
    medical_per_feature_tokens: bool = False  # off-by-default branch variant
    vgg_weights: str = ""

    @property
    def fused_width(self) -> int:
        return self.c_prime + self.d_double_prime

    def validate(self) -> "ModelConfig":
        if self.d < 1 or self.d_prime < 1 or self.d_double_prime < 1 or self.c_prime < 1:
            raise ConfigError("all widths must be >= 1")
        if self.d_prime != self.c_prime:
            raise ConfigError(
                f"d_prime ({self.d_prime}) must equal c_prime ({self.c_prime}): "
                "the first-stage fusion is an element-wise product"
            )
        for w, name in ((self.d_prime, "d_prime"), (self.fused_width, "fused width")):
            if w % self.n_heads:
                raise ConfigError(f"{name} {w} not divisible by n_heads {self.n_heads}")
        if self.backbone not in ("small-conv", "vgg11-import"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "vgg11-import" and self.image_size < 32:
            raise ConfigError("vgg11-import needs image_size >= 32 (five 2x pools)")
        if self.image_size % 16:
            raise ConfigError(f"image_size must be divisible by 16, got {self.image_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if len(self.conv_widths) != 4:
            raise ConfigError("small-conv backbone has exactly 4 stages")
        return self


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, 2)
    features: Tensor  # (B, c_prime + d_double_prime), post final layer norm
    risk: np.ndarray  # (B,) softmax probability of the positive class
    intermediates: dict | None = None  # explain mode only


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    s = x - x.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


class MvBodyModel:
    """Parameter container plus the forward graph builder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg.validate()
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()

    # ------------------------------------------------------------ parameters

    def _param(self, name: str, shape, init: str = "proj") -> Tensor:
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "conv":
            # He scaled by an extra 1.6: squareplus at this operating scale
            # passes ~60% of the signal and each stage also average-pools,
            # so plain He starves the deeper stages (measured empirically)
            fan_in = int(np.prod(shape[1:]))
            data = (self._rng.standard_normal(shape) * 1.6 * np.sqrt(2.0 / fan_in)).astype(self.dtype)
        elif init == "fan":
            data = (self._rng.standard_normal(shape) / np.sqrt(shape[0])).astype(self.dtype)
        else:  # transformer projection / token init
            data = (self._rng.standard_normal(shape) * 0.02).astype(self.dtype)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def _linear_params(self, prefix: str, n_in: int, n_out: int, zero: bool = False):
        self._param(f"{prefix}.w", (n_in, n_out), "zeros" if zero else "proj")
        self._param(f"{prefix}.b", (n_out,), "zeros")

    def _block_params(self, prefix: str, width: int):
        self._param(f"{prefix}.ln1.gain", (width,), "ones")
        self._param(f"{prefix}.ln1.bias", (width,), "zeros")
        for name in ("q", "k", "v"):
            self._linear_params(f"{prefix}.{name}", width, width)
        # residual-branch output layers start at zero: block is the identity
        self._linear_params(f"{prefix}.out", width, width, zero=True)
        self._param(f"{prefix}.ln2.gain", (width,), "ones")
        self._param(f"{prefix}.ln2.bias", (width,), "zeros")
        self._linear_params(f"{prefix}.mlp1", width, self.cfg.mlp_ratio * width)
        self._linear_params(f"{prefix}.mlp2", self.cfg.mlp_ratio * width, width, zero=True)

    def _build(self):
        cfg = self.cfg
        if cfg.medical_per_feature_tokens:
            self._param("med_emb.w", (cfg.d, cfg.d_prime))
            self._param("med_emb.b", (cfg.d, cfg.d_prime), "zeros")
        else:
            self._linear_params("med_in1", cfg.d, cfg.d_prime)
            self._linear_params("med_in2", cfg.d_prime, cfg.d_prime)
        self._block_params("med_block", cfg.d_prime)
        self._linear_params("med_out1", cfg.d_prime, cfg.d_double_prime)
        self._linear_params("med_out2", cfg.d_double_prime, cfg.d_double_prime)

        if cfg.backbone == "small-conv":
            c_in = cfg.channels
            for i, width in enumerate(cfg.conv_widths, start=1):
                self._param(f"enc.conv{i}.w", (width, c_in, 3, 3), "conv")
                self._param(f"enc.conv{i}.b", (width,), "zeros")
                c_in = width
            self._param("enc.head.w", (cfg.conv_widths[-1], cfg.c_prime), "fan")
            self._param("enc.head.b", (cfg.c_prime,), "zeros")
        else:
            self._build_vgg11()

        self._param("x_global", (1, cfg.c_prime))
        self._param("e_pos", (1 + cfg.n_views, cfg.c_prime), "zeros")
        self._block_params("shape_block", cfg.c_prime)
        self._param("shape_norm.gain", (cfg.c_prime,), "ones")
        self._param("shape_norm.bias", (cfg.c_prime,), "zeros")

        w = cfg.fused_width
        self._block_params("fus_block", w)
        self._linear_params("fus_mlp1", w, w)
        self._linear_params("fus_mlp2", w, w)
        self._param("final_norm.gain", (w,), "ones")
        self._param("final_norm.bias", (w,), "zeros")
        self._linear_params("final", w, 2)

    def _build_vgg11(self):
        cfg = self.cfg
        try:
            blobs = np.load(cfg.vgg_weights) if cfg.vgg_weights else None
        except Exception as e:
            raise WeightImportError(f"cannot read vgg weight file {cfg.vgg_weights!r}: {e}") from None
        c_in = cfg.channels
        for i, (width, _) in enumerate(VGG11_CONVS):
            shape = (width, c_in, 3, 3)
            if blobs is not None:
                wk, bk = f"conv{i}.weight", f"conv{i}.bias"
                if wk not in blobs or bk not in blobs:
                    raise WeightImportError(f"vgg weight file missing {wk}/{bk}")
                wv, bv = blobs[wk], blobs[bk]
                if wv.shape != shape or bv.shape != (width,):
                    raise WeightImportError(f"{wk}: expected {shape}, got {wv.shape}")
                self.params[f"enc.conv{i + 1}.w"] = Tensor(wv.astype(self.dtype), requires_grad=True)
                self.params[f"enc.conv{i + 1}.b"] = Tensor(bv.astype(self.dtype), requires_grad=True)
            else:
                self._param(f"enc.conv{i + 1}.w", shape, "conv")
                self._param(f"enc.conv{i + 1}.b", (width,), "zeros")
            c_in = width
        self._param("enc.head.w", (512, cfg.c_prime), "fan")
        self._param("enc.head.b", (cfg.c_prime,), "zeros")

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays: dict):
        for k, p in self.params.items():
            if k not in arrays:
                raise WeightImportError(f"checkpoint missing parameter {k!r}")
            if tuple(arrays[k].shape) != tuple(p.data.shape):
                raise WeightImportError(f"{k}: shape {arrays[k].shape} != {p.data.shape}")
            p.data = arrays[k].astype(self.dtype)

    # --------------------------------------------------------------- layers

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.params[f"{prefix}.w"]), self.params[f"{prefix}.b"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def attention(self, tokens: Tensor, prefix: str, n_heads: int) -> Tensor:
        """Multi-head scaled dot-product attention over (B, n, w) tokens."""
        B, n, w = tokens.shape
        if w % n_heads:
            raise ShapeError(f"width {w} not divisible by {n_heads} heads")
        dh = w // n_heads
        q = self._linear(f"{prefix}.q", tokens)
        k = self._linear(f"{prefix}.k", tokens)
        v = self._linear(f"{prefix}.v", tokens)
        # (B, n, w) -> (B, heads, n, dh)
        split = lambda t: ad.transpose(ad.reshape(t, (B, n, n_heads, dh)), (0, 2, 1, 3))
        q, k, v = split(q), split(k), split(v)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(weights, v)  # (B, heads, n, dh)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, n, w))
        return self._linear(f"{prefix}.out", merged)

    def transformer_block(self, tokens: Tensor, prefix: str, train: bool = False, rng=None) -> Tensor:
        """Pre-norm block: x + Attn(LN(x)), then y + MLP(LN(y))."""
        if not self.cfg.use_transformer_blocks:
            return tokens  # exact ablation substitution: identity map
        att = self.attention(self._ln(f"{prefix}.ln1", tokens), prefix, self.cfg.n_heads)
        if train and self.cfg.dropout > 0:
            att = ad.dropout(att, self.cfg.dropout, rng)
        y = ad.add(tokens, att)
        h = self._linear(f"{prefix}.mlp1", self._ln(f"{prefix}.ln2", y))
        h = self._linear(f"{prefix}.mlp2", ad.squareplus(h))
        if train and self.cfg.dropout > 0:
            h = ad.dropout(h, self.cfg.dropout, rng)
        return ad.add(y, h)

    # -------------------------------------------------------------- branches

    def medical_branch(self, med: Tensor, train: bool = False, rng=None):
        """(B, d) -> (X'_medical (B, d'), F_M (B, d''))."""
        B, d = med.shape
        if d != self.cfg.d:
            raise ShapeError(f"medical width {d} != configured d {self.cfg.d}")
        if self.cfg.medical_per_feature_tokens:
            # one token per input feature: x_i scaled feature embeddings
            toks = ad.mul(ad.reshape(med, (B, d, 1)), self.params["med_emb.w"])
            toks = ad.add(toks, self.params["med_emb.b"])  # (B, d, d')
            x_med = ad.mean_(toks, axis=1)
            blocked = self.transformer_block(toks, "med_block", train, rng)
            pooled = ad.mean_(blocked, axis=1)
        else:
            h = ad.tanh(self._linear("med_in1", med))
            x_med = self._linear("med_in2", h)  # X'_medical, also feeds the gate
            blocked = self.transformer_block(
                ad.reshape(x_med, (B, 1, self.cfg.d_prime)), "med_block", train, rng
            )
            pooled = ad.getitem(blocked, (slice(None), 0, slice(None)))
        f_m = self._linear("med_out2", ad.squareplus(self._linear("med_out1", pooled)))
        return x_med, f_m

    def encode_views(self, views: Tensor) -> Tensor:
        """(B, n_views, H, W, C) -> (B, n_views, c_prime); encoder shared across views."""
        cfg = self.cfg
        B, n, H, W, C = views.shape
        if (H, W, C) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ShapeError(
                f"views {H}x{W}x{C} != configured {cfg.image_size}x{cfg.image_size}x{cfg.channels}"
            )
        # fixed 2x input scaling: renders are mostly background with
        # foreground in [0.2, 1], so raw pixel variance is tiny
        x = ad.mul(ad.reshape(ad.transpose(views, (0, 1, 4, 2, 3)), (B * n, C, H, W)), 2.0)
        if cfg.backbone == "small-conv":
            # squareplus rather than ReLU: smooth activations keep the
            # finite-difference gradient checks exact (bias perturbations
            # shift thousands of pre-activations at once, so ReLU kinks would
            # always be straddled), and it costs plain arithmetic per element;
            # the knee b=0.25 matches the conv activation scale
            for i in range(1, 5):
                x = ad.conv2d(x, self.params[f"enc.conv{i}.w"], self.params[f"enc.conv{i}.b"])
                x = ad.squareplus(x, 0.25)
                x = ad.avg_pool2(x)
            feat_w = cfg.conv_widths[-1]
        else:
            for i, _ in enumerate(VGG11_CONVS):
                x = ad.conv2d(x, self.params[f"enc.conv{i + 1}.w"], self.params[f"enc.conv{i + 1}.b"])
                x = ad.relu(x)
                if i in VGG11_POOL_AFTER:
                    x = ad.max_pool2(x)
            feat_w = 512
        pooled = ad.mean_(ad.reshape(x, (B * n, feat_w, -1)), axis=2)  # global average pool
        tokens = self._linear("enc.head", pooled)
        return ad.reshape(tokens, (B, n, cfg.c_prime))

    def assemble_tokens(self, tokens: Tensor) -> Tensor:
        """Prepend the global token, add positional embeddings: (B, 1+n, C')."""
        B = tokens.shape[0]
        g = ad.broadcast_to(ad.reshape(self.params["x_global"], (1, 1, self.cfg.c_prime)),
                            (B, 1, self.cfg.c_prime))
        seq = ad.concat([g, tokens], axis=1)
        return ad.add(seq, self.params["e_pos"])

    def fuse_first_stage(self, shape_tokens: Tensor, x_med: Tensor) -> Tensor:
        """Gate every shape token element-wise by sigmoid(X'_medical)."""
        if not self.cfg.use_first_stage_fusion:
            return shape_tokens  # exact ablation substitution: gate == 1
        B = shape_tokens.shape[0]
        gate = ad.sigmoid(ad.reshape(x_med, (B, 1, self.cfg.d_prime)))
        return ad.mul(shape_tokens, gate)

    @staticmethod
    def aggregate_shape(hat_tokens: Tensor) -> Tensor:
        """Element-wise max over the projection tokens plus the global token."""
        proj = ad.getitem(hat_tokens, (slice(None), slice(1, None), slice(None)))
        g = ad.getitem(hat_tokens, (slice(None), 0, slice(None)))
        return ad.add(ad.max_(proj, axis=1), g)

    # -------------------------------------------------------------- pipeline

    def shape_head(self, views: Tensor, med: Tensor, train: bool = False, rng=None):
        """Everything up to the fused shape tokens X''_shape (the token layer
        used for token-level attribution)."""
        x_med, f_m = self.medical_branch(med, train, rng)
        tokens = self.encode_views(views)
        assembled = self.assemble_tokens(tokens)
        fused_tokens = self.fuse_first_stage(assembled, x_med)
        return fused_tokens, x_med, f_m

    def tail_from_tokens(self, fused_tokens: Tensor, f_m: Tensor, train: bool = False, rng=None):
        """From X''_shape and F_M to (logits, features, extras)."""
        blocked = self.transformer_block(fused_tokens, "shape_block", train, rng)
        hat = self._ln("shape_norm", blocked)
        f_s = self.aggregate_shape(hat)
        fused = ad.concat([f_s, f_m], axis=-1)
        B = fused.shape[0]
        one_token = ad.reshape(fused, (B, 1, self.cfg.fused_width))
        fused = ad.getitem(self.transformer_block(one_token, "fus_block", train, rng),
                           (slice(None), 0, slice(None)))
        fused = self._linear("fus_mlp2", ad.squareplus(self._linear("fus_mlp1", fused)))
        features = self._ln("final_norm", fused)
        logits = self._linear("final", features)
        return logits, features, {"hat_tokens": hat, "f_s": f_s}

    def forward(self, views, med, mode: str = "infer", rng=None) -> ForwardOutput:
        """Full pipeline. mode: train (dropout on), infer, or explain (keeps
        intermediates and input leaves for attribution)."""
        if mode not in ("train", "infer", "explain"):
            raise ConfigError(f"unknown forward mode {mode!r}")
        train = mode == "train"
        if train and self.cfg.dropout > 0 and rng is None:
            raise ConfigError("train mode needs an rng for dropout")
        views_t = views if isinstance(views, Tensor) else Tensor(np.asarray(views, dtype=self.dtype))
        med_t = med if isinstance(med, Tensor) else Tensor(np.asarray(med, dtype=self.dtype))
        if mode == "explain":
            views_t.requires_grad = True
            med_t.requires_grad = True
        fused_tokens, x_med, f_m = self.shape_head(views_t, med_t, train, rng)
        logits, features, extras = self.tail_from_tokens(fused_tokens, f_m, train, rng)
        risk = _softmax_rows(logits.data.astype(np.float64))[:, 1]
        inter = None
        if mode == "explain":
            inter = {
                "views": views_t,
                "med": med_t,
                "x_med_gate": x_med,
                "fused_tokens": fused_tokens,
                "f_m": f_m,
                "f_s": extras["f_s"],
                "hat_global": ad.getitem(extras["hat_tokens"], (slice(None), 0, slice(None))),
            }
        return ForwardOutput(logits=logits, features=features, risk=risk, intermediates=inter)


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: MvBodyModel, centers: np.ndarray, extra: dict | None = None) -> None:
    """JSON header + named little-endian float32 blobs; byte-deterministic."""
    arrays = dict(model.state_arrays())
    arrays["centers"] = np.asarray(centers)
    names = sorted(arrays)
    header = {
        "schema_version": SCHEMA_VERSION,
        "model_config": asdict(model.cfg),
        "param_count": model.param_count(),
        "blobs": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    header.update(extra or {})
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns (model, centers, header)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise WeightImportError(f"{path}: not an mvbody checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for blob in header["blobs"]:
            shape = tuple(blob["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise WeightImportError(f"{path}: truncated blob {blob['name']}")
            arrays[blob["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype)
    cfg_dict = dict(header["model_config"])
    cfg_dict["conv_widths"] = tuple(cfg_dict["conv_widths"])
    cfg = ModelConfig(**cfg_dict)
    model = MvBodyModel(cfg, seed=0, dtype=dtype)
    centers = arrays.pop("centers")
    model.load_state(arrays)
    return model, centers, header


def tiny_config(d: int = 8, image_size: int = 32) -> ModelConfig:
    """The small configuration used by gradient-check and IG verification."""
    return ModelConfig(
        d=d,
        d_prime=8,
        c_prime=8,
        d_double_prime=4,
        n_heads=2,
        image_size=image_size,
        conv_widths=(4, 8, 8, 8),
        dropout=0.1,
    )
