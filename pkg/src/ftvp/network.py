"""Encoder / multi-scale FTVP / decoder assembly, losses, and checkpoints.

Scale ``s`` of the encoder has spatial side ``input_size / 2**(s+1)``. The
decoder starts at the deepest scale and upsamples to scale 1, whose side is
``input_size / 4``; at every FTVP scale it concatenates the projected features
with the upsampled stream before the next convolution block.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import NetConfig, net_config_from_dict
from .projection import CvpParams, CvtParams, Mlp, ftvp_block, init_cvp, init_cvt
from .tensor import Tensor, no_grad, ops
from .tensor.serialize import FormatError, read_tensor, write_tensor

CKPT_MAGIC = b"FTVPCKPT"
CKPT_VERSION = 1


@dataclass
class ModelParams:
    cfg: NetConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def cvp(self, s: int) -> CvpParams:
        def mlp(tag):
            key = f"ftvp{s}.cvp.{tag}"
            if f"{key}.w1" not in self.tensors:
                return None
            return Mlp(*(self.tensors[f"{key}.{p}"] for p in ("w1", "b1", "w2", "b2")))
        fwd = mlp("fwd")
        bwd = mlp("bwd")
        if bwd is None and self.cfg.ftvp.cycle and self.cfg.ftvp.tie_weights:
            bwd = fwd
        return CvpParams(fwd, bwd, self.cfg.ftvp.mlp_mode)

    def cvt(self, s: int) -> Optional[CvtParams]:
        key = f"ftvp{s}.cvt"
        if f"{key}.proj_k" not in self.tensors:
            return None
        return CvtParams(*(self.tensors[f"{key}.{p}"] for p in ("proj_k", "proj_q", "proj_v", "fuse")))


# ---------------------------------------------------------------------------
# construction

def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}

    def conv(name, cout, cin, k):
        w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
        p[name] = Tensor(w.astype(dtype), requires_grad=True, name=name)

    def bn(name, c):
        p[f"{name}.g"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True, name=f"{name}.g")
        p[f"{name}.b"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True, name=f"{name}.b")

    ch = cfg.encoder_channels
    conv("enc.stem.conv", ch[0], 3, 3)
    bn("enc.stem.bn", ch[0])
    cin = ch[0]
    for s, cout in enumerate(ch):
        conv(f"enc{s}.conv1", cout, cin, 3)
        bn(f"enc{s}.bn1", cout)
        conv(f"enc{s}.conv2", cout, cout, 3)
        bn(f"enc{s}.bn2", cout)
        if cin != cout:
            conv(f"enc{s}.short", cout, cin, 1)
        cin = cout

    if cfg.use_ftvp:
        opt = cfg.ftvp
        for s in cfg.ftvp_scales:
            side = cfg.scale_size(s)
            cvp = init_cvp(rng, ch[s], side, side, mode=opt.mlp_mode, hidden=cfg.mlp_hidden,
                           cycle=opt.cycle, tie_weights=opt.tie_weights, dtype=dtype)
            for name, t in cvp.named(f"ftvp{s}.cvp").items():
                t.name = name
                p[name] = t
            if opt.correlation:
                for name, t in init_cvt(rng, ch[s], dtype=dtype).named(f"ftvp{s}.cvt").items():
                    t.name = name
                    p[name] = t

    n = cfg.num_scales
    prev = ch[n - 1]
    for s in range(n - 1, 0, -1):
        width = cfg.decoder_width(s)
        cin = prev + (ch[s] if s in cfg.ftvp_scales and s != n - 1 else 0)
        conv(f"dec{s}.conv", width, cin, 3)
        bn(f"dec{s}.bn", width)
        prev = width
    for s in cfg.supervised_scales():
        conv(f"head{s}.w", cfg.num_classes, cfg.decoder_width(s), 1)
        p[f"head{s}.b"] = Tensor(np.zeros((1, cfg.num_classes, 1, 1), dtype=dtype), requires_grad=True,
                                 name=f"head{s}.b")
    return ModelParams(cfg, p)


# ---------------------------------------------------------------------------
# forward

def _conv_bn(x: Tensor, p: ModelParams, name: str, bn_name: str, relu: bool = True) -> Tensor:
    y = ops.batchnorm(ops.conv2d(x, p[name], pad=1), p[f"{bn_name}.g"], p[f"{bn_name}.b"])
    return ops.relu(y) if relu else y


def _residual_block(x: Tensor, p: ModelParams, s: int) -> Tensor:
    a = _conv_bn(x, p, f"enc{s}.conv1", f"enc{s}.bn1")
    b = _conv_bn(a, p, f"enc{s}.conv2", f"enc{s}.bn2", relu=False)
    short = ops.conv2d(x, p[f"enc{s}.short"]) if f"enc{s}.short" in p else x
    return ops.relu(ops.add(b, short))


def prepare_images(images: np.ndarray, dtype=np.float32) -> Tensor:
    """[N,3,S,S] (or [3,S,S]) values in [0,1] -> centred network input."""
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor((arr - dtype(0.5)) * dtype(4.0))


def encode(image: Tensor, params: ModelParams) -> list[Tensor]:
    """Residual encoder; returns one feature map per scale, spatial side halving each time."""
    cfg = params.cfg
    if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"encode: expected images [N, 3, {cfg.input_size}, {cfg.input_size}], got {image.shape}")
    h = _conv_bn(image, params, "enc.stem.conv", "enc.stem.bn")
    feats = []
    for s in range(cfg.num_scales):
        h = _residual_block(ops.maxpool2x2(h), params, s)
        feats.append(h)
    return feats


@dataclass
class ForwardResult:
    logits: list[Tensor]
    scales: list[int]
    cycle_losses: list[Tensor]
    mask: np.ndarray


def project_scales(feats: Sequence[Tensor], params: ModelParams) -> tuple[dict[int, Tensor], list[Tensor]]:
    cfg = params.cfg
    projected, cycles = {}, []
    for s in cfg.ftvp_scales:
        if cfg.use_ftvp:
            out, cyc = ftvp_block(feats[s], params.cvp(s), params.cvt(s), cfg.ftvp)
        else:
            out, cyc = feats[s], Tensor(np.zeros((), dtype=feats[s].dtype))
        projected[s] = out
        cycles.append(cyc)
    return projected, cycles


def forward(images, params: ModelParams) -> ForwardResult:
    cfg = params.cfg
    x = images if isinstance(images, Tensor) else prepare_images(images, dtype=next(iter(params.tensors.values())).dtype.type)
    feats = encode(x, params)
    projected, cycles = project_scales(feats, params)
    n = cfg.num_scales
    heads = set(cfg.supervised_scales())

    d = projected.get(n - 1, feats[n - 1])
    logits, scales = [], []
    for s in range(n - 1, 0, -1):
        if s != n - 1:
            d = ops.upsample2x(d)
            if s in projected:
                d = ops.concat_channels(projected[s], d)
        d = _conv_bn(d, params, f"dec{s}.conv", f"dec{s}.bn")
        if s in heads:
            logits.append(ops.add(ops.conv2d(d, params[f"head{s}.w"]), params[f"head{s}.b"]))
            scales.append(s)
    mask = logits[-1].data.argmax(axis=1)
    return ForwardResult(logits, scales, cycles, mask)


def predict(images: np.ndarray, params: ModelParams, batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Class-probability maps [N,K,s,s] and argmax masks [N,s,s] for the finest head."""
    probs, masks = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            res = forward(images[i:i + batch_size], params)
            logit = res.logits[-1].data.astype(np.float64)
            prob = np.exp(ops.log_softmax_np(logit, axis=1))
            probs.append(prob)
            masks.append(res.mask)
    return np.concatenate(probs), np.concatenate(masks)


# ---------------------------------------------------------------------------
# losses

def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour class-id downsampling of [..., H, W] by an integer factor (cell centres)."""
    if factor == 1:
        return mask
    off = factor // 2
    return mask[..., off::factor, off::factor]


def targets_for(mask: np.ndarray, cfg: NetConfig, scales: Sequence[int]) -> list[np.ndarray]:
    return [downsample_mask(mask, 2 ** (s - 1)) for s in scales]


def class_weights(freqs) -> np.ndarray:
    """Square root of the inverse class frequency, rescaled to mean one."""
    f = np.asarray(freqs, dtype=np.float64)
    if np.any(f <= 0):
        warnings.warn("class_weights: zero class frequency clamped to 1e-6", RuntimeWarning, stacklevel=2)
        f = np.maximum(f, 1e-6)
    w = np.sqrt(1.0 / f)
    return w / w.mean()


@dataclass
class LossTerms:
    total: Tensor
    seg: list[float]
    cycle: float


def total_loss(logits_per_scale: Sequence[Tensor], targets_per_scale: Sequence[np.ndarray],
               cycle_losses: Sequence[Tensor], weights, lam: float) -> Tensor:
    """Unweighted sum of per-scale weighted cross-entropies plus ``lam`` times the summed cycle losses."""
    return loss_terms(logits_per_scale, targets_per_scale, cycle_losses, weights, lam).total


def loss_terms(logits_per_scale, targets_per_scale, cycle_losses, weights, lam) -> LossTerms:
    if len(logits_per_scale) != len(targets_per_scale):
        raise ValueError(f"total_loss: {len(logits_per_scale)} logit maps but {len(targets_per_scale)} targets")
    seg = [ops.weighted_cross_entropy(lg, tg, weights) for lg, tg in zip(logits_per_scale, targets_per_scale)]
    terms = list(seg)
    cyc_val = 0.0
    if cycle_losses:
        cyc = ops.add_n([ops.reshape(c, ()) for c in cycle_losses])
        cyc_val = float(cyc.data)
        if lam:
            terms.append(ops.scale(cyc, lam))
    total = ops.add_n(terms)
    return LossTerms(total, [float(s.data) for s in seg], cyc_val)


def model_loss(res: ForwardResult, mask: np.ndarray, params: ModelParams, weights) -> LossTerms:
    """Training objective for a forward result; with deep supervision off only the output head counts."""
    cfg = params.cfg
    idx = range(len(res.logits)) if cfg.deep_supervision else [len(res.logits) - 1]
    logits = [res.logits[i] for i in idx]
    targets = targets_for(mask, cfg, [res.scales[i] for i in idx])
    cycles = res.cycle_losses if (cfg.use_ftvp and cfg.ftvp.cycle) else []
    return loss_terms(logits, targets, cycles, weights, cfg.lambda_cycle)


# ---------------------------------------------------------------------------
# checkpoints

def config_digest(cfg: NetConfig) -> bytes:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).digest()


def save_checkpoint(params: ModelParams, path: str | Path, extra: Optional[dict] = None) -> None:
    buf = io.BytesIO()
    meta = json.dumps({"net": params.cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(config_digest(params.cfg))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    names = sorted(params.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, params.tensors[name].data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    if fh.read(8) != CKPT_MAGIC:
        raise FormatError(f"{path}: not an FTVP checkpoint")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = fh.read(32)
    (mlen,) = struct.unpack("<I", fh.read(4))
    meta = json.loads(fh.read(mlen))
    cfg = net_config_from_dict(meta["net"])
    if config_digest(cfg) != digest:
        raise FormatError(f"{path}: config digest mismatch")
    (count,) = struct.unpack("<I", fh.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode()
        tensors[name] = Tensor(read_tensor(fh), requires_grad=True, name=name)
    expected = init_params(cfg, 0)
    if set(expected.tensors) != set(tensors):
        raise FormatError(f"{path}: parameter names do not match the stored config")
    for name, t in expected.tensors.items():
        if t.shape != tensors[name].shape:
            raise FormatError(f"{path}: {name} has shape {tensors[name].shape}, expected {t.shape}")
    ordered = {name: tensors[name] for name in expected.tensors}
    return ModelParams(cfg, ordered), meta.get("extra", {})
