"""Multi-receptive-field U-Nets and the two-stage inversion model.

The building block is the MRF module: four parallel convolution branches
with effective receptive fields 1, 3, 5, and 7 (a 1x1 conv; one 3x3; two
cascaded 3x3; three cascaded 3x3 — each conv followed by ReLU), whose
outputs are concatenated and fused by a trailing 3x3 conv + ReLU.  The
cascades replace single 5x5/7x7 kernels at lower parameter cost (18C^2
and 27C^2 weights instead of 25C^2 and 49C^2).

An MRF-UNet stacks five encoder stages of two modules each (max-pooling
between stages), and four decoder stages of up-convolution + skip
concatenation + two modules, with a 1x1 output head.

The full model comes in two kinds:

- ``dmrf``: stage 1 maps the noisy B-scan to a denoised B-scan (ReLU
  head); stage 2 maps the concatenation of noisy and denoised (or the
  denoised alone) to the permittivity map (ELU head).  Trained on the
  combined loss ``alpha * mse(denoised) + beta * mse(perm)``.
- ``smrf``: stage 2 alone, mapping the noisy B-scan directly to the
  permittivity map.

Training, fine-tuning, checkpointing, and inference drivers live here
too; they consume datasets through the manifest API and write per-epoch
loss CSVs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from .autodiff import ParamStore, Tensor4
from .errors import (CorruptFile, DataUnavailable, EmptySpec,
                     IncompatibleCheckpoint, NonFinite, NonFiniteLoss,
                     OutOfRange, ShapeMismatch, UnsupportedKernel)

ENCODER_WIDTHS = (64, 128, 256, 512, 1024)
MRF_BRANCH_KERNELS = ((1,), (3,), (3, 3), (3, 3, 3))
DEFAULT_ALPHA = 10.0
DEFAULT_BETA = 1.0

CHECKPOINT_MAGIC = b"GPRC"
CHECKPOINT_VERSION = 1

_INIT_PURPOSE = 101
_SHUFFLE_PURPOSE = 102


# ---------------------------------------------------------------------------
# Receptive-field and parameter arithmetic
# ---------------------------------------------------------------------------

def receptive_field(kernels, strides) -> int:
    """Effective receptive field of stacked convolutions.

    r_0 = 1 and r_n = r_{n-1} + (k_n - 1) * prod of the strides before
    layer n.
    """
    kernels = list(kernels)
    strides = list(strides)
    if not kernels:
        raise EmptySpec("receptive_field needs at least one layer")
    if len(kernels) != len(strides):
        raise ShapeMismatch(
            f"{len(kernels)} kernels vs {len(strides)} strides")
    if min(kernels) < 1 or min(strides) < 1:
        raise OutOfRange("kernels and strides must be >= 1")
    r = 1
    jump = 1
    for k, s in zip(kernels, strides):
        r += (k - 1) * jump
        jump *= s
    return r


def replacement_param_count(kernel: int, channels: int) -> tuple[int, int]:
    """Weight counts (bias excluded) of a k x k conv vs its 3x3 cascade.

    A 5x5 kernel is replaced by two 3x3 layers (25C^2 -> 18C^2), a 7x7 by
    three (49C^2 -> 27C^2), for C input and C output channels.
    """
    if channels < 1:
        raise OutOfRange("channels must be >= 1")
    if kernel == 5:
        return 25 * channels ** 2, 18 * channels ** 2
    if kernel == 7:
        return 49 * channels ** 2, 27 * channels ** 2
    raise UnsupportedKernel(
        f"only 5x5 and 7x7 kernels have 3x3-cascade replacements, got {kernel}")


# ---------------------------------------------------------------------------
# MRF module
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MRFModuleConfig:
    """One module: in_channels C_in in, stage_width C out on every branch."""

    in_channels: int
    stage_width: int

    def __post_init__(self):
        if self.in_channels < 1 or self.stage_width < 1:
            raise OutOfRange("channel counts must be >= 1")


def _he_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_c * k * k))
    return rng.normal(0.0, std, size=(out_c, in_c, k, k))


def init_mrf_module(store: ParamStore, prefix: str, cfg: MRFModuleConfig,
                    rng: np.random.Generator, use_mrf: bool = True) -> None:
    """Create the module's parameters under ``prefix`` in a fixed order."""
    c_in, c = cfg.in_channels, cfg.stage_width
    if not use_mrf:
        store.add(f"{prefix}.plain.w", _he_conv(rng, c, c_in, 3))
        store.add(f"{prefix}.plain.b", np.zeros((1, c, 1, 1)))
        return
    for bi, kernels in enumerate(MRF_BRANCH_KERNELS):
        layer_in = c_in
        for li, k in enumerate(kernels):
            store.add(f"{prefix}.b{bi}.conv{li}.w", _he_conv(rng, c, layer_in, k))
            store.add(f"{prefix}.b{bi}.conv{li}.b", np.zeros((1, c, 1, 1)))
            layer_in = c
    store.add(f"{prefix}.fuse.w", _he_conv(rng, c, 4 * c, 3))
    store.add(f"{prefix}.fuse.b", np.zeros((1, c, 1, 1)))


def mrf_forward(x: Tensor4, store: ParamStore, prefix: str,
                use_mrf: bool = True) -> Tensor4:
    """Apply one MRF module (or its plain-conv ablation) to ``x``."""
    p = store.params
    if not use_mrf:
        return ad.relu(ad.conv2d(x, p[f"{prefix}.plain.w"],
                                 p[f"{prefix}.plain.b"]))
    branches = []
    for bi, kernels in enumerate(MRF_BRANCH_KERNELS):
        h = x
        for li in range(len(kernels)):
            h = ad.relu(ad.conv2d(h, p[f"{prefix}.b{bi}.conv{li}.w"],
                                  p[f"{prefix}.b{bi}.conv{li}.b"]))
        branches.append(h)
    merged = ad.concat_channels(branches)
    return ad.relu(ad.conv2d(merged, p[f"{prefix}.fuse.w"],
                             p[f"{prefix}.fuse.b"]))


# ---------------------------------------------------------------------------
# MRF-UNet
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UNetConfig:
    """Encoder/decoder shape knobs for one MRF-UNet."""

    in_channels: int = 1
    out_channels: int = 1
    width_factor: float = 1.0
    final_activation: str = "relu"  # "relu" or "elu"
    use_mrf: bool = True
    use_skips: bool = True
    encoder_widths: tuple[int, ...] = ENCODER_WIDTHS

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise OutOfRange("channel counts must be >= 1")
        if self.final_activation not in ("relu", "elu"):
            raise OutOfRange(
                f"final_activation must be 'relu' or 'elu', "
                f"got {self.final_activation!r}")
        if len(self.encoder_widths) != 5:
            raise OutOfRange("exactly 5 encoder stages are supported")
        if self.width_factor <= 0:
            raise OutOfRange("width_factor must be positive")

    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, round(w * self.width_factor))
                     for w in self.encoder_widths)


def init_unet(store: ParamStore, prefix: str, cfg: UNetConfig,
              rng: np.random.Generator) -> None:
    """Create all UNet parameters under ``prefix`` in forward-pass order."""
    w = cfg.widths()
    c_in = cfg.in_channels
    for s in range(5):
        init_mrf_module(store, f"{prefix}.enc{s}.m0",
                        MRFModuleConfig(c_in, w[s]), rng, cfg.use_mrf)
        init_mrf_module(store, f"{prefix}.enc{s}.m1",
                        MRFModuleConfig(w[s], w[s]), rng, cfg.use_mrf)
        c_in = w[s]
    for s in reversed(range(4)):
        store.add(f"{prefix}.dec{s}.up.w", _he_conv(rng, w[s], w[s + 1], 2))
        store.add(f"{prefix}.dec{s}.up.b", np.zeros((1, w[s], 1, 1)))
        m_in = 2 * w[s] if cfg.use_skips else w[s]
        init_mrf_module(store, f"{prefix}.dec{s}.m0",
                        MRFModuleConfig(m_in, w[s]), rng, cfg.use_mrf)
        init_mrf_module(store, f"{prefix}.dec{s}.m1",
                        MRFModuleConfig(w[s], w[s]), rng, cfg.use_mrf)
    store.add(f"{prefix}.head.w", _he_conv(rng, cfg.out_channels, w[0], 1))
    store.add(f"{prefix}.head.b", np.zeros((1, cfg.out_channels, 1, 1)))


def unet_forward(x: Tensor4, store: ParamStore, prefix: str,
                 cfg: UNetConfig) -> Tensor4:
    """Full encoder/decoder pass; spatial dims must be divisible by 16."""
    _, c, h, w = x.data.shape
    if c != cfg.in_channels:
        raise ShapeMismatch(
            f"input has {c} channels, config expects {cfg.in_channels}")
    if h % 16 or w % 16:
        raise ShapeMismatch(
            f"spatial dims must be divisible by 16, got {h}x{w}")
    skips = []
    out = x
    for s in range(5):
        out = mrf_forward(out, store, f"{prefix}.enc{s}.m0", cfg.use_mrf)
        out = mrf_forward(out, store, f"{prefix}.enc{s}.m1", cfg.use_mrf)
        if s < 4:
            skips.append(out)
            out = ad.maxpool2(out)
    p = store.params
    for s in reversed(range(4)):
        out = ad.upconv2(out, p[f"{prefix}.dec{s}.up.w"],
                         p[f"{prefix}.dec{s}.up.b"])
        if cfg.use_skips:
            out = ad.concat_channels([skips[s], out])
        out = mrf_forward(out, store, f"{prefix}.dec{s}.m0", cfg.use_mrf)
        out = mrf_forward(out, store, f"{prefix}.dec{s}.m1", cfg.use_mrf)
    out = ad.conv2d(out, p[f"{prefix}.head.w"], p[f"{prefix}.head.b"])
    return ad.relu(out) if cfg.final_activation == "relu" else ad.elu(out)


# ---------------------------------------------------------------------------
# Two-stage model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DMRFConfig:
    """The complete model + training configuration.

    ``kind`` selects the two-stage model ("dmrf") or the single-stage
    permittivity regressor ("smrf", stage 2 alone on a 1-channel input).

    ``warmup_steps`` linearly ramps the learning rate over the first
    optimizer steps of each phase (0 disables).  Adam's earliest updates
    are sign-steps of the full learning rate; on a freshly initialized
    deep stack a coherent full-size step can push the composed layer
    gains past one and transiently blow activations up by orders of
    magnitude before the gradient signs flip.  Ramping in lets that
    feedback arrive first.
    """

    kind: str = "dmrf"
    stage1: UNetConfig = field(default_factory=lambda: UNetConfig(
        in_channels=1, out_channels=1, final_activation="relu"))
    stage2: UNetConfig = field(default_factory=lambda: UNetConfig(
        in_channels=2, out_channels=1, final_activation="elu"))
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    two_channel_input: bool = True
    end_to_end: bool = True
    auto_balance: bool = False
    epochs: int = 150
    lr: float = 1e-4
    warmup_steps: int = 20
    batch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("dmrf", "smrf"):
            raise OutOfRange(f"kind must be 'dmrf' or 'smrf', got {self.kind!r}")
        if not (self.alpha > 0 and self.beta > 0):
            raise OutOfRange("loss weights alpha and beta must be positive")
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise OutOfRange("epochs >= 0, batch >= 1, lr > 0 required")
        if self.warmup_steps < 0:
            raise OutOfRange("warmup_steps must be >= 0")
        want = 2 if (self.kind == "dmrf" and self.two_channel_input) else 1
        if self.stage2.in_channels != want:
            raise ShapeMismatch(
                f"stage2 expects in_channels={want} for kind={self.kind!r} "
                f"two_channel_input={self.two_channel_input}, got "
                f"{self.stage2.in_channels}")
        if self.kind == "dmrf" and (self.stage1.in_channels != 1
                                    or self.stage1.out_channels != 1):
            raise ShapeMismatch("stage1 must map 1 channel to 1 channel")


def smrf_config(width_factor: float = 1.0, use_mrf: bool = True,
                use_skips: bool = True, **kw) -> DMRFConfig:
    """Convenience: single-stage model (noisy -> permittivity map)."""
    return DMRFConfig(
        kind="smrf",
        stage2=UNetConfig(in_channels=1, out_channels=1,
                          final_activation="elu", width_factor=width_factor,
                          use_mrf=use_mrf, use_skips=use_skips),
        **kw)


def dmrf_config(width_factor: float = 1.0, use_mrf: bool = True,
                use_skips: bool = True, two_channel_input: bool = True,
                **kw) -> DMRFConfig:
    """Convenience: two-stage model with both UNets at one width factor."""
    return DMRFConfig(
        kind="dmrf",
        stage1=UNetConfig(in_channels=1, out_channels=1,
                          final_activation="relu", width_factor=width_factor,
                          use_mrf=use_mrf, use_skips=use_skips),
        stage2=UNetConfig(in_channels=2 if two_channel_input else 1,
                          out_channels=1, final_activation="elu",
                          width_factor=width_factor, use_mrf=use_mrf,
                          use_skips=use_skips),
        two_channel_input=two_channel_input, **kw)


def init_params(cfg: DMRFConfig, dtype=np.float32) -> ParamStore:
    """Fresh parameter store for the model, seeded from cfg.seed."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((cfg.seed, _INIT_PURPOSE))))
    store = ParamStore(dtype=dtype)
    if cfg.kind == "dmrf":
        init_unet(store, "s1", cfg.stage1, rng)
    init_unet(store, "s2", cfg.stage2, rng)
    return store


def forward(noisy: Tensor4, cfg: DMRFConfig,
            store: ParamStore) -> tuple[Tensor4 | None, Tensor4]:
    """Model forward pass: (denoised estimate or None, permittivity map)."""
    if cfg.kind == "smrf":
        return None, unet_forward(noisy, store, "s2", cfg.stage2)
    y1 = unet_forward(noisy, store, "s1", cfg.stage1)
    x2 = ad.concat_channels([noisy, y1]) if cfg.two_channel_input else y1
    y2 = unet_forward(x2, store, "s2", cfg.stage2)
    return y1, y2


def combined_loss(y1: Tensor4, y1_hat: Tensor4, y2: Tensor4, y2_hat: Tensor4,
                  alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                  ) -> tuple[Tensor4, Tensor4, Tensor4]:
    """(alpha * l1 + beta * l2, l1, l2) with l1/l2 plain MSE terms."""
    l1 = ad.mse(y1_hat, y1)
    l2 = ad.mse(y2_hat, y2)
    total = ad.add(ad.scale(l1, alpha), ad.scale(l2, beta))
    return total, l1, l2


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _config_to_dict(cfg: DMRFConfig) -> dict:
    def unet(u: UNetConfig) -> dict:
        return {"in_channels": u.in_channels, "out_channels": u.out_channels,
                "width_factor": u.width_factor,
                "final_activation": u.final_activation, "use_mrf": u.use_mrf,
                "use_skips": u.use_skips,
                "encoder_widths": list(u.encoder_widths)}

    return {"kind": cfg.kind, "stage1": unet(cfg.stage1),
            "stage2": unet(cfg.stage2), "alpha": cfg.alpha, "beta": cfg.beta,
            "two_channel_input": cfg.two_channel_input,
            "end_to_end": cfg.end_to_end, "auto_balance": cfg.auto_balance,
            "epochs": cfg.epochs, "lr": cfg.lr,
            "warmup_steps": cfg.warmup_steps, "batch": cfg.batch,
            "seed": cfg.seed}


def _config_from_dict(d: dict) -> DMRFConfig:
    def unet(u: dict) -> UNetConfig:
        return UNetConfig(in_channels=u["in_channels"],
                          out_channels=u["out_channels"],
                          width_factor=u["width_factor"],
                          final_activation=u["final_activation"],
                          use_mrf=u["use_mrf"], use_skips=u["use_skips"],
                          encoder_widths=tuple(u["encoder_widths"]))

    return DMRFConfig(kind=d["kind"], stage1=unet(d["stage1"]),
                      stage2=unet(d["stage2"]), alpha=d["alpha"],
                      beta=d["beta"],
                      two_channel_input=d["two_channel_input"],
                      end_to_end=d["end_to_end"],
                      auto_balance=d["auto_balance"], epochs=d["epochs"],
                      lr=d["lr"], batch=d["batch"], seed=d["seed"])


def config_hash(cfg: DMRFConfig) -> str:
    blob = json.dumps(_config_to_dict(cfg), sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    """A trained model: config, fp32 parameters, and training position."""

    config: DMRFConfig
    params: dict[str, np.ndarray]
    norm: ds.NormalizationSpec
    best_test_loss: float
    epoch: int
    rng_state: dict

    def to_store(self, dtype=np.float32) -> ParamStore:
        """Materialize a ParamStore holding this checkpoint's parameters."""
        store = init_params(self.config, dtype=dtype)
        if set(store.params) != set(self.params):
            raise IncompatibleCheckpoint(
                "checkpoint parameters do not match its own config")
        for name, t in store.params.items():
            arr = self.params[name]
            if arr.shape != t.data.shape:
                raise IncompatibleCheckpoint(
                    f"parameter {name!r} has shape {arr.shape}, config "
                    f"implies {t.data.shape}")
            t.data = arr.astype(dtype, copy=True)
        return store


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write magic + JSON header + raw fp32 tensors in header order."""
    names = sorted(ckpt.params)
    header = {
        "config": _config_to_dict(ckpt.config),
        "config_hash": config_hash(ckpt.config),
        "norm": [ckpt.norm.bscan_lo, ckpt.norm.bscan_hi,
                 ckpt.norm.perm_lo, ckpt.norm.perm_hi],
        "best_test_loss": ckpt.best_test_loss,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "params": [[n, list(ckpt.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(
                ckpt.params[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CorruptFile(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path} is not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(
            f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
        cfg = _config_from_dict(header["config"])
        norm = ds.NormalizationSpec(*header["norm"])
        manifest = header["params"]
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptFile(f"{path}: malformed checkpoint header: {e}") from e
    if header.get("config_hash") != config_hash(cfg):
        raise IncompatibleCheckpoint(f"{path}: config hash mismatch")
    params: dict[str, np.ndarray] = {}
    off = 12 + hlen
    for name, shape in manifest:
        count = int(np.prod(shape))
        nbytes = 4 * count
        if off + nbytes > len(raw):
            raise CorruptFile(f"{path}: truncated tensor payload at {name!r}")
        params[name] = np.frombuffer(
            raw[off:off + nbytes], dtype="<f4").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CorruptFile(f"{path}: trailing bytes after tensor payload")
    ckpt = Checkpoint(config=cfg, params=params, norm=norm,
                      best_test_loss=header["best_test_loss"],
                      epoch=header["epoch"], rng_state=header["rng_state"])
    ckpt.to_store()  # validates parameter names/shapes against the config
    return ckpt


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_l1: float
    train_l2: float
    test_loss: float
    test_l1: float
    test_l2: float


LOSS_CSV_HEADER = "epoch,train_loss,train_l1,train_l2,test_loss,test_l1,test_l2"


def _load_split(manifest: ds.DatasetManifest, split: str):
    records = ds.samples(manifest, split)
    n = len(records)
    rows, cols = manifest.image_size
    noisy = np.zeros((n, 1, rows, cols), dtype=np.float32)
    den = np.zeros_like(noisy)
    perm = np.zeros_like(noisy)
    for i, r in enumerate(records):
        trip = ds.load_sample(manifest, r.sample_id)
        noisy[i, 0] = trip.noisy
        den[i, 0] = trip.denoised
        perm[i, 0] = trip.perm
    return noisy, den, perm


def _forward_losses(noisy: np.ndarray, den: np.ndarray, perm: np.ndarray,
                    cfg: DMRFConfig, store: ParamStore, batch: int,
                    ) -> tuple[float, float]:
    """Mean (l1, l2) over a full split without building gradient tapes."""
    total = l1_sum = l2_sum = 0.0
    n = noisy.shape[0]
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        x = Tensor4(noisy[lo:hi])
        y1_hat, y2_hat = forward(x, cfg, store)
        k = hi - lo
        if y1_hat is not None:
            l1_sum += float(ad.mse(y1_hat, Tensor4(den[lo:hi])).data.reshape(())) * k
        l2_sum += float(ad.mse(y2_hat, Tensor4(perm[lo:hi])).data.reshape(())) * k
        total += k
    return l1_sum / total, l2_sum / total


def _batch_losses(cfg: DMRFConfig, store: ParamStore, phase: str,
                  x: Tensor4, y1: Tensor4, y2: Tensor4,
                  alpha: float) -> tuple[Tensor4, float, float]:
    """One batch's optimized loss tensor plus (l1, l2) floats for logging.

    ``phase`` selects what the returned tensor optimizes: "combined"
    (alpha*l1 + beta*l2), "stage1" (l1 alone), or "stage2" (l2 alone with
    the stage-1 output detached from the tape).  smrf models ignore the
    phase and always optimize l2.
    """
    if cfg.kind == "smrf":
        _, y2_hat = forward(x, cfg, store)
        l2 = ad.mse(y2_hat, y2)
        return l2, 0.0, float(l2.data.reshape(()))
    if phase == "stage1":
        y1_hat = unet_forward(x, store, "s1", cfg.stage1)
        l1 = ad.mse(y1_hat, y1)
        # stage 2 runs detached, for logging only
        x2 = (ad.concat_channels([ad.detach(x), ad.detach(y1_hat)])
              if cfg.two_channel_input else ad.detach(y1_hat))
        y2_hat = unet_forward(x2, store, "s2", cfg.stage2)
        l2_val = float(ad.mse(y2_hat, y2).data.reshape(()))
        return l1, float(l1.data.reshape(())), l2_val
    y1_hat, y2_hat = forward(x, cfg, store)
    if phase == "stage2":
        l2 = ad.mse(y2_hat, y2)
        l1_val = float(ad.mse(ad.detach(y1_hat), y1).data.reshape(()))
        return l2, l1_val, float(l2.data.reshape(()))
    loss, l1, l2 = combined_loss(y1, y1_hat, y2, y2_hat, alpha, cfg.beta)
    return loss, float(l1.data.reshape(())), float(l2.data.reshape(()))


def _train_epochs(cfg: DMRFConfig, store: ParamStore, data,
                  norm: ds.NormalizationSpec, *, epochs: int, lr: float,
                  phase: str, rng: np.random.Generator, epoch_offset: int,
                  step_offset: int, alpha: float, logs: list[EpochLog],
                  csv_file, lr_decay: bool = False, progress=None,
                  ) -> tuple[int, float, Checkpoint | None, float]:
    """Run one training phase; returns (steps, lr, best ckpt, best loss).

    With ``lr_decay`` the learning rate is multiplied by 0.99 after any
    epoch whose train loss did not improve on the previous epoch.  The
    first ``cfg.warmup_steps`` optimizer steps (counted from
    ``step_offset``, so each fresh phase re-warms) ramp the rate linearly.
    """
    (tr_noisy, tr_den, tr_perm), (te_noisy, te_den, te_perm) = data
    n = tr_noisy.shape[0]
    step = step_offset
    best: Checkpoint | None = None
    best_loss = np.inf
    prev_train = np.inf
    for e in range(epochs):
        order = rng.permutation(n)
        run_l1 = run_l2 = run_n = 0.0
        for lo in range(0, n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            store.zero_grad()
            try:
                loss, l1_val, l2_val = _batch_losses(
                    cfg, store, phase, Tensor4(tr_noisy[idx]),
                    Tensor4(tr_den[idx]), Tensor4(tr_perm[idx]), alpha)
                loss.backward()
            except NonFiniteLoss:
                raise
            except NonFinite as err:
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch_offset + e + 1}, "
                    f"batch {lo // cfg.batch + 1} ({phase}): {err}") from err
            step += 1
            eff_lr = lr
            if cfg.warmup_steps and step < cfg.warmup_steps:
                eff_lr = lr * step / cfg.warmup_steps
            ad.adam_step(store, lr=eff_lr, t=step)
            k = len(idx)
            run_l1 += l1_val * k
            run_l2 += l2_val * k
            run_n += k
        train_l1 = run_l1 / run_n
        train_l2 = run_l2 / run_n
        train_loss = alpha * train_l1 + cfg.beta * train_l2
        test_l1, test_l2 = _forward_losses(
            te_noisy, te_den, te_perm, cfg, store, cfg.batch)
        test_loss = alpha * test_l1 + cfg.beta * test_l2
        epoch_no = epoch_offset + e + 1
        log = EpochLog(epoch_no, train_loss, train_l1, train_l2,
                       test_loss, test_l1, test_l2)
        logs.append(log)
        if csv_file is not None:
            csv_file.write(
                f"{log.epoch},{log.train_loss!r},{log.train_l1!r},"
                f"{log.train_l2!r},{log.test_loss!r},{log.test_l1!r},"
                f"{log.test_l2!r}\n")
            csv_file.flush()
        if test_loss < best_loss:
            best_loss = test_loss
            best = Checkpoint(
                config=cfg,
                params={k: v.data.copy() for k, v in store.params.items()},
                norm=norm, best_test_loss=test_loss,
                epoch=epoch_no, rng_state=_jsonable_rng_state(rng))
        if lr_decay and train_loss >= prev_train:
            lr *= 0.99
        prev_train = train_loss
        if progress is not None:
            progress(epoch_no, phase, train_loss, test_loss)
    return step, lr, best, best_loss


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def train(manifest: ds.DatasetManifest, cfg: DMRFConfig,
          out_dir: str | Path, *, csv_name: str = "loss.csv",
          checkpoint_name: str = "model.ckpt", progress=None,
          ) -> tuple[Checkpoint, Path]:
    """Train a model on a dataset; returns (best checkpoint, CSV path).

    End-to-end training optimizes the combined loss each step.  With
    ``cfg.end_to_end`` false (and kind "dmrf"), stage 1 first trains alone
    on its denoising MSE for ``cfg.epochs`` epochs, then stage 2 trains on
    the permittivity MSE with stage 1 frozen for another ``cfg.epochs``.
    The per-epoch CSV has columns
    ``epoch,train_loss,train_l1,train_l2,test_loss,test_l1,test_l2``,
    and the checkpoint with the lowest test loss is saved and returned.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = (_load_split(manifest, "train"), _load_split(manifest, "test"))
    norm = manifest.norm
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((cfg.seed, _SHUFFLE_PURPOSE))))
    csv_path = out / csv_name
    logs: list[EpochLog] = []
    best: Checkpoint | None = None
    best_loss = np.inf
    alpha = cfg.alpha
    store = init_params(cfg)
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(LOSS_CSV_HEADER + "\n")
        if cfg.kind == "dmrf" and not cfg.end_to_end:
            store.set_trainable("s2.", False)
            _, _, b1, bl1 = _train_epochs(
                cfg, store, data, norm, epochs=cfg.epochs, lr=cfg.lr,
                phase="stage1", rng=rng, epoch_offset=0, step_offset=0,
                alpha=alpha, logs=logs, csv_file=f, progress=progress)
            store.set_trainable("s2.", True)
            store.set_trainable("s1.", False)
            # fresh Adam step count for the new phase's parameter set
            _, _, b2, bl2 = _train_epochs(
                cfg, store, data, norm, epochs=cfg.epochs, lr=cfg.lr,
                phase="stage2", rng=rng, epoch_offset=cfg.epochs,
                step_offset=0, alpha=alpha, logs=logs, csv_file=f,
                progress=progress)
            for b, bl in ((b1, bl1), (b2, bl2)):
                if b is not None and bl < best_loss:
                    best, best_loss = b, bl
        elif cfg.auto_balance and cfg.kind == "dmrf":
            _, _, b, bl = _train_epochs(
                cfg, store, data, norm, epochs=min(1, cfg.epochs), lr=cfg.lr,
                phase="combined", rng=rng, epoch_offset=0, step_offset=0,
                alpha=alpha, logs=logs, csv_file=f, progress=progress)
            if logs and logs[-1].train_l1 > 0:
                alpha = logs[-1].train_l2 / logs[-1].train_l1
            if b is not None and bl < best_loss:
                best, best_loss = b, bl
            done = len(logs)
            _, _, b, bl = _train_epochs(
                cfg, store, data, norm, epochs=max(0, cfg.epochs - done),
                lr=cfg.lr, phase="combined", rng=rng, epoch_offset=done,
                step_offset=done * _steps_per_epoch(data, cfg),
                alpha=alpha, logs=logs, csv_file=f, progress=progress)
            if b is not None and bl < best_loss:
                best, best_loss = b, bl
        else:
            _, _, best, best_loss = _train_epochs(
                cfg, store, data, norm, epochs=cfg.epochs, lr=cfg.lr,
                phase="combined", rng=rng, epoch_offset=0, step_offset=0,
                alpha=alpha, logs=logs, csv_file=f, progress=progress)
    if best is None:
        # zero-epoch run: snapshot the initial parameters
        best = Checkpoint(config=cfg,
                          params={k: v.data.copy()
                                  for k, v in store.params.items()},
                          norm=manifest.norm, best_test_loss=np.inf, epoch=0,
                          rng_state=_jsonable_rng_state(rng))
    save_checkpoint(best, out / checkpoint_name)
    return best, csv_path


def _steps_per_epoch(data, cfg: DMRFConfig) -> int:
    n = data[0][0].shape[0]
    return (n + cfg.batch - 1) // cfg.batch


def fine_tune(ckpt: Checkpoint, manifest: ds.DatasetManifest, *,
              epochs: int, lr0: float = 1e-4, out_dir: str | Path,
              csv_name: str = "fine_tune.csv",
              checkpoint_name: str = "fine_tuned.ckpt", progress=None,
              ) -> tuple[Checkpoint, Path | None]:
    """Resume training from a checkpoint on a (small) dataset.

    The learning rate starts at ``lr0`` and is reduced to 99% of its
    value after every epoch whose training loss failed to drop.  With
    ``epochs=0`` the input checkpoint is returned unchanged.
    """
    if epochs < 0:
        raise OutOfRange("epochs must be >= 0")
    if epochs == 0:
        return ckpt, None
    rows, cols = manifest.image_size
    if rows % 16 or cols % 16:
        raise IncompatibleCheckpoint(
            f"dataset images {rows}x{cols} are not divisible by 16")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ckpt.config
    store = ckpt.to_store()
    data = (_load_split(manifest, "train"), _load_split(manifest, "test"))
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((cfg.seed, _SHUFFLE_PURPOSE, 1))))
    csv_path = out / csv_name
    logs: list[EpochLog] = []
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(LOSS_CSV_HEADER + "\n")
        _, _, best, _ = _train_epochs(
            cfg, store, data, ckpt.norm, epochs=epochs, lr=lr0,
            phase="combined", rng=rng, epoch_offset=ckpt.epoch,
            step_offset=0, alpha=cfg.alpha, logs=logs, csv_file=f,
            lr_decay=True, progress=progress)
    if best is None:
        best = ckpt
    save_checkpoint(best, out / checkpoint_name)
    return best, csv_path


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class InferenceResult:
    denoised: np.ndarray | None      # normalized [H, W] (None for smrf)
    perm: np.ndarray                 # normalized [H, W]
    denoised_vm: np.ndarray | None   # denormalized, V/m
    perm_eps: np.ndarray             # denormalized, relative permittivity


def infer(ckpt: Checkpoint, noisy: np.ndarray | str | Path,
          store: ParamStore | None = None) -> InferenceResult:
    """Run the model on one normalized noisy B-scan image.

    ``noisy`` is a [H, W] array in [0, 1] or a path to a GPRT file
    holding one.  Outputs are deterministic for fixed inputs.  Pass a
    prebuilt ``store`` (from ``ckpt.to_store()``) to amortize checkpoint
    materialization over many calls.
    """
    if isinstance(noisy, (str, Path)):
        arr = ds.read_gprt(noisy)
        if arr.shape[2] != 1:
            raise CorruptFile(
                f"expected a 1-channel image, got {arr.shape[2]} channels")
        noisy = arr[:, :, 0]
    noisy = np.asarray(noisy, dtype=np.float32)
    if noisy.ndim != 2:
        raise ShapeMismatch(f"expected a 2D image, got shape {noisy.shape}")
    h, w = noisy.shape
    if h % 16 or w % 16:
        raise ShapeMismatch(f"image dims must be divisible by 16, got {h}x{w}")
    if noisy.min() < 0.0 or noisy.max() > 1.0:
        raise OutOfRange("input image values must lie in [0, 1]")
    if store is None:
        store = ckpt.to_store()
    x = Tensor4(noisy[None, None])
    y1_hat, y2_hat = forward(x, ckpt.config, store)
    perm = y2_hat.data[0, 0].astype(np.float32)
    perm_eps = ds.inverse_normalize(perm, ckpt.norm.perm_lo,
                                    ckpt.norm.perm_hi).astype(np.float32)
    if y1_hat is None:
        return InferenceResult(None, perm, None, perm_eps)
    den = y1_hat.data[0, 0].astype(np.float32)
    den_vm = ds.inverse_normalize(den, ckpt.norm.bscan_lo,
                                  ckpt.norm.bscan_hi).astype(np.float32)
    return InferenceResult(den, perm, den_vm, perm_eps)
