"""Optimization loop, checkpointing, evaluation, the ablation grid, and the
latent-sensitivity probe.

Determinism contract: (seed, config, corpus) fully determines every logged
number and checkpoint byte.  The step path is sequential; all randomness
flows through named numpy Generator streams seeded from the config seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import bicubic_downsample, load_corpus, random_crop_batch, rgb_to_y
from .losses import LossWeights, total_loss
from .metrics import crop_border, psnr, psnr_display, ssim
from .network import LatentSpec, RescaleModel, sample_latent
from .tensor import Parameter, Tape, Tensor

CKPT_MAGIC = b"INVRESCALE/CKPT1\n"
CKPT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    scale: int = 2
    latent_channels: int = 2
    w_mode: str = "gaussian"
    zhat_mode: str = "zero"
    blocks_per_stage: int = 8
    growth: int = 16
    clamp: float = 1.0
    batch_size: int = 4
    patch_size: int = 64
    iterations: int = 5000
    base_lr: float = 2e-4
    halve_every: int = 1000
    lambda_recon: float = 1.0
    lambda_guide: float = -1.0   # -1 means the s^2 default
    lambda_dist: float = 1e-2
    lambda_inv: float = 0.0      # s^2/4 is the reference setting when enabled
    inv_samples: int = 3
    seed: int = 0
    quantize: bool = True
    dtype: str = "f32"
    eval_every: int = 1000
    checkpoint_every: int = 0  # 0 = final checkpoint only
    train_dir: str = ""
    eval_dir: str = ""

    def __post_init__(self):
        if self.halve_every <= 0:
            raise ValueError("halve_every must be positive")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.patch_size % self.scale:
            raise ValueError(
                f"patch size {self.patch_size} not divisible by scale {self.scale}"
            )

    def latent_spec(self) -> LatentSpec:
        return LatentSpec(self.latent_channels, self.w_mode, self.zhat_mode)

    def loss_weights(self) -> LossWeights:
        guide = self.lambda_guide
        if guide < 0:
            guide = float(self.scale * self.scale)
        return LossWeights(self.lambda_recon, guide, self.lambda_dist,
                           self.lambda_inv, self.inv_samples)

    def build_model(self) -> RescaleModel:
        return RescaleModel(self.scale, self.latent_spec(), self.blocks_per_stage,
                            self.growth, self.clamp, self.dtype, self.seed)


def lr_at(iteration: int, base: float, period: int) -> float:
    """Learning rate halved after every `period` iterations."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return base * 2.0 ** (-(iteration // period))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """Standard bias-corrected moment update reading each Parameter's grad."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# checkpoint container (also used for standalone tensor blobs)
# ---------------------------------------------------------------------------

def _checksum(raw: bytes) -> str:
    return hashlib.blake2b(raw, digest_size=8).hexdigest()


def _dtype_tag(arr: np.ndarray) -> str:
    return "<f4" if arr.dtype == np.float32 else "<f8"


def _write_container(path, header: dict, blobs: list[tuple[str, np.ndarray]]) -> None:
    manifest = []
    raws = []
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _dtype_tag(arr),
            "checksum": _checksum(raw),
        })
        raws.append(raw)
    header = dict(header)
    header["blobs"] = manifest
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(len(head).to_bytes(8, "big"))
        fh.write(head)
        for raw in raws:
            fh.write(raw)


def _read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    pos = len(CKPT_MAGIC)
    head_len = int.from_bytes(data[pos:pos + 8], "big")
    pos += 8
    try:
        header = json.loads(data[pos:pos + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos += head_len
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('version')} != {CKPT_VERSION}"
        )
    blobs: dict[str, np.ndarray] = {}
    for entry in header["blobs"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        raw = data[pos:pos + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated blob {entry['name']!r}")
        if _checksum(raw) != entry["checksum"]:
            raise CheckpointError(f"{path}: checksum mismatch in blob {entry['name']!r}")
        blobs[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after blobs")
    return header, blobs


def save_checkpoint(path, model: RescaleModel, state: AdamState, iteration: int,
                    rng_state: Optional[dict] = None) -> None:
    params = model.parameters()
    blobs = [(f"param:{p.name}", p.data) for p in params]
    blobs += [(f"adam_m:{p.name}", m) for p, m in zip(params, state.m)]
    blobs += [(f"adam_v:{p.name}", v) for p, v in zip(params, state.v)]
    header = {
        "version": CKPT_VERSION,
        "kind": "checkpoint",
        "iteration": iteration,
        "arch": model.arch_config(),
        "adam_step": state.step,
        "rng": rng_state or {},
    }
    _write_container(path, header, blobs)


def load_checkpoint(path, expected_config: Optional[dict] = None):
    """Rebuild (model, adam state, header) from a checkpoint file."""
    header, blobs = _read_container(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: container holds {header.get('kind')!r}, "
                              "not a checkpoint")
    arch = header["arch"]
    if expected_config is not None and arch != expected_config:
        raise CheckpointError(
            f"{path}: architecture mismatch\n  file: {arch}\n  want: {expected_config}"
        )
    model = RescaleModel.from_config(arch)
    params = model.parameters()
    state = AdamState.init(params)
    state.step = int(header.get("adam_step", 0))
    for i, p in enumerate(params):
        for prefix, dest in (("param", None), ("adam_m", state.m), ("adam_v", state.v)):
            key = f"{prefix}:{p.name}"
            if key not in blobs:
                raise CheckpointError(f"{path}: missing blob {key!r}")
            arr = blobs[key]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"{path}: blob {key!r} shape {arr.shape} != {p.data.shape}"
                )
            if dest is None:
                p.assign(arr)
            else:
                dest[i] = arr
    return model, state, header


def save_tensor_blob(path, name: str, arr: np.ndarray) -> None:
    _write_container(path, {"version": CKPT_VERSION, "kind": "tensor"}, [(name, arr)])


def load_tensor_blob(path) -> tuple[str, np.ndarray]:
    header, blobs = _read_container(path)
    if header.get("kind") != "tensor":
        raise CheckpointError(f"{path}: container holds {header.get('kind')!r}, "
                              "not a tensor blob")
    (name, arr), = blobs.items()
    return name, arr


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _center_crop_multiple(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[:2]
    ch, cw = (h // s) * s, (w // s) * s
    oy, ox = (h - ch) // 2, (w - cw) // 2
    return img[oy:oy + ch, ox:ox + cw]


def rescale_image(model: RescaleModel, img: np.ndarray, rng: np.random.Generator,
                  quantize: bool = True, use_true_z: bool = False):
    """Run one image through downscale -> (quantize) -> upscale.

    Returns (restored HR in [0,1], LR display image in [0,1]).
    """
    x = Tensor(img.transpose(2, 0, 1)[None], dtype=model.dtype)
    cw = model.latent.channels
    h, w = img.shape[:2]
    w_lat = None
    if cw > 0:
        w_lat = sample_latent(model.latent.w_mode, model.w_shape(h, w), rng, model.dtype)
    y, z = model.forward(x, w_lat)
    gain = model.lf_gain
    y_img = y.data[0].transpose(1, 2, 0) / gain
    if quantize:
        y_img = np.clip(np.round(y_img * 255.0) / 255.0, 0.0, 1.0)
    if use_true_z:
        zhat = Tensor(z.data)
    else:
        zhat = sample_latent(model.latent.zhat_mode, z.data.shape, rng, model.dtype)
    y_back = Tensor((y_img.transpose(2, 0, 1)[None] * gain).astype(x.data.dtype))
    xhat, _ = model.inverse(y_back, zhat)
    restored = np.clip(xhat.data[0].transpose(1, 2, 0), 0.0, 1.0)
    return restored, y_img


def evaluate_model(model: RescaleModel, corpus, rng_seed: int,
                   quantize: bool = True) -> tuple[float, float]:
    """Mean Y-channel restoration PSNR and mean LR-vs-bicubic SSIM over a
    corpus, with an s-pixel border crop."""
    s = model.scale
    psnrs = []
    ssims = []
    for idx, (name, img) in enumerate(corpus):
        img = _center_crop_multiple(img, s)
        rng = np.random.default_rng([rng_seed, idx])
        restored, y_img = rescale_image(model, img, rng, quantize=quantize)
        yx = crop_border(rgb_to_y(img), s) * 255.0
        yr = crop_border(rgb_to_y(restored), s) * 255.0
        psnrs.append(psnr(yx, yr))
        ybar = bicubic_downsample(img, s)
        lr_a = crop_border(rgb_to_y(y_img), s) * 255.0
        lr_b = crop_border(rgb_to_y(ybar), s) * 255.0
        ssims.append(ssim(lr_a, lr_b))
    return float(np.mean([psnr_display(p) for p in psnrs])), float(np.mean(ssims))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    config: TrainConfig
    checkpoint_path: Path
    train_log_path: Path
    eval_log_path: Path
    final_psnr: float
    final_ssim: float
    first_loss: float
    last_loss: float


def _format_row(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def train(config: TrainConfig, out_dir) -> TrainResult:
    """Run the full protocol: Adam under the halving schedule, loss/eval
    logging, final checkpoint.  Deterministic for a fixed (config, corpus)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_corpus = load_corpus(config.train_dir)
    eval_corpus = load_corpus(config.eval_dir) if config.eval_dir else []

    model = config.build_model()
    params = model.parameters()
    state = AdamState.init(params)
    weights = config.loss_weights()
    rng = np.random.default_rng([config.seed, 0])

    train_rows = [("iter", "lr", "L_r", "L_g", "L_d", "L_i", "total")]
    eval_rows = [("iter", "psnr_db", "ssim")]
    first_loss = math.nan
    comps = {}
    for it in range(config.iterations):
        lr = lr_at(it, config.base_lr, config.halve_every)
        batch, _, _ = random_crop_batch(train_corpus, config.batch_size,
                                        config.patch_size, config.scale, rng)
        x = Tensor(batch, dtype=config.dtype)
        with Tape() as tape:
            loss, comps = total_loss(model, x, weights, rng, config.quantize)
        if not math.isfinite(comps["total"]):
            dump = ", ".join(f"{k}={v:.6g}" for k, v in comps.items())
            norms = ", ".join(
                f"{p.name}={float(np.linalg.norm(p.grad)):.3g}" for p in params[:4]
            )
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: {dump}; grad norms {norms}"
            )
        if it == 0:
            first_loss = comps["total"]
        model.zero_grad()
        tape.backward(loss)
        adam_step(params, state, lr)
        train_rows.append((it, lr, comps["recon"], comps["guide"], comps["dist"],
                           comps["invariance"], comps["total"]))
        if eval_corpus and config.eval_every > 0 and (it + 1) % config.eval_every == 0:
            ep, es = evaluate_model(model, eval_corpus, rng_seed=config.seed + it + 1,
                                    quantize=config.quantize)
            eval_rows.append((it + 1, ep, es))
        if config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0 \
                and (it + 1) < config.iterations:
            save_checkpoint(out_dir / f"ckpt_{it + 1:06d}.ckpt", model, state, it + 1,
                            rng_state=_rng_state_dict(rng))

    final_psnr, final_ssim = (math.nan, math.nan)
    if eval_corpus:
        final_psnr, final_ssim = evaluate_model(
            model, eval_corpus, rng_seed=config.seed + config.iterations,
            quantize=config.quantize)
        if not eval_rows or eval_rows[-1][0] != config.iterations:
            eval_rows.append((config.iterations, final_psnr, final_ssim))

    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(ckpt_path, model, state, config.iterations,
                    rng_state=_rng_state_dict(rng))
    train_log = out_dir / "train_log.csv"
    eval_log = out_dir / "eval_log.csv"
    train_log.write_text("\n".join(_format_row(r) for r in train_rows) + "\n")
    eval_log.write_text("\n".join(_format_row(r) for r in eval_rows) + "\n")
    return TrainResult(config, ckpt_path, train_log, eval_log,
                       final_psnr, final_ssim, first_loss, comps["total"])


def _rng_state_dict(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=str))


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

def table_grid(scale: int = 2) -> list[tuple[str, dict]]:
    """The reference ablation rows: latent sampling modes, w channel sweep,
    and the invariance term added on top of the best setting."""
    inv = float(scale * scale) / 4.0
    return [
        ("zN_wN_c2", {"zhat_mode": "gaussian", "w_mode": "gaussian", "latent_channels": 2}),
        ("zN_w0_c2", {"zhat_mode": "gaussian", "w_mode": "zero", "latent_channels": 2}),
        ("z0_w0_c2", {"zhat_mode": "zero", "w_mode": "zero", "latent_channels": 2}),
        ("z0_wN_c1", {"zhat_mode": "zero", "w_mode": "gaussian", "latent_channels": 1}),
        ("z0_wN_c2", {"zhat_mode": "zero", "w_mode": "gaussian", "latent_channels": 2}),
        ("z0_wN_c3", {"zhat_mode": "zero", "w_mode": "gaussian", "latent_channels": 3}),
        ("z0_wN_c2_Li", {"zhat_mode": "zero", "w_mode": "gaussian", "latent_channels": 2,
                         "lambda_inv": inv}),
    ]


@dataclass
class AblateRow:
    setting: str
    psnr_db: float
    ssim: float
    result: TrainResult


def ablate(base: TrainConfig, grid: Sequence[tuple[str, dict]], out_dir) -> list[AblateRow]:
    """Train every grid variant with the identical seed and data order and
    collect held-out metrics; writes ablation.csv next to the runs."""
    allowed = {"zhat_mode", "w_mode", "latent_channels", "lambda_inv", "inv_samples"}
    out_dir = Path(out_dir)
    rows = []
    for name, overrides in grid:
        bad = set(overrides) - allowed
        if bad:
            raise ValueError(f"grid row {name!r} varies non-ablation fields {sorted(bad)}")
        cfg = replace(base, **overrides)
        result = train(cfg, out_dir / name)
        rows.append(AblateRow(name, result.final_psnr, result.final_ssim, result))
    csv_path = out_dir / "ablation.csv"
    lines = ["setting,psnr_db,ssim"]
    lines += [f"{r.setting},{r.psnr_db!r},{r.ssim!r}" for r in rows]
    csv_path.write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------------------
# latent-sensitivity probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeResult:
    min_distance: float
    max_distance: float
    distances: tuple


def sensitivity_probe(model: RescaleModel, y: Tensor, k: int = 2, delta: float = 1.0,
                      rng: Optional[np.random.Generator] = None,
                      latents: Optional[list[Tensor]] = None) -> ProbeResult:
    """Invert one LR tensor under k different upscaling latents and report
    the pairwise max-abs distances between the restored images.

    With distinct latents the distances must be strictly positive: the map
    is injective in the latent, so different draws cannot restore the same
    image.  `latents` overrides the default unit-norm perturbations."""
    if k < 2:
        raise ValueError("need at least two probes")
    b, _, h, w = y.data.shape
    zshape = (b, model.z_channels, h, w)
    if latents is None:
        if rng is None:
            rng = np.random.default_rng(0)
        latents = []
        for _ in range(k):
            d = rng.standard_normal(zshape)
            d *= delta / np.linalg.norm(d)
            latents.append(Tensor(d.astype(y.data.dtype)))
    else:
        if len(latents) != k:
            raise ValueError(f"got {len(latents)} latents for k={k}")
    outs = [model.inverse(y, z)[0].data for z in latents]
    dists = []
    for i in range(k):
        for j in range(i + 1, k):
            dists.append(float(np.abs(outs[i] - outs[j]).max()))
    return ProbeResult(min(dists), max(dists), tuple(dists))
