"""End-to-end optimization of downsampler -> codec twin -> viewport renderer.

One training item: crop a p x p patch from an HR panorama, aim a random
viewport at its center, keep the viewport grid points that land inside the
patch (at most N of them), and supervise the rendered colors at exactly those
points.  The patch runs through the learnable downsampler and the codec's
differentiable twin (straight-through quantisation) before the renderer sees
it, so all three subsystems receive gradients from one loss:

    L = L_pix + lambda1 * L_guide + lambda2 * L_bpp

* L_pix   -- sum of absolute color errors at the supervised points / N
* L_guide -- squared distance between the produced LR patch and the plain
             bicubic LR patch, / (p/s)^2; keeps the downsampler's output a
             recognizable image instead of an adversarial code
* L_bpp   -- the rate model's estimated bits for the quantised LR patch,
             per HR patch pixel

Every iteration derives its RNG from (seed, iteration), so a resumed run
continues bit-identically and data draws never depend on loop history.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch, Tensor, abs_, sum_
from .codec import (
    RateModel,
    decode,
    encode,
    forward_blocks,
    reconstruct_blocks,
    stream_bpp,
    tables_for_quality,
)
from .geometry import ViewportCoord, ViewportSpec
from .metrics import metric_suite
from .nn import Adam, ParamStore, load_checkpoint, save_checkpoint
from .renderer import (
    Downsampler,
    ModelConfig,
    ViewportRenderer,
    render_viewport_baseline,
)
from .resample import ErpImage, bicubic_downscale, crop_patch
from .sampling import (
    FOV_CHOICES_DEG,
    RES_CHOICES,
    EmptyOverlap,
    PatchSpec,
    dis_samp,
    pick_view_for_patch,
)

MAX_REDRAWS = 8
LOG_COLUMNS = ("iter", "loss_total", "loss_pix", "loss_guide", "bpp_est")

# view directions used by evaluate(): equator incl. the seam, mid latitudes,
# and both poles
EVAL_DIRECTIONS_DEG = (
    (0.0, 0.0), (0.0, 90.0), (0.0, -90.0), (0.0, 180.0),
    (45.0, 0.0), (-45.0, 0.0), (45.0, 135.0), (-45.0, -135.0),
    (90.0, 0.0), (-90.0, 0.0),
)


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.6   # guide
    lambda2: float = 0.01  # bpp

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; `paper_scale()` switches to the full protocol."""

    seed: int = 0
    scale: int = 2
    patch: int = 64
    n_samples: int = 1024
    batch: int = 1
    iters: int = 500
    lr: float = 1e-3
    lr_decay: str = "none"     # "none" | "cosine" (anneal to 0 over iters)
    lambda1: float = 0.6
    lambda2: float = 0.01
    quality: float = 85.0      # codec operating point inside the loop
    channels: int = 16
    freqs: int = 32
    hidden: int = 48
    enc_layers: int = 3
    descriptor: str = "spherical"
    fov_choices_deg: tuple = FOV_CHOICES_DEG
    res_choices: tuple = (128, 192, 256)
    eval_view: int = 128
    ckpt_every: int = 250

    def __post_init__(self):
        if self.patch % self.scale:
            raise ValueError(f"patch {self.patch} not divisible by scale {self.scale}")
        if (self.patch // self.scale) % 8:
            raise ValueError("LR patch side must be a multiple of 8 for the codec")
        if not 0.0 < self.quality <= 100.0:
            raise ValueError(f"quality out of range: {self.quality}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay: {self.lr_decay}")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(scale=4, patch=256, n_samples=25600, batch=16,
                    iters=500_000, lr=2e-4, res_choices=RES_CHOICES)
        base.update(overrides)
        return cls(**base)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2)


# ------------------------------------------------------------- config file --

def _coerce(name: str, kind, raw: str):
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    if kind is tuple:
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(float(p) if "." in p else int(p) for p in parts)
    raise ValueError(f"config key {name} has unsupported type {kind}")


def load_config(path) -> TrainConfig:
    """Flat `key = value` file; keys mirror TrainConfig fields."""
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    # field types are strings under `from __future__ import annotations`
    named = {"int": int, "float": float, "str": str, "tuple": tuple}
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key = value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            out[key] = _coerce(key, named[str(kinds[key])], raw)
    return TrainConfig(**out)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ losses --

def loss_pix(pred: Tensor, target: np.ndarray) -> Tensor:
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise LengthMismatch(f"{pred.shape} vs {np.shape(target)}")
    n = pred.shape[-1]
    return sum_(abs_(pred - target)) * (1.0 / n)


def loss_guide(pred_lr: Tensor, target_lr: np.ndarray, p: int, s: int) -> Tensor:
    want = (3, p // s, p // s)
    if tuple(pred_lr.shape) != want or tuple(np.shape(target_lr)) != want:
        raise ShapeMismatch(f"{pred_lr.shape} / {np.shape(target_lr)} vs {want}")
    d = pred_lr - target_lr
    return sum_(d * d) * (1.0 / (p // s) ** 2)


def loss_total(l_pix: Tensor, l_guide: Tensor, l_bpp: Tensor,
               w: LossWeights) -> Tensor:
    return l_pix + w.lambda1 * l_guide + w.lambda2 * l_bpp


# ------------------------------------------------------------------- model --

@dataclass
class Model:
    cfg: TrainConfig
    store: ParamStore
    down: Downsampler
    rend: ViewportRenderer
    rate: RateModel


def build_model(cfg: TrainConfig) -> Model:
    store = ParamStore(cfg.seed)
    mcfg = ModelConfig(scale=cfg.scale, channels=cfg.channels, freqs=cfg.freqs,
                       hidden=cfg.hidden, enc_layers=cfg.enc_layers,
                       descriptor=cfg.descriptor)
    return Model(cfg=cfg, store=store, down=Downsampler(store, mcfg),
                 rend=ViewportRenderer(store, mcfg), rate=RateModel(store))


def item_losses(model: Model, img: ErpImage, ps: PatchSpec, spec: ViewportSpec,
                sample, lr_guide: ErpImage, mode: str = "train",
                noise: tuple | None = None) -> dict:
    """Loss parts for one supervision item, as graph tensors.

    `mode`/`noise` select the codec relaxation: "train" quantises with the
    straight-through estimator; "noise" keeps the whole path smooth for
    finite-difference checks.
    """
    cfg = model.cfg
    m = cfg.patch // cfg.scale
    tables = tables_for_quality(cfg.quality)

    hr = Tensor(crop_patch(img, ps.a, ps.b, ps.p))
    lr_pred = model.down(hr, wrap_x=False)
    l_guide = loss_guide(lr_pred, lr_guide.pixels, cfg.patch, cfg.scale)

    coeffs = forward_blocks(lr_pred, tables, mode=mode, noise=noise)
    l_bpp = model.rate.estimate_bpp(coeffs, ps.p, ps.p)
    dec = reconstruct_blocks(coeffs, tables, m, m)

    z = model.rend.encode(dec, wrap_x=False)
    view = ViewportCoord(u=sample.view_uv[:, 0], v=sample.view_uv[:, 1])
    desc = model.rend._descriptors(spec, view, img.h // cfg.scale,
                                   img.w // cfg.scale)
    pred = model.rend.predict_samples(dec, z, sample.coords, desc)
    l_pix = loss_pix(pred, sample.pixels)

    return {"pix": l_pix, "guide": l_guide, "bpp": l_bpp,
            "total": loss_total(l_pix, l_guide, l_bpp, cfg.weights)}


def draw_item(images: list[ErpImage], cfg: TrainConfig,
              rng: np.random.Generator):
    """Random (image, patch, view, samples); redraws when the view misses."""
    for _ in range(MAX_REDRAWS):
        img = images[int(rng.integers(len(images)))]
        ps = PatchSpec(a=int(rng.integers(img.w)),
                       b=int(rng.integers(img.h - cfg.patch + 1)),
                       p=cfg.patch, s=cfg.scale)
        spec = pick_view_for_patch(ps, img.h, img.w, rng,
                                   cfg.fov_choices_deg, cfg.res_choices)
        try:
            sample, lr_guide = dis_samp(img, ps, spec, cfg.n_samples, rng)
        except EmptyOverlap:
            continue
        return img, ps, spec, sample, lr_guide
    raise EmptyOverlap(f"no usable patch/view pair after {MAX_REDRAWS} draws")


def _iter_rng(seed: int, it: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(it,)))


def train(cfg: TrainConfig, images: list[ErpImage], out_dir=None,
          resume=None, progress=None) -> tuple[Model, list[dict]]:
    """Run the loop; returns the model and one log row per iteration.

    `out_dir` (optional) receives log.csv and periodic checkpoints;
    `resume` names a checkpoint file to continue from.
    """
    model = build_model(cfg)
    opt = Adam(model.store, cfg.lr)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        model.store.load_state_dict(ck)
        opt.load_state_dict(ck)
        start = int(ck["train.iter"][0])

    log_path = csv = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "log.csv")
        fresh = start == 0 or not os.path.exists(log_path)
        csv = open(log_path, "a")
        if fresh:
            csv.write(",".join(LOG_COLUMNS) + "\n")

    rows = []
    try:
        for it in range(start, cfg.iters):
            if cfg.lr_decay == "cosine":
                opt.lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * it / cfg.iters))
            rng = _iter_rng(cfg.seed, it)
            parts_sum = None
            mean_parts = {"pix": 0.0, "guide": 0.0, "bpp": 0.0}
            for _ in range(cfg.batch):
                item = draw_item(images, cfg, rng)
                parts = item_losses(model, *item)
                t = parts["total"]
                parts_sum = t if parts_sum is None else parts_sum + t
                for k in mean_parts:
                    mean_parts[k] += float(parts[k].data) / cfg.batch
            loss = parts_sum * (1.0 / cfg.batch)
            model.store.zero_grad()
            loss.backward()
            opt.step()

            row = {"iter": it, "loss_total": float(loss.data),
                   "loss_pix": mean_parts["pix"],
                   "loss_guide": mean_parts["guide"],
                   "bpp_est": mean_parts["bpp"]}
            rows.append(row)
            if csv is not None:
                csv.write(",".join(f"{row[k]:.6g}" if k != "iter" else str(row[k])
                                   for k in LOG_COLUMNS) + "\n")
            if progress is not None:
                progress(row)
            if out_dir is not None and (
                (it + 1) % cfg.ckpt_every == 0 or it + 1 == cfg.iters
            ):
                save_checkpoint(os.path.join(out_dir, "model.ckpt"),
                                _checkpoint_arrays(model, opt, it + 1))
    finally:
        if csv is not None:
            csv.close()
    return model, rows


def _checkpoint_arrays(model: Model, opt: Adam, next_iter: int) -> dict:
    arrays = model.store.state_dict()
    arrays |= opt.state_dict()
    arrays["train.iter"] = np.array([next_iter], dtype=np.int64)
    return arrays


def load_model(cfg: TrainConfig, ckpt_path) -> Model:
    model = build_model(cfg)
    model.store.load_state_dict(load_checkpoint(ckpt_path))
    return model


# -------------------------------------------------------------- evaluation --

def compress_panorama(model: Model, img: ErpImage) -> tuple[ErpImage, bytes]:
    """Learned downscale + real codec roundtrip: (decoded LR, byte stream)."""
    lr = model.down(Tensor(img.pixels), wrap_x=True).data
    lr_img = ErpImage(pixels=np.clip(lr, 0.0, 1.0))
    _, stream = encode(lr_img, tables_for_quality(model.cfg.quality))
    return decode(stream), stream


def evaluate(model: Model, images: list[ErpImage],
             directions_deg=EVAL_DIRECTIONS_DEG,
             fov_deg: float = 90.0) -> tuple[list[dict], dict]:
    """Render the fixed directions and score against HR bicubic ground truth.

    The bilinear baseline gets the same codec treatment on a plain bicubic
    LR, so the comparison isolates the rendering pipeline.  Returns
    (per-direction rows, summary means).
    """
    cfg = model.cfg
    fov = float(np.deg2rad(fov_deg))
    side = cfg.eval_view
    rows = []
    tables = tables_for_quality(cfg.quality)
    for idx, img in enumerate(images):
        lr, stream = compress_panorama(model, img)
        _, base_stream = encode(bicubic_downscale(img, cfg.scale), tables)
        lr_base = decode(base_stream)
        bpp = stream_bpp(stream, img.h, img.w)
        for theta_deg, phi_deg in directions_deg:
            spec = ViewportSpec(theta_c=float(np.deg2rad(theta_deg)),
                                phi_c=float(np.deg2rad(phi_deg)),
                                fov_h=fov, fov_v=fov, h_v=side, w_v=side)
            gt = render_viewport_baseline(img, spec, method="bicubic")
            ours = metric_suite(model.rend.render_viewport(lr, spec), gt)
            base = metric_suite(
                render_viewport_baseline(lr_base, spec, method="bilinear"), gt)
            rows.append({"image": idx, "theta_deg": theta_deg,
                         "phi_deg": phi_deg, "bpp": bpp,
                         "psnr": ours.psnr, "ssim": ours.ssim,
                         "psnr_bilinear": base.psnr,
                         "ssim_bilinear": base.ssim})
    summary = {k: float(np.mean([r[k] for r in rows]))
               for k in ("bpp", "psnr", "ssim", "psnr_bilinear", "ssim_bilinear")}
    return rows, summary


def write_eval_csv(path, rows: list[dict]):
    cols = list(rows[0])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(f"{r[c]:.6g}" if isinstance(r[c], float)
                              else str(r[c]) for c in cols) + "\n")
