"""Training loop, checkpoint format, gradient checking, and the ablation run.

Optimization is adaptive-moment with decoupled weight decay (beta1 0.9,
beta2 0.999, eps 1e-8) and global L2 gradient clipping. Everything is
deterministic for a fixed (seed, config, data) triple.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig
from .errors import ContractViolation, DataIOError, GradCheckError
from .loss import total_loss
from .metrics import MetricReport, metric_report
from .model import VARIANTS, MlffNet, build_model
from .tensor import Tape, Tensor

CKPT_MAGIC = b"MLFF"
CKPT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

TRAIN_LOG_HEADER = "step,total,lb_p1,lb_p2,lb_p3"


@dataclass
class TrainConfig:
    variant: str = "full"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    steps: int = 100
    batch: int = 4
    seed: int = 0
    grad_clip: float = 1.0
    channels: tuple = (8, 16, 24, 32)
    decoder_width: int = 16
    attn_width: int = 8
    blocks_per_stage: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.batch < 1:
            raise ContractViolation("batch must be >= 1")
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}")

    def build(self) -> MlffNet:
        return build_model(
            self.variant,
            EncoderConfig(tuple(self.channels),
                          blocks_per_stage=self.blocks_per_stage),
            self.decoder_width,
            self.attn_width,
            seed=self.seed,
        )


class AdamW:
    """Adaptive moments with decoupled weight decay and global-norm clipping."""

    def __init__(self, params, lr, weight_decay=0.0, grad_clip=None):
        self.params = list(params)  # [(name, Tensor)]
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def step(self, grads):
        self.t += 1
        gs = {name: grads.get(p) for name, p in self.params}
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in gs.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                gs = {name: g * scale for name, g in gs.items()}
        b1c = 1.0 - ADAM_BETA1 ** self.t
        b2c = 1.0 - ADAM_BETA2 ** self.t
        for name, p in self.params:
            g = gs[name]
            self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * g * g
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            p.data = p.data - self.lr * (
                mhat / (np.sqrt(vhat) + ADAM_EPS)
                + self.weight_decay * p.data
            )


# ---------------------------------------------------------------------------
# checkpoint format: magic, version u32, meta-json, named float64 tensors


def _pack_tensors(out, tensors):
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            out.write(struct.pack("<I", d))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _unpack_tensors(buf):
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(
            struct.unpack("<I", buf.read(4))[0] for _ in range(ndim)
        )
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
    return tensors


def save_checkpoint(path, model: MlffNet, cfg: TrainConfig, step: int,
                    optimizer: AdamW = None):
    meta = {
        "variant": model.variant,
        "channels": list(model.encoder_cfg.channels),
        "blocks_per_stage": model.encoder_cfg.blocks_per_stage,
        "norm": model.encoder_cfg.norm,
        "decoder_width": model.decoder_width,
        "attn_width": model.attn_width,
        "step": step,
        "seed": cfg.seed if cfg is not None else 0,
    }
    tensors = [(f"param.{n}", p.data) for n, p in model.named_params()]
    tensors += [(f"buffer.{n}", b) for n, b in model.buffers()]
    if optimizer is not None:
        tensors += [(f"opt.m.{n}", optimizer.m[n]) for n, _ in optimizer.params]
        tensors += [(f"opt.v.{n}", optimizer.v[n]) for n, _ in optimizer.params]
        meta["opt_t"] = optimizer.t
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", CKPT_VERSION))
            fh.write(struct.pack("<I", len(mb)))
            fh.write(mb)
            _pack_tensors(fh, tensors)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Returns (model, meta, optimizer-or-None) with tensors restored bitwise."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    buf = io.BytesIO(raw)
    if buf.read(4) != CKPT_MAGIC:
        raise DataIOError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CKPT_VERSION:
        raise DataIOError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(mlen).decode("utf-8"))
    tensors = _unpack_tensors(buf)
    model = build_model(
        meta["variant"],
        EncoderConfig(tuple(meta["channels"]),
                      blocks_per_stage=meta["blocks_per_stage"],
                      norm=meta["norm"]),
        meta["decoder_width"],
        meta["attn_width"],
        seed=meta.get("seed", 0),
    )
    for name, p in model.named_params():
        key = f"param.{name}"
        if key not in tensors:
            raise DataIOError(f"{path}: missing tensor {key}")
        if tensors[key].shape != p.data.shape:
            raise DataIOError(f"{path}: shape mismatch for {key}")
        p.data = tensors[key].copy()
    buffers = dict(model.buffers())
    for name, b in buffers.items():
        key = f"buffer.{name}"
        if key in tensors:
            b[...] = tensors[key]
    optimizer = None
    if any(k.startswith("opt.m.") for k in tensors):
        optimizer = AdamW(model.named_params(), lr=1.0)
        for name, _ in optimizer.params:
            optimizer.m[name] = tensors[f"opt.m.{name}"].copy()
            optimizer.v[name] = tensors[f"opt.v.{name}"].copy()
        optimizer.t = meta.get("opt_t", 0)
    return model, meta, optimizer


# ---------------------------------------------------------------------------
# training


def _stack_batch(samples):
    images = np.concatenate([s.image.data for s in samples], axis=0)
    masks = np.concatenate([s.mask.data for s in samples], axis=0)
    return Tensor(images), Tensor(masks)


@dataclass
class TrainResult:
    model: MlffNet
    optimizer: AdamW
    log: list = field(default_factory=list)  # LossBreakdown value rows

    def log_csv(self):
        return "\n".join([TRAIN_LOG_HEADER] + self.log) + "\n"


def train(cfg: TrainConfig, dataset, progress=None) -> TrainResult:
    if not dataset:
        raise ContractViolation("training dataset is empty")
    res = {s.image.shape[2:] for s in dataset}
    if len(res) != 1:
        raise ContractViolation(f"mixed sample resolutions: {sorted(res)}")
    model = cfg.build()
    model.set_training(True)
    optimizer = AdamW(model.named_params(), cfg.lr, cfg.weight_decay,
                      cfg.grad_clip)
    order = list(range(len(dataset)))
    log = []
    last_finite = None
    cursor = 0
    for step in range(1, cfg.steps + 1):
        batch = []
        for _ in range(min(cfg.batch, len(dataset))):
            batch.append(dataset[order[cursor]])
            cursor = (cursor + 1) % len(dataset)
        images, masks = _stack_batch(batch)
        tape = Tape()
        with tape:
            preds = model.forward(images)
            breakdown = total_loss(preds, masks)
        value = breakdown.total.item()
        if not np.isfinite(value):
            raise ContractViolation(
                f"NaN/inf loss at step {step}; last finite loss {last_finite}"
            )
        last_finite = value
        grads = tape.backward(breakdown.total)
        optimizer.step(grads)
        log.append(breakdown.csv_row(step))
        if progress is not None:
            progress(step, value)
    return TrainResult(model, optimizer, log)


def evaluate(model: MlffNet, dataset) -> MetricReport:
    """Eval-mode forward (running norm statistics); p1 is the reported map."""
    if not dataset:
        raise ContractViolation("evaluation dataset is empty")
    model.set_training(False)
    reports = []
    for sample in dataset:
        preds = model.forward(sample.image)
        reports.append(metric_report(preds.p1, sample.mask))
    cols = np.array([r.as_tuple() for r in reports])
    return MetricReport(*cols.mean(axis=0))


def predict(model: MlffNet, sample):
    model.set_training(False)
    return model.forward(sample.image)


# ---------------------------------------------------------------------------
# gradient checking


def _module_of(name):
    head = name.split(".", 1)[0]
    return head


def gradcheck(variant, seed=0, size=32, per_module=10, step=1e-5,
              tolerance=1e-4, rng=None):
    """Central finite differences vs analytic gradients of the total loss.

    Samples ``per_module`` parameter entries from every top-level submodule
    and returns a report dict; raises GradCheckError above tolerance.
    """
    model = build_model(variant, EncoderConfig(), seed=seed)
    model.set_training(True)
    rng = rng or np.random.RandomState(seed + 1)
    image = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, size, size)))
    mask = np.zeros((1, 1, size, size))
    mask[:, :, size // 4 : 3 * size // 4, size // 4 : size // 2] = 1.0
    mask = Tensor(mask)

    def loss_value():
        preds = model.forward(image)
        return total_loss(preds, mask).total.item()

    tape = Tape()
    with tape:
        preds = model.forward(image)
        breakdown = total_loss(preds, mask)
    grads = tape.backward(breakdown.total)

    params = list(model.named_params())
    by_module = {}
    for name, p in params:
        by_module.setdefault(_module_of(name), []).append((name, p))

    entries = []
    for mod, plist in sorted(by_module.items()):
        sizes = np.array([p.size for _, p in plist])
        for _ in range(per_module):
            pi = int(rng.choice(len(plist), p=sizes / sizes.sum()))
            name, p = plist[pi]
            flat = int(rng.randint(p.size))
            entries.append((name, p, flat))

    worst = (0.0, None)
    results = []
    for name, p, flat in entries:
        orig = p.data.flat[flat]
        analytic = grads.get(p).flat[flat]
        p.data.flat[flat] = orig + step
        hi = loss_value()
        p.data.flat[flat] = orig - step
        lo = loss_value()
        p.data.flat[flat] = orig
        fd = (hi - lo) / (2 * step)
        denom = max(abs(analytic), abs(fd), 1e-4)
        rel = abs(analytic - fd) / denom
        results.append({"param": name, "index": flat, "analytic": analytic,
                        "fd": fd, "rel_err": rel})
        if rel > worst[0]:
            worst = (rel, f"{name}[{flat}]")
    report = {
        "variant": variant,
        "max_rel_err": worst[0],
        "worst_param": worst[1],
        "tolerance": tolerance,
        "checked": len(results),
        "results": results,
        "passed": worst[0] <= tolerance,
    }
    if not report["passed"]:
        raise GradCheckError(
            f"gradcheck failed for {variant}: {worst[1]} rel err {worst[0]:.3g}"
            f" > {tolerance}"
        )
    return report


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_ROWS = (("bas", "Bas."), ("mam", "+MAM"),
                 ("mam_hfem", "+MAM+HFEM"), ("full", "Ours"))


def ablate(cfg_base: TrainConfig, dataset_train, eval_sets, progress=None):
    """Train all four variants under identical seed/budget.

    ``eval_sets`` maps name -> dataset. Returns a list of row dicts
    (label, variant, param_count, final_loss, first_loss, metrics per set).
    """
    rows = []
    for variant, label in ABLATION_ROWS:
        cfg = TrainConfig(**{**cfg_base.__dict__, "variant": variant})
        result = train(cfg, dataset_train, progress=progress)
        first = float(result.log[0].split(",")[1])
        final = float(result.log[-1].split(",")[1])
        row = {
            "label": label,
            "variant": variant,
            "param_count": result.model.param_count(),
            "first_loss": first,
            "final_loss": final,
            "metrics": {},
        }
        for name, ds in eval_sets.items():
            rep = evaluate(result.model, ds)
            row["metrics"][name] = {"mDice": rep.m_dice, "mIoU": rep.m_iou}
        rows.append(row)
    return rows


def ablation_csv(rows):
    sets = list(rows[0]["metrics"].keys())
    header = "config," + ",".join(
        f"{name}_mDice,{name}_mIoU" for name in sets
    )
    lines = [header]
    for row in rows:
        cells = [row["label"]]
        for name in sets:
            m = row["metrics"][name]
            cells += [f"{m['mDice']:.3f}", f"{m['mIoU']:.3f}"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
