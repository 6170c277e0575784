"""Optimisation loop: AdamW, warm-up + cosine learning rate, distillation-weight schedules, EMA."""

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import check_int, check_positive
from .curation.negatives import AntonymDictionary
from .encoders import (
    EncoderConfig,
    ScenarioModel,
    Tokenizer,
    forward_batch,
    record_tensors,
    save_checkpoint,
)
from .exceptions import InvalidParameterError, TrainingDivergedError
from .objectives import EMAState, ema_update, total_loss

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATES = ("a photo of {label}", "a scene showing {label}", "{label}")

# (lambda_start, lambda_mid) for the two annealed settings studied for the KD weight.
_ANNEAL_MIDPOINTS = {1.0: 0.5, 10.0: 1.0}


@dataclass(frozen=True)
class LambdaSchedule:
    """Distillation weight as a function of training progress ``p = (e + 1) / E``.

    ``fixed`` returns ``value``. ``anneal`` holds ``start`` up to ``p1``, then
    cosine-decays to ``mid`` at ``p2`` and to ``end`` at ``p = 1``.
    """

    kind: str = "fixed"
    value: float = 1.0
    start: float = 1.0
    mid: float = 0.5
    end: float = 0.0
    p1: float = 0.4
    p2: float = 0.7

    def __post_init__(self):
        if self.kind not in ("fixed", "anneal"):
            raise InvalidParameterError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.p1 < self.p2 < 1.0:
            raise InvalidParameterError(f"need 0 < p1 < p2 < 1, got {self.p1}, {self.p2}")
        for name in ("value", "start", "mid", "end"):
            check_positive(getattr(self, name), name, strict=False)

    @classmethod
    def parse(cls, spec):
        """Parse ``fixed:V``, ``anneal:S-E`` or ``anneal:S-E:M`` (``none`` means fixed 0)."""
        spec = spec.strip().lower()
        if spec in ("none", "off", "no-kd"):
            return cls("fixed", 0.0)
        m = re.fullmatch(r"fixed:([0-9.eE+-]+)", spec)
        if m:
            return cls("fixed", float(m.group(1)))
        m = re.fullmatch(r"anneal:([0-9.eE+]+)-([0-9.eE+]+)(?::([0-9.eE+]+))?", spec)
        if m:
            start, end = float(m.group(1)), float(m.group(2))
            if m.group(3) is not None:
                mid = float(m.group(3))
            else:
                mid = (_ANNEAL_MIDPOINTS[start] if end == 0 and start in _ANNEAL_MIDPOINTS
                       else (start + end) / 2.0)
            return cls("anneal", start=start, mid=mid, end=end)
        raise InvalidParameterError(
            f"invalid lambda-kd schedule {spec!r}; expected fixed:V or anneal:S-E[:M]")

    def __call__(self, p):
        return lambda_kd(p, self)

    def describe(self):
        if self.kind == "fixed":
            return f"fixed:{self.value:g}"
        return f"anneal:{self.start:g}-{self.end:g}:{self.mid:g}"


def lambda_kd(p, sched):
    if not 0.0 <= p <= 1.0:
        raise InvalidParameterError(f"progress must lie in [0, 1], got {p}")
    if sched.kind == "fixed":
        return float(sched.value)
    if p <= sched.p1:
        return float(sched.start)
    if p <= sched.p2:
        t1 = (p - sched.p1) / (sched.p2 - sched.p1)
        return sched.mid + 0.5 * (sched.start - sched.mid) * (1.0 + math.cos(math.pi * t1))
    t2 = (p - sched.p2) / (1.0 - sched.p2)
    return sched.end + 0.5 * (sched.mid - sched.end) * (1.0 + math.cos(math.pi * t2))


def warmup_steps_for(total_steps, warmup_fraction):
    return max(1, int(math.floor(warmup_fraction * total_steps + 1e-9)))


def lr_at_step(step, total_steps, base_lr, warmup_fraction=0.1, start_factor=1e-3):
    """Linear warm-up from ``start_factor * base_lr``, then cosine down to 0 at the last step."""
    if not 0 <= step < total_steps:
        raise InvalidParameterError(f"step {step} outside [0, {total_steps})")
    w = warmup_steps_for(total_steps, warmup_fraction)
    if step < w:
        return base_lr * (start_factor + (1.0 - start_factor) * step / w)
    span = total_steps - 1 - w
    if span <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * (step - w) / span))


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 16
    base_lr: float = 2e-5
    weight_decay: float = 0.2
    warmup_fraction: float = 0.10
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lambda_ca: float = 1.0
    lambda_kd: LambdaSchedule = field(default_factory=LambdaSchedule)
    ema_decay: float = 0.9995
    ema_warmup_steps: int = 2000
    kd_lr_scale: float = 0.1
    caption_templates: tuple = DEFAULT_TEMPLATES
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lambda_kd, str):
            self.lambda_kd = LambdaSchedule.parse(self.lambda_kd)
        elif isinstance(self.lambda_kd, dict):
            self.lambda_kd = LambdaSchedule(**self.lambda_kd)
        check_int(self.epochs, "epochs", min_value=1)
        check_int(self.batch_size, "batch_size", min_value=1)
        check_positive(self.base_lr, "base_lr")
        check_positive(self.weight_decay, "weight_decay", strict=False)
        if not 0.0 < self.warmup_fraction < 1.0:
            raise InvalidParameterError("warmup_fraction must lie in (0, 1)")
        check_positive(self.lambda_ca, "lambda_ca")
        self.betas = tuple(self.betas)
        self.caption_templates = tuple(self.caption_templates)
        for t in self.caption_templates:
            if t.count("{label}") != 1:
                raise InvalidParameterError(f"template {t!r} must contain one {{label}} slot")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["caption_templates"] = list(self.caption_templates)
        return d


def build_optimizer(model, cfg):
    """AdamW with the distillation temperature in its own group (lr / 10, no weight decay)."""
    kd_params = [model.log_kd_temperature]
    main = [p for n, p in model.named_parameters() if n != "log_kd_temperature"]
    return torch.optim.AdamW(
        [
            {"params": main, "weight_decay": cfg.weight_decay, "lr_scale": 1.0},
            {"params": kd_params, "weight_decay": 0.0, "lr_scale": cfg.kd_lr_scale},
        ],
        lr=cfg.base_lr, betas=cfg.betas, eps=cfg.eps,
    )


def set_learning_rate(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr * group["lr_scale"]


def vocabulary_words(scene_vocab, templates=DEFAULT_TEMPLATES, antonyms=None):
    """All words the text encoders can see for a scene vocabulary."""
    antonyms = antonyms or AntonymDictionary()
    texts = list(scene_vocab.actions) + [c.name for c in scene_vocab.object_classes]
    texts += list(scene_vocab.predicates) + list(antonyms.mapping.values())
    texts += [t.replace("{label}", "") for t in templates]
    return sorted({w for t in texts for w in t.lower().split()})


def make_caption_fn(templates, rng):
    if not templates:
        return None

    def wrap(level, index, text):
        return templates[int(rng.integers(len(templates)))].format(label=text)

    return wrap


def set_determinism(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class TrainResult:
    history: list
    checkpoint: Path = None
    metrics_log: Path = None
    epoch_checkpoints: list = field(default_factory=list)


def fit_model(model, records, cfg, *, metrics_log=None, on_epoch_end=None):
    """Train ``model`` in place on ``records``; returns ``(history, ema, optimizer)``.

    Batches are drawn without replacement from a per-epoch seeded permutation
    with the last incomplete batch dropped.
    """
    items = [record_tensors(r, model.config) for r in records]
    steps_per_epoch = len(items) // cfg.batch_size
    if steps_per_epoch == 0:
        raise InvalidParameterError(
            f"{len(items)} training scenes cannot fill one batch of {cfg.batch_size}")
    total_steps = cfg.epochs * steps_per_epoch
    optimizer = build_optimizer(model, cfg)
    ema = EMAState.from_student(model, cfg.ema_decay, cfg.ema_warmup_steps)
    history = []
    log_fh = open(metrics_log, "w", encoding="utf-8") if metrics_log else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lam = lambda_kd((epoch + 1) / cfg.epochs, cfg.lambda_kd)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
            model.train()
            for b in range(steps_per_epoch):
                batch = [items[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                lr = lr_at_step(step, total_steps, cfg.base_lr, cfg.warmup_fraction)
                set_learning_rate(optimizer, lr)
                caption_rng = np.random.default_rng([cfg.seed, epoch, b])
                wrap = make_caption_fn(cfg.caption_templates, caption_rng)
                student = forward_batch(model, batch, wrap)
                teacher = None
                if lam > 0:
                    with torch.no_grad():
                        wrap = make_caption_fn(cfg.caption_templates,
                                               np.random.default_rng([cfg.seed, epoch, b]))
                        teacher = forward_batch(ema.teacher, batch, wrap)
                loss = total_loss(student, teacher, lam, cfg.lambda_ca,
                                  model.temperatures, model.kd_temperature)
                record = {"step": step, "epoch": epoch, **loss.as_dict(), "lr": lr}
                temps = model.temperatures.detach().tolist()
                record.update({f"temperature_{lvl}": t
                               for lvl, t in zip(("global", "object", "relation"), temps)})
                record["kd_temperature"] = float(model.kd_temperature.detach())
                if not torch.isfinite(loss.total):
                    record["error"] = "non-finite loss"
                    if log_fh:
                        log_fh.write(json.dumps(record) + "\n")
                    raise TrainingDivergedError(step, float(loss.total.detach()))
                optimizer.zero_grad(set_to_none=True)
                loss.total.backward()
                optimizer.step()
                ema_update(ema, model, step)
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                step += 1
            logger.info("epoch %d/%d  loss %.4f  lambda_kd %.3g", epoch + 1, cfg.epochs,
                        np.mean([h["L_total"] for h in history[-steps_per_epoch:]]), lam)
            if on_epoch_end is not None:
                on_epoch_end(epoch, optimizer, ema)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return history, ema, optimizer


def train(config, dataset_manifest, out_checkpoint, encoder_config=None, metrics_log=None):
    """Train on the manifest's train split; writes per-epoch and final checkpoints."""
    from .synth.dataset import DatasetManifest

    manifest = (dataset_manifest if isinstance(dataset_manifest, DatasetManifest)
                else DatasetManifest.load(dataset_manifest))
    out_checkpoint = Path(out_checkpoint)
    out_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    metrics_log = Path(metrics_log) if metrics_log else out_checkpoint.with_suffix(".metrics.jsonl")
    enc_cfg = encoder_config or EncoderConfig(image_size=manifest.config.image_size)
    enc_cfg = EncoderConfig(**{**enc_cfg.to_dict(), "vocab": []})
    set_determinism(config.seed)
    tokenizer = Tokenizer(vocabulary_words(manifest.vocabulary(), DEFAULT_TEMPLATES))
    model = ScenarioModel(enc_cfg, tokenizer)
    records = manifest.load_split("train")
    result = TrainResult(history=[], checkpoint=out_checkpoint, metrics_log=metrics_log)

    def payload(epoch, optimizer, ema):
        return {"optimizer": optimizer.state_dict(), "ema": ema.state_dict(),
                "train_config": config.to_dict(), "epoch": epoch + 1,
                "scene_config": manifest.data["config"]}

    def on_epoch_end(epoch, optimizer, ema):
        path = out_checkpoint.with_name(f"{out_checkpoint.stem}.epoch{epoch + 1:02d}{out_checkpoint.suffix}")
        save_checkpoint(path, model, **payload(epoch, optimizer, ema))
        result.epoch_checkpoints.append(path)

    history, ema, optimizer = fit_model(model, records, config, metrics_log=metrics_log,
                                        on_epoch_end=on_epoch_end)
    save_checkpoint(out_checkpoint, model, **payload(config.epochs - 1, optimizer, ema))
    result.history = history
    return result
