"""Loss, Adam optimizer, training regimes and gradient verification.

Training always works on a copy of the incoming bundle, so callers can
diff parameters before/after to verify freeze contracts bit-exactly.
Regimes:

* ``train_base``        -- one-decoder net on exocentric data ("SSTU_coco")
* ``finetune`` f1/f2    -- balanced data, encoder frozen / nothing frozen
* ``train_ego_decoder`` -- two-decoder net, encoder+exo frozen; exocentric
                           samples become all-background targets for the
                           ego head ("SSTU")
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import metrics as metrics_mod
from .datasets import AugmentConfig, augment
from .model import WeightBundle, aggregate_max, decode, encode

ENCODER_PREFIXES = ("enc",)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 10
    freeze_set: tuple[str, ...] = ()
    seed: int = 0
    # optional early exit once the validation mIoU target is reached
    stop_at_val_miou: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie strictly in (0, 1)")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _is_frozen(name, freeze_set):
    return any(name.startswith(p) for p in freeze_set)


def _is_buffer(name):
    # batch-norm running statistics: updated by the forward pass, not Adam
    return name.endswith(".mean") or name.endswith(".var")


def bce_loss(pred, target):
    """Mean binary cross-entropy over pixels.

    Returns (loss, gradient w.r.t. the pre-sigmoid logits) with the
    gradient shortcut (p - t)/N; predictions are clamped to
    [1e-7, 1-1e-7] before the logs.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} shapes differ")
    p = np.clip(pred, 1e-7, 1.0 - 1e-7)
    t = target.astype(p.dtype)
    loss = float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))
    grad_logits = (p - t) / p.size
    return loss, grad_logits


def adam_step(params, grads, state: OptimizerState, config: TrainConfig):
    """Bias-corrected Adam update.

    Frozen parameters (and running-stat buffers) are carried through as
    the same objects; their moments are never created or advanced.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    lr, eps = config.learning_rate, config.eps_adam
    out = dict(params)
    for name, g in grads.items():
        if g is None or _is_frozen(name, config.freeze_set) or _is_buffer(name):
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * np.square(g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        out[name] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return out, state


# ------------------------------------------------------------ training loop

def _forward_for_decoder(bundle, image, prefix, tape, frozen, update_running=True):
    skips, bottom = encode(bundle, image, tape, mode="train",
                           update_running=update_running, frozen=frozen)
    logits, prob = decode(bundle, prefix, skips, bottom, tape, mode="train",
                          update_running=update_running, frozen=frozen)
    return logits, prob


def _val_miou(bundle, val_set, decoder_prefix):
    def predict(image):
        skips, bottom = encode(bundle, image)
        if bundle.arch.decoders == 1:
            return decode(bundle, "", skips, bottom)[1]
        if decoder_prefix:
            return decode(bundle, decoder_prefix, skips, bottom)[1]
        return aggregate_max(decode(bundle, "exo.", skips, bottom)[1],
                             decode(bundle, "ego.", skips, bottom)[1])
    return metrics_mod.evaluate_set(predict, val_set).miou


def _run_training(bundle, samples, config, decoder_prefix, target_fn, tag,
                  augment_cfg=None, val_set=None, log=None):
    if not samples:
        raise ValueError("training requires a non-empty dataset")
    work = bundle.copy()
    work.tag = tag
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    # zero learning rate is a dry run: leave the running statistics alone
    # too, so the bundle round-trips bit-exactly
    update_running = config.learning_rate != 0.0

    def frozen(name):
        return _is_frozen(name, config.freeze_set)

    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grad_sum: dict[str, np.ndarray] = {}
            for si in batch:
                s = samples[si]
                if augment_cfg is not None:
                    s = augment(s, augment_cfg, rng)
                tape = model_mod.nn.GradTape()
                logits, prob = _forward_for_decoder(work, s.image, decoder_prefix,
                                                    tape, frozen, update_running)
                loss, dlogits = bce_loss(prob, target_fn(s))
                losses.append(loss)
                tape.backward(dlogits[None], wrt=logits)
                # fixed accumulation order over the batch keeps runs reproducible
                for name, p in work.params.items():
                    if frozen(name) or _is_buffer(name):
                        continue
                    g = tape.grad(p)
                    if g is None:
                        continue
                    acc = grad_sum.get(name)
                    grad_sum[name] = g.copy() if acc is None else acc + g
            scale = 1.0 / len(batch)
            grads = {n: (g * scale).astype(np.float32) for n, g in grad_sum.items()}
            work.params, state = adam_step(work.params, grads, state, config)
        mean_loss = float(np.mean(losses))
        vm = _val_miou(work, val_set, decoder_prefix) if val_set else float("nan")
        line = f"epoch {epoch} loss {mean_loss:.6f} val_miou {vm:.4f}"
        history.append(line)
        if log is not None:
            log(line)
        if (config.stop_at_val_miou is not None and val_set
                and vm >= config.stop_at_val_miou):
            break
    return work, history


def train_base(bundle, dataset, config: TrainConfig, augment_cfg=None,
               val_set=None, log=None):
    """Base training of a one-decoder net on exocentric-style samples."""
    if bundle.arch.decoders != 1:
        raise ValueError("train_base expects a one-decoder bundle")
    return _run_training(bundle, list(dataset), config, "",
                         target_fn=lambda s: s.mask, tag="SSTU_coco",
                         augment_cfg=augment_cfg, val_set=val_set, log=log)


def finetune(bundle, balanced_dataset, mode, config: TrainConfig,
             augment_cfg=None, val_set=None, log=None):
    """Fine-tuning: f1 freezes the encoder, f2 trains everything."""
    if bundle.arch.decoders != 1:
        raise ValueError("finetune expects a one-decoder bundle")
    if mode not in ("f1", "f2"):
        raise ValueError(f"finetune mode must be 'f1' or 'f2', got {mode!r}")
    freeze = ENCODER_PREFIXES if mode == "f1" else ()
    cfg = TrainConfig(**{**config.__dict__, "freeze_set": freeze})
    return _run_training(bundle, list(balanced_dataset), cfg, "",
                         target_fn=lambda s: s.mask, tag=f"SSTU_{mode}",
                         augment_cfg=augment_cfg, val_set=val_set, log=log)


def train_ego_decoder(bundle2, balanced_dataset, config: TrainConfig,
                      augment_cfg=None, val_set=None, log=None):
    """Train the ego decoder of a two-decoder bundle, everything else frozen.

    Exocentric samples are treated as background for the ego head: their
    target masks are all zero.  The loss sees p_ego only.
    """
    if bundle2.arch.decoders != 2:
        raise ValueError("train_ego_decoder expects a two-decoder bundle")
    freeze = ENCODER_PREFIXES + ("exo.",)
    cfg = TrainConfig(**{**config.__dict__, "freeze_set": freeze})

    def target_fn(s):
        if s.origin == "ego":
            return s.mask
        return np.zeros_like(s.mask)

    return _run_training(bundle2, list(balanced_dataset), cfg, "ego.",
                         target_fn=target_fn, tag="SSTU",
                         augment_cfg=augment_cfg, val_set=val_set, log=log)


# ---------------------------------------------------------- gradient check

def _loss_only(bundle, image, target, prefix):
    tape = None
    skips, bottom = encode(bundle, image, tape, mode="train", update_running=False)
    _, prob = decode(bundle, prefix, skips, bottom, tape, mode="train",
                     update_running=False)
    loss, _ = bce_loss(prob, target)
    return loss


def gradcheck(bundle, image, target, step=1e-3, sample_fraction=0.01, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a random sample of the trainable parameters.  The
    relu/pool decision pattern of the reference forward pass is pinned
    during probing: the analytic gradient is the derivative of that smooth
    branch, and at the probing step the raw piecewise surface would hit
    argmax switches that turn central differences into slope averages.
    The relative-error denominator is floored at 1e-2 so the noise floor
    on near-zero gradients does not dominate the metric.
    """
    work = bundle.copy()
    work.params = {k: v.astype(np.float64) for k, v in work.params.items()}
    image = image.astype(np.float64)
    prefix = "" if work.arch.decoders == 1 else "exo."

    trace = model_mod.nn.PatternTrace()
    tape = model_mod.nn.GradTape()
    with model_mod.nn.record_patterns(trace):
        skips, bottom = encode(work, image, tape, mode="train", update_running=False)
        logits, prob = decode(work, prefix, skips, bottom, tape, mode="train",
                              update_running=False)
    _, dlogits = bce_loss(prob, target)
    tape.backward(dlogits[None], wrt=logits)

    names = [n for n in work.params if not _is_buffer(n)]
    sizes = np.array([work.params[n].size for n in names])
    cumulative = np.cumsum(sizes)
    total = int(cumulative[-1])
    n_probe = max(1, int(round(total * sample_fraction)))
    rng = np.random.default_rng(seed)
    flat_picks = np.sort(rng.choice(total, size=n_probe, replace=False))

    max_rel = 0.0
    for flat in flat_picks:
        ti = int(np.searchsorted(cumulative, flat, side="right"))
        idx = int(flat - (cumulative[ti - 1] if ti else 0))
        name = names[ti]
        p = work.params[name]
        analytic = tape.grad(p)
        a = 0.0 if analytic is None else float(analytic.flat[idx])
        orig = p.flat[idx]
        p.flat[idx] = orig + step
        with model_mod.nn.replay_patterns(trace):
            lp = _loss_only(work, image, target, prefix)
        p.flat[idx] = orig - step
        with model_mod.nn.replay_patterns(trace):
            lm = _loss_only(work, image, target, prefix)
        p.flat[idx] = orig
        n = (lp - lm) / (2.0 * step)
        rel = abs(a - n) / max(abs(a), abs(n), 1e-2)
        max_rel = max(max_rel, rel)
    return max_rel
