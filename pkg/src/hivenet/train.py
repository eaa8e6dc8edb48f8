"""Optimizer, learning-rate schedule, training loop and sliding-window inference."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainConfig, from_text, to_text
from .io import Checkpoint, assign_params, save_checkpoint
from .losses import network_loss
from .metrics import dsc_jac
from .network import HiveNet, build_network, check_crop
from .phantom import LabeledVolume, Sample, random_augment, random_crop


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def data_rng(seed: int) -> np.random.Generator:
    # separate stream from the one that initialises the weights
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 1])))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    decoupled: bool = False

    @classmethod
    def for_params(cls, params, tc: TrainConfig | None = None) -> "OptimState":
        tc = tc or TrainConfig()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0,
                   tc.beta1, tc.beta2, tc.eps, tc.weight_decay, tc.decoupled_weight_decay)


def adam_step(params, grads, s: OptimState, lr: float) -> None:
    """In-place bias-corrected Adam update. Coupled weight decay adds
    ``wd * theta`` to the gradient; decoupled decay shrinks the weights directly."""
    if len(params) != len(grads) or len(params) != len(s.m):
        raise ValueError("params, grads and optimizer state must have equal length")
    s.step += 1
    c1 = 1.0 - s.beta1 ** s.step
    c2 = 1.0 - s.beta2 ** s.step
    for p, g, m, v in zip(params, grads, s.m, s.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if s.weight_decay and not s.decoupled:
            g = g + s.weight_decay * p
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        if s.weight_decay and s.decoupled:
            p -= lr * s.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


def lr_at(epoch: int, tc: TrainConfig | None = None) -> float:
    tc = tc or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return tc.lr0 * tc.lr_gamma ** (epoch // tc.lr_step)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

LOG_FIELDS = ("epoch", "iterations", "lr", "l_seg", "l_reg", "l_total", "train_jac", "val_jac")


@dataclass
class TrainState:
    cfg: RunConfig
    net: HiveNet
    opt: OptimState
    rng: np.random.Generator
    epoch: int = 0
    best_metric: float = -1.0
    stale_epochs: int = 0
    log: list[dict] = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        params = self.net.named_parameters()
        return Checkpoint(to_text(self.cfg), params, self.opt.step,
                          list(zip(self.opt.m, self.opt.v)), self.rng.bit_generator.state,
                          self.epoch, self.best_metric, self.stale_epochs)


def init_state(cfg: RunConfig) -> TrainState:
    cfg.validate()
    net = build_network(cfg.network, cfg.train.seed)
    opt = OptimState.for_params([p for _, p in net.named_parameters()], cfg.train)
    return TrainState(cfg, net, opt, data_rng(cfg.train.seed))


def state_from_checkpoint(ck: Checkpoint) -> TrainState:
    cfg = from_text(ck.config_text)
    net = build_network(cfg.network, cfg.train.seed)
    named = net.named_parameters()
    assign_params(named, ck.params)
    opt = OptimState.for_params([p for _, p in named], cfg.train)
    opt.step = ck.step
    for (m, v), (m0, v0) in zip(ck.moments, zip(opt.m, opt.v)):
        m0[...] = m.reshape(m0.shape)
        v0[...] = v.reshape(v0.shape)
    rng = data_rng(cfg.train.seed)
    if ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state
    return TrainState(cfg, net, opt, rng, ck.epoch, ck.best_metric, ck.stale_epochs)


def make_sample(vol: LabeledVolume, cfg: RunConfig, with_proximity: bool) -> Sample:
    prox = vol.proximity(cfg.proximity) if with_proximity else None
    return Sample(vol.image, vol.labels.astype(np.float64), prox)


def _as5(a):
    return a[None, None]


def train_step(state: TrainState, crop: Sample, lr: float) -> dict:
    """One forward/backward/update on a single crop."""
    net, cfg = state.net, state.cfg
    x, y = _as5(crop.image), _as5(crop.labels)
    d_t = _as5(crop.proximity) if crop.proximity is not None else None
    p, d = net.forward(x, train=True)
    total, l_seg, l_reg, gp, gd = network_loss(p, y, d, d_t, cfg.loss)
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss {total} at step {state.opt.step} (lr {lr:g})")
    net.zero_grad()
    net.backward(gp, gd)
    grads = [g for _, g in net.named_grads()]
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not math.isfinite(gnorm):
        raise NumericError(f"non-finite gradient norm at step {state.opt.step} (lr {lr:g}, "
                           f"loss {total:g})")
    adam_step([a for _, a in net.named_parameters()], grads, state.opt, lr)
    jac = dsc_jac(p[0, 0] >= 0.5, crop.labels >= 0.5)[1]
    return {"l_seg": l_seg, "l_reg": l_reg, "l_total": total, "train_jac": jac, "grad_norm": gnorm}


def train(cfg: RunConfig, volume: LabeledVolume, val_volume: LabeledVolume | None = None,
          state: TrainState | None = None, log_path=None, checkpoint_path=None,
          progress=None) -> TrainState:
    """Train on random crops of ``volume``.

    Early stopping watches validation JAC (training JAC when no validation
    volume is given) with ``cfg.train.patience`` epochs of patience. Without
    an explicit validation volume, ``validation_fraction`` holds out that
    share of trailing D slices.
    """
    state = state or init_state(cfg)
    tc = cfg.train
    crop_dims = cfg.network.input_crop
    if val_volume is None and tc.validation_fraction > 0:
        d = volume.dims[0]
        n_val = min(d - 1, max(1, int(round(d * tc.validation_fraction))))
        val_volume = volume.slab(d - n_val, d)
        volume = volume.slab(0, d - n_val)
    if tc.data_fraction < 1:
        volume = volume.truncated(tc.data_fraction)
    if any(c > d for c, d in zip(crop_dims, volume.dims)):
        raise ValueError(f"crop {crop_dims} does not fit the training volume {volume.dims}")
    use_reg = cfg.network.multitask and cfg.loss.lam < 1.0
    sample = make_sample(volume, cfg, use_reg)
    iters = state.opt.step
    while state.epoch < tc.max_epochs:
        lr = lr_at(state.epoch, tc)
        rows = []
        for _ in range(tc.crops_per_epoch):
            if tc.max_iterations and iters >= tc.max_iterations:
                break
            crop = random_crop(sample, crop_dims, state.rng)
            if tc.augment:
                crop = random_augment(crop, state.rng)
            rows.append(train_step(state, crop, lr))
            iters += 1
        if not rows:
            break
        row = {"epoch": state.epoch, "iterations": iters, "lr": lr}
        for k in ("l_seg", "l_total", "train_jac"):
            row[k] = float(np.mean([r[k] for r in rows]))
        row["l_reg"] = float(np.mean([r["l_reg"] for r in rows])) if use_reg else float("nan")
        if val_volume is not None:
            prob, _ = predict(state.net, val_volume.image, crop_dims, tta=False)
            row["val_jac"] = dsc_jac(prob >= 0.5, val_volume.labels > 0)[1]
        else:
            row["val_jac"] = float("nan")
        state.log.append(row)
        state.epoch += 1
        monitored = row["val_jac"] if val_volume is not None else row["train_jac"]
        if monitored > state.best_metric:
            state.best_metric, state.stale_epochs = monitored, 0
        else:
            state.stale_epochs += 1
        if progress:
            progress(row)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, state.checkpoint())
        if log_path:
            write_log(log_path, state.log)
        if state.stale_epochs >= tc.patience:
            break
        if tc.max_iterations and iters >= tc.max_iterations:
            break
    return state


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def window_starts(size: int, win: int, stride: int) -> list[int]:
    """Window origins covering ``[0, size)``; the last window is flush with the end."""
    if size <= win:
        return [0]
    starts = list(range(0, size - win + 1, stride))
    if starts[-1] != size - win:
        starts.append(size - win)
    return starts


def sliding_window(fn, volume: np.ndarray, window, stride=None):
    """Average ``fn`` over overlapping windows.

    ``fn`` maps a ``window``-shaped array to a tuple of same-shaped arrays (or
    ``None`` entries). Axes smaller than the window are zero padded
    symmetrically and cropped back afterwards.
    """
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in (stride or [max(1, w // 2) for w in window]))
    pad = [(max(0, w - s) // 2, max(0, w - s) - max(0, w - s) // 2)
           for w, s in zip(window, volume.shape)]
    vol = np.pad(volume, pad) if any(a or b for a, b in pad) else volume
    acc, count = None, np.zeros(vol.shape)
    grids = [window_starts(s, w, st) for s, w, st in zip(vol.shape, window, stride)]
    for a in grids[0]:
        for b in grids[1]:
            for c in grids[2]:
                sl = (slice(a, a + window[0]), slice(b, b + window[1]), slice(c, c + window[2]))
                outs = fn(vol[sl])
                if acc is None:
                    acc = [None if o is None else np.zeros(vol.shape) for o in outs]
                for buf, o in zip(acc, outs):
                    if buf is not None:
                        buf[sl] += o
                count[sl] += 1
    crop = tuple(slice(p0, p0 + s) for (p0, _), s in zip(pad, volume.shape))
    return tuple(None if buf is None else (buf / count)[crop] for buf in acc)


def predict(net: HiveNet, volume: np.ndarray, window=None, tta: bool = False, stride=None):
    """Probability volume (and normalized proximity volume for multitask nets).

    With ``tta`` the prediction is averaged over the four in-plane rotations,
    each mapped back to the original orientation.
    """
    window = tuple(window or net.cfg.input_crop)
    check_crop(window, net.cfg.pool_windows)
    volume = np.asarray(volume, dtype=np.float64)

    def run(vol, win):
        def fn(block):
            p, d = net.forward(block[None, None], train=False)
            return p[0, 0], (None if d is None else d[0, 0])
        return sliding_window(fn, vol, win, stride)

    if not tta:
        return run(volume, window)
    probs, proxs = [], []
    for k in range(4):
        win = window if k % 2 == 0 else (window[0], window[2], window[1])
        check_crop(win, net.cfg.pool_windows)
        p, d = run(np.rot90(volume, k, axes=(1, 2)), win)
        probs.append(np.rot90(p, -k, axes=(1, 2)))
        if d is not None:
            proxs.append(np.rot90(d, -k, axes=(1, 2)))
    prob = np.mean(probs, axis=0)
    return prob, (np.mean(proxs, axis=0) if proxs else None)


def load_for_inference(ck: Checkpoint) -> tuple[RunConfig, HiveNet]:
    cfg = from_text(ck.config_text)
    net = build_network(cfg.network, cfg.train.seed)
    assign_params(net.named_parameters(), ck.params)
    return cfg, net


def save_state(path, state: TrainState) -> None:
    save_checkpoint(Path(path), state.checkpoint())
