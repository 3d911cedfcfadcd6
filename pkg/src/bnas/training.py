"""Shared optimization loop: clipped SGD with momentum and a cosine schedule.

Full-precision parameters take the classic momentum update with weight decay
(norm parameters, PReLU slopes and architecture weights are exempt from
decay); binarized kernels route through their own two update rules, driven by
the same schedule learning rate for both eta values.  The global-norm clip is
applied to the whole gradient, kernel deltas included.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import binary
from .errors import NumericsError, ShapeError
from .util import now_ms, one_hot


def cosine_lr(lr0, epoch, total_epochs):
    """lr(e) = lr0/2 * (1 + cos(pi e / E)); exactly lr0 at 0 and 0 at E."""
    if total_epochs <= 0:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * min(epoch, total_epochs) / total_epochs))


@dataclass
class OptimConfig:
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    alpha_lr: float = 0.01
    alpha_optimizer: str = "sgd"  # or "adam"
    total_epochs: int = 1


class Optimizer:
    """Owns the velocity buffers; one instance per training run."""

    ADAM_BETAS = (0.9, 0.999)
    ADAM_EPS = 1e-8

    def __init__(self, cfg):
        if cfg.alpha_optimizer not in ("sgd", "adam"):
            raise ShapeError(f"unknown alpha optimizer {cfg.alpha_optimizer!r}")
        self.cfg = cfg
        self.epoch = 0
        self._velocity = {}
        self._adam = {}

    def lr(self):
        return cosine_lr(self.cfg.lr, self.epoch, self.cfg.total_epochs)

    def step(self, params, kernels, lr=None):
        lr = self.lr() if lr is None else lr
        deltas = [
            (k, binary.grad_kernel(k, k.g_xhat), binary.grad_amplitude(k, k.g_xhat))
            for k in kernels
        ]
        sq = sum(float(np.vdot(p.grad, p.grad)) for p in params)
        sq += sum(float(np.vdot(dx, dx)) + float(np.vdot(da, da)) for _, dx, da in deltas)
        gnorm = math.sqrt(sq)
        if not math.isfinite(gnorm):
            raise NumericsError("non-finite gradient norm; epoch aborted")
        clip = self.cfg.clip_norm
        scale = clip / gnorm if clip and gnorm > clip else 1.0
        for p in params:
            g = p.grad * scale
            if p.decay and self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p.value
            v = self._velocity.get(id(p))
            if v is None:
                v = np.zeros_like(p.value)
                self._velocity[id(p)] = v
            v *= self.cfg.momentum
            v += g
            p.value -= (lr * v).astype(p.value.dtype, copy=False)
        for k, dx, da in deltas:
            binary.update_params(k, dx * scale, da * scale, eta1=lr, eta2=lr)

    def alpha_step(self, alpha_params, lr=None):
        lr = self.cfg.alpha_lr if lr is None else lr
        if self.cfg.alpha_optimizer == "sgd":
            for a in alpha_params:
                a.values = a.values - lr * a.grad
            return
        b1, b2 = self.ADAM_BETAS
        for a in alpha_params:
            m, v, t = self._adam.get(id(a), (None, None, 0))
            if m is None or m.shape != a.grad.shape:  # fresh, or the edge was pruned
                m = np.zeros_like(a.grad, dtype=np.float64)
                v = np.zeros_like(a.grad, dtype=np.float64)
                t = 0
            t += 1
            m = b1 * m + (1 - b1) * a.grad
            v = b2 * v + (1 - b2) * np.square(a.grad, dtype=np.float64)
            self._adam[id(a)] = (m, v, t)
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            step = lr * mhat / (np.sqrt(vhat) + self.ADAM_EPS)
            a.values = (a.values - step).astype(a.values.dtype)


def batch_loss(logits, targets, kernels, loss_kind="mse"):
    """Total loss terms for one batch: data term plus amplitude terms of the
    active binarized kernels.  Returns (terms, dlogits)."""
    try:
        loss_fn, loss_back = binary.LOSSES[loss_kind]
    except KeyError:
        raise ShapeError(f"unknown loss {loss_kind!r}") from None
    data = loss_fn(logits, targets)
    amp = sum(binary.amplitude_loss(k) for k in kernels)
    return binary.LossTerms(data=data, amplitude=amp), loss_back(logits, targets)


def _zero_grads(params, kernels):
    for p in params:
        p.grad[...] = 0.0
    for k in kernels:
        k.zero_grad()


def train_epoch(network, batches, optimizer, lr=None, arch=None, loss_kind="mse"):
    """One pass over `batches`; returns the mean total loss weighted by batch
    size.  Only the active architecture's parameters are touched."""
    params, kernels = network.trainable(arch)
    loss_sum = 0.0
    count = 0
    for x, targets in batches:
        _zero_grads(params, kernels)
        logits = network.forward(x, True, arch)
        terms, dlogits = batch_loss(logits, targets, kernels, loss_kind)
        network.backward(dlogits, arch)
        optimizer.step(params, kernels, lr)
        loss_sum += terms.total * x.shape[0]
        count += x.shape[0]
    if count == 0:
        raise ShapeError("empty training split")
    return loss_sum / count


def joint_epoch(network, train_batches, val_batches, optimizer, lr=None, loss_kind="mse"):
    """Bilevel first-order epoch: per step, an architecture update on a
    validation batch (weights frozen) then a weight update on a train batch."""
    params, kernels = network.trainable(None)
    alphas = network.alpha_params()
    loss_sum = 0.0
    count = 0
    val_iter = iter(val_batches)
    for x, targets in train_batches:
        try:
            vx, vt = next(val_iter)
        except StopIteration:
            val_iter = iter(val_batches)
            vx, vt = next(val_iter)
        for a in alphas:
            a.zero_grad()
        _zero_grads(params, kernels)
        v_logits = network.forward(vx, True, None)
        _, v_dlogits = batch_loss(v_logits, vt, kernels, loss_kind)
        network.backward(v_dlogits, None)
        optimizer.alpha_step(alphas)
        _zero_grads(params, kernels)
        logits = network.forward(x, True, None)
        terms, dlogits = batch_loss(logits, targets, kernels, loss_kind)
        network.backward(dlogits, None)
        optimizer.step(params, kernels, lr)
        loss_sum += terms.total * x.shape[0]
        count += x.shape[0]
    if count == 0:
        raise ShapeError("empty training split")
    return loss_sum / count


def evaluate(network, images, labels, batch_size=256, arch=None):
    """Deterministic top-1 accuracy in eval mode."""
    n = images.shape[0]
    if n == 0:
        raise ShapeError("empty evaluation split")
    correct = 0
    for start in range(0, n, batch_size):
        x = images[start:start + batch_size]
        logits = network.forward(x, False, arch)
        correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / n


def progress_record(phase, epoch, lr, loss, acc=None, t0=None):
    rec = {"phase": phase, "epoch": epoch, "lr": lr, "loss": loss,
           "acc": acc, "wall_ms": None if t0 is None else now_ms() - t0}
    return rec


def onehot_targets(labels, classes, dtype=np.float32):
    return one_hot(labels, classes, dtype)
