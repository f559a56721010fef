"""L1 training loop: Adam with bias correction, milestone learning-rate
halving, deterministic seeded batching, JSON-line logging, and exact
checkpoint continuation."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import BatchStream, cached_lr, load_png, modcrop
from .errors import ConfigError, ContractError, ShapeError, TrainingAborted
from .metrics import psnr_y
from .model import (ContrastNet, load_checkpoint, restore_parameters,
                    save_checkpoint, upscale_image)
from .tensor import Tensor


def l1_loss(pred, target):
    """Mean absolute error over all elements (subgradient 0 at exact ties)."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


def lr_at(iteration, cfg):
    """base_lr halved once per milestone already reached (iter >= milestone)."""
    halvings = sum(1 for m in cfg.milestones if iteration >= m)
    return cfg.base_lr * cfg.lr_decay ** halvings


class Adam:
    """Bias-corrected Adam over a named parameter table."""

    def __init__(self, params, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for table, incoming in ((self.m, state["m"]), (self.v, state["v"])):
            if set(table) != set(incoming):
                raise ConfigError("optimizer state does not match the parameter table")
            for name in table:
                table[name] = np.ascontiguousarray(incoming[name])


def adam_step(optimizer, lr):
    optimizer.step(lr)


def train(model_cfg, train_cfg: TrainConfig, manifest, out_dir,
          resume=None, iters=None, quiet=True):
    """Run the training loop; returns the list of logged records.

    Writes ``log.jsonl`` (append-only) and periodic ``ckpt_*.ckpt`` files
    under ``out_dir``.  ``iters`` caps the number of iterations actually run
    this call (checkpoint/resume tests use it); the schedule still follows
    ``train_cfg.total_iters``.  A non-finite loss aborts with diagnostics.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = ContrastNet(model_cfg, seed=train_cfg.seed)
    optimizer = Adam(dict(model.named_parameters()),
                     beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
    data_rng = np.random.default_rng(train_cfg.seed + 1)
    stream = BatchStream(manifest, train_cfg.batch_size, train_cfg.patch_size,
                         data_rng, use_augment=train_cfg.augment)
    start = 0

    if resume is not None:
        cfg, params, iteration, opt_state, rng_state = load_checkpoint(
            resume, expect_config=model_cfg)
        restore_parameters(model, params)
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        if rng_state is not None:
            stream.state = _rng_state_from_json(rng_state)
        start = iteration

    # Held-out validation image: first manifest entry.
    val_entry = manifest.entries[0]
    val_hr = modcrop(load_png(manifest.hr_path(val_entry)), manifest.scale)
    val_lr = cached_lr(manifest, val_entry)

    log_path = out_dir / "log.jsonl"
    records = []
    end = train_cfg.total_iters if iters is None else min(start + iters, train_cfg.total_iters)

    with open(log_path, "a") as log_fh:
        for it in range(start, end):
            lr = lr_at(it, train_cfg)
            lr_batch, hr_batch = stream.next_batch()
            pred = model(Tensor(lr_batch))
            loss = l1_loss(pred, Tensor(hr_batch))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingAborted(
                    f"non-finite loss {loss_val} at iteration {it} (lr={lr})")
            loss.backward()
            optimizer.step(lr)
            model.zero_grad()

            done = it + 1
            if done % train_cfg.log_every == 0 or done == end:
                sr = upscale_image(model, val_lr)
                record = {"iter": done, "lr": lr, "loss": loss_val,
                          "val_psnr": psnr_y(sr, val_hr, crop=manifest.scale)}
            else:
                record = {"iter": done, "lr": lr, "loss": loss_val}
            records.append(record)
            log_fh.write(json.dumps(record) + "\n")
            if not quiet and "val_psnr" in record:
                print(f"iter {done}  lr {lr:.2e}  loss {loss_val:.5f}  "
                      f"val_psnr {record['val_psnr']:.2f}", flush=True)

            if done % train_cfg.checkpoint_every == 0 or done == end:
                ckpt = out_dir / f"ckpt_{done:08d}.ckpt"
                save_checkpoint(ckpt, model, iteration=done, optimizer=optimizer,
                                rng_state=_rng_state_to_json(stream.state))

    return records


def _rng_state_to_json(state):
    """numpy Generator states contain big ints; JSON keeps them exact."""
    return json.loads(json.dumps(state))


def _rng_state_from_json(state):
    return state
