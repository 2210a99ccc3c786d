"""Next-token pretraining for the toy LM."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .model import LmConfig, ToyLm
from .vocab import PAD

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    def __init__(self, message: str, curve: list[float]):
        super().__init__(f"{message}; loss curve tail: {[round(x, 4) for x in curve[-5:]]}")
        self.curve = curve


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 100
    heldout_frac: float = 0.1
    threshold: float = 0.6
    eval_every: int = 250
    seed: int = 0
    lm: LmConfig = field(default_factory=LmConfig)


def pad_batch(seqs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to a common length. Returns (tokens, overlay, valid-target mask)."""
    t = max(len(s) for s in seqs)
    toks = np.full((len(seqs), t), PAD, dtype=np.int64)
    over = np.full((len(seqs), t), -1, dtype=np.int64)
    mask = np.zeros((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        toks[i, :len(s)] = s.tokens
        over[i, :len(s)] = s.overlay
        mask[i, :len(s) - 1] = True
    return toks, over, mask


def lm_loss(model: ToyLm, seqs) -> ad.Tensor:
    toks, over, mask = pad_batch(seqs)
    b, t = toks.shape
    logits, _ = model.forward(model.embed_tokens(toks, over))
    targets = np.concatenate([toks[:, 1:], np.full((b, 1), PAD)], axis=1)
    return ad.softmax_cross_entropy(logits.reshape(b * t, -1), targets.reshape(-1),
                                    mask.reshape(-1))


def heldout_loss(model: ToyLm, seqs, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        n = sum(len(s) - 1 for s in chunk)
        total += lm_loss(model, chunk).item() * n
        count += n
    return total / count


def pretrain_lm(corpus, cfg: PretrainConfig | None = None) -> tuple[ToyLm, dict]:
    """Train on ``corpus`` (list of TextSeq), freeze, and return the model plus a report."""
    cfg = cfg or PretrainConfig()
    rng = np.random.default_rng([cfg.seed, 202])
    order = rng.permutation(len(corpus))
    n_held = max(1, int(len(corpus) * cfg.heldout_frac))
    held = [corpus[i] for i in order[:n_held]]
    train = [corpus[i] for i in order[n_held:]]
    model = ToyLm(cfg.lm)
    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    untrained = heldout_loss(model, held)
    curve = [untrained]
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(train), size=cfg.batch_size)
        loss = lm_loss(model, [train[i] for i in idx])
        opt.zero_grad()
        loss.backward()
        warm = min(1.0, step / cfg.warmup)
        decay = 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        opt.lr = cfg.lr * warm * max(decay, 0.05)
        opt.step()
        if not np.isfinite(loss.item()):
            raise TrainingFailure(f"non-finite loss at step {step}", curve)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            curve.append(heldout_loss(model, held))
            log.info("lm step %d heldout %.4f", step, curve[-1])
    final = curve[-1]
    if final > cfg.threshold * untrained:
        raise TrainingFailure(
            f"held-out loss {final:.4f} above {cfg.threshold} x untrained {untrained:.4f}", curve)
    model.freeze()
    return model, {"untrained_loss": untrained, "heldout_loss": final, "curve": curve}
