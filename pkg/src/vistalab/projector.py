"""Linear visual projector trained with cross-entropy plus text-SAE reconstruction."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sae import SaeModel
from .synthworld import EncoderSim, Scene, World, caption_prompt, encode_scenes, gen_qa
from .toylm import PAD, ToyLm, generate

log = logging.getLogger(__name__)


class VistaConfigError(ValueError):
    pass


class ProjectorDivergence(RuntimeError):
    pass


@dataclass
class VistaConfig:
    layers: tuple[int, ...] = (0, 1, 2, 3, 4)
    sae_weight: float = 0.1
    stages: tuple[str, ...] = ("pretrain_captions", "finetune_qa")
    sae_stages: tuple[str, ...] = ("pretrain_captions", "finetune_qa")
    epochs: int = 10
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    init_std: float = 4.0
    eval_scenes: int = 40

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.stages = tuple(self.stages)
        self.sae_stages = tuple(self.sae_stages)

    def constrained(self, n_layers: int) -> tuple[int, ...]:
        """Constrained layer set clipped to the model depth."""
        return tuple(l for l in self.layers if 0 <= l < n_layers)


class Projector:
    """e_v = v W_p^T + b_p, mapping [N, D_v] visual tokens into [N, D_llm]."""

    def __init__(self, w, b):
        self.w = ad.as_tensor(w)
        self.b = ad.as_tensor(b)

    @classmethod
    def init(cls, d_v: int, d_llm: int, seed: int = 0, std: float = 1.0) -> "Projector":
        rng = np.random.default_rng([seed, 505])
        p = cls(rng.normal(0, std / math.sqrt(d_v), (d_llm, d_v)), np.zeros(d_llm))
        p.w.requires_grad = p.b.requires_grad = True
        return p

    @property
    def d_v(self) -> int:
        return self.w.shape[1]

    @property
    def d_llm(self) -> int:
        return self.w.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def __call__(self, v) -> Tensor:
        return project(self, v)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"w_p": self.w.data, "b_p": self.b.data}

    def checksum(self) -> str:
        return hashlib.sha256(self.w.data.tobytes() + self.b.data.tobytes()).hexdigest()

    @classmethod
    def from_state(cls, state: dict) -> "Projector":
        return cls(np.array(state["w_p"]), np.array(state["b_p"]))


def project(p: Projector, v) -> Tensor:
    v = ad.as_tensor(v)
    if v.shape[-1] != p.d_v:
        raise ad.DimensionError(f"projector expects width {p.d_v}, got {v.shape}")
    lead = v.shape[:-1]
    flat = v.reshape(-1, p.d_v) @ p.w.T
    return ad.add_bias(flat, p.b).reshape(*lead, p.d_llm)


@dataclass
class LossBreakdown:
    l_ce: float
    l_sae: float
    l_total: float
    per_layer: dict[int, float] = field(default_factory=dict)
    total: Tensor | None = field(default=None, repr=False)

    def record(self) -> dict:
        return {"l_ce": self.l_ce, "l_sae": self.l_sae, "l_total": self.l_total,
                "per_layer": {str(k): v for k, v in sorted(self.per_layer.items())}}


@dataclass
class Example:
    """One multimodal training item: visual tokens, prompt ids, target ids."""

    visual: np.ndarray
    prompt: list[int]
    target: list[int]


def _assemble(p: Projector, lm: ToyLm, batch: list[Example]):
    n = batch[0].visual.shape[0]
    texts = [ex.prompt + ex.target[:-1] for ex in batch]
    t_text = max(len(t) for t in texts)
    ids = np.full((len(batch), t_text), PAD, dtype=np.int64)
    targets = np.full((len(batch), n + t_text), PAD, dtype=np.int64)
    mask = np.zeros((len(batch), n + t_text), dtype=bool)
    for i, (ex, t) in enumerate(zip(batch, texts)):
        ids[i, :len(t)] = t
        start = n + len(ex.prompt) - 1
        targets[i, start:start + len(ex.target)] = ex.target
        mask[i, start:start + len(ex.target)] = True
    vis = project(p, np.stack([ex.visual for ex in batch]))
    seq = ad.concat([vis, lm.embed_tokens(ids)], axis=1)
    return seq, targets, mask, n


def sae_penalty(taps: dict[int, Tensor], saes: dict[int, SaeModel], layers, n_visual: int):
    """(1/|M|) sum_l mean over visual rows of ||SAE_l(e) - e||^2; returns (tensor, per-layer).

    Errors are measured in each SAE's scaled frame so layers contribute comparably.
    """
    per: dict[int, float] = {}
    total = None
    for l in layers:
        e = taps[l][:, :n_visual, :]
        e = e.reshape(-1, e.shape[-1])
        err = saes[l].scaled_error(e).sum() * (1.0 / e.shape[0])
        per[l] = err.item()
        total = err if total is None else total + err
    if total is None:
        return Tensor(0.0), per
    return total * (1.0 / len(per)), per


def vista_loss(p: Projector, lm: ToyLm, saes: dict[int, SaeModel], batch: list[Example],
               cfg: VistaConfig, use_sae: bool = True) -> LossBreakdown:
    layers = cfg.constrained(lm.n_layers) if use_sae else ()
    missing = [l for l in layers if l not in saes]
    if missing:
        raise VistaConfigError(f"no trained SAE for constrained layers {missing}")
    seq, targets, mask, n = _assemble(p, lm, batch)
    logits, taps = lm.forward(seq, layers)
    b, t, v = logits.shape
    l_ce = ad.softmax_cross_entropy(logits.reshape(b * t, v), targets.reshape(-1),
                                    mask.reshape(-1))
    l_sae, per = sae_penalty(taps, saes, layers, n)
    total = l_ce + l_sae * cfg.sae_weight
    return LossBreakdown(l_ce.item(), l_sae.item(), total.item(), per, total)


# --- datasets -----------------------------------------------------------------------------

def caption_examples(world: World, scenes: list[Scene], visual: np.ndarray) -> list[Example]:
    prompt = caption_prompt(world)
    return [Example(visual[i], prompt, s.caption[1:]) for i, s in enumerate(scenes)]


def qa_examples(world: World, scenes: list[Scene], visual: np.ndarray) -> list[Example]:
    out = []
    for i, s in enumerate(scenes):
        for q, a in gen_qa(s, world):
            out.append(Example(visual[i], q, a))
    return out


def stage_examples(stage: str, world: World, scenes, visual) -> list[Example]:
    if stage == "pretrain_captions":
        return caption_examples(world, scenes, visual)
    if stage == "finetune_qa":
        return qa_examples(world, scenes, visual)
    raise VistaConfigError(f"unknown stage {stage!r}")


def answer_accuracy(p: Projector, lm: ToyLm, examples: list[Example]) -> float:
    """Exact-match rate of greedy answers against targets."""
    if not examples:
        return float("nan")
    hits = 0
    for ex in examples:
        prefix = ad.concat([project(p, ex.visual), lm.embed_tokens(ex.prompt)], axis=0)
        out = generate(lm, prefix, len(ex.target) + 2)
        hits += out == list(ex.target)
    return hits / len(examples)


def train_projector(cfg: VistaConfig, world: World, lm: ToyLm, saes: dict[int, SaeModel],
                    encoder: EncoderSim, train_scenes: list[Scene], heldout: list[Scene],
                    use_sae: bool = True) -> tuple[Projector, list[dict]]:
    """Two-stage training of the projector with LM and SAEs frozen."""
    if not lm.frozen:
        raise VistaConfigError("language model must be frozen before projector training")
    layers = cfg.constrained(lm.n_layers)
    if use_sae:
        missing = [l for l in layers if l not in saes]
        if missing:
            raise VistaConfigError(f"no trained SAE for constrained layers {missing}")
    proj = Projector.init(encoder.d_v, lm.d_model, cfg.seed, cfg.init_std)
    opt = ad.Adam(proj.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 506])
    vis_train = encode_scenes(encoder, train_scenes)
    vis_held = encode_scenes(encoder, heldout)
    history: list[dict] = []
    if cfg.stages:
        first = stage_examples(cfg.stages[0], world, heldout, vis_held)[:cfg.eval_scenes]
        ev = vista_loss(proj, lm, saes, first, cfg, bool(saes))
        history.append({"stage": "init", "epoch": -1, **ev.record(), "accuracy": None})
    for stage in cfg.stages:
        train = stage_examples(stage, world, train_scenes, vis_train)
        held = stage_examples(stage, world, heldout, vis_held)
        held_eval = held[:cfg.eval_scenes]
        stage_sae = use_sae and stage in cfg.sae_stages
        steps = cfg.epochs * max(1, len(train) // cfg.batch_size)
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train))
            for s in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
                batch = [train[i] for i in order[s:s + cfg.batch_size]]
                br = vista_loss(proj, lm, saes, batch, cfg, stage_sae)
                if not np.isfinite(br.l_total):
                    raise ProjectorDivergence(
                        f"{stage} epoch {epoch}: loss {br.l_total} (l_ce={br.l_ce}, "
                        f"l_sae={br.l_sae})")
                opt.zero_grad()
                br.total.backward()
                opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / steps))
                opt.step()
                step += 1
            ev = vista_loss(proj, lm, saes, held_eval, cfg, bool(saes))
            rec = {"stage": stage, "epoch": epoch, **ev.record(),
                   "accuracy": answer_accuracy(proj, lm, held_eval)}
            history.append(rec)
            log.info("projector %s epoch %d ce %.4f sae %.4f acc %.3f", stage, epoch,
                     ev.l_ce, ev.l_sae, rec["accuracy"])
    proj.w.requires_grad = proj.b.requires_grad = False
    proj.w.grad = proj.b.grad = None
    return proj, history


def vista_config_dict(cfg: VistaConfig) -> dict:
    d = asdict(cfg)
    for k in ("layers", "stages", "sae_stages"):
        d[k] = list(d[k])
    return d
