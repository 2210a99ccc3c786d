"""Sparse autoencoders on residual-stream activations, plus latent labeling."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

log = logging.getLogger(__name__)


class SaeConfigError(ValueError):
    pass


class NoDirectionError(LookupError):
    pass


@dataclass
class SaeTrainConfig:
    d_sae: int = 384
    lam: float = 1.4
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-2
    seed: int = 0
    resample: bool = True
    lam_warm_mult: float = 8.0
    normalize: bool = True


class SaeModel:
    """E(x) = act(W_enc (s x - b_dec) + b_enc); D(z) = (W_dec z + b_dec) / s.

    ``s`` is a fixed input scale chosen at training time so that the scaled training rows
    have mean squared norm ``d_in``. It keeps lambda and reconstruction errors comparable
    across layers whose residual norms differ by an order of magnitude.
    """

    def __init__(self, w_enc, b_enc, w_dec, b_dec, layer: int = 0, activation: str = "relu",
                 theta: float = 0.0, lam: float = 0.0, scale: float = 1.0):
        self.w_enc = ad.as_tensor(w_enc)
        self.b_enc = ad.as_tensor(b_enc)
        self.w_dec = ad.as_tensor(w_dec)
        self.b_dec = ad.as_tensor(b_dec)
        if activation not in ("relu", "jumprelu"):
            raise SaeConfigError(f"unknown activation {activation!r}")
        if self.d_sae <= self.d_in:
            raise SaeConfigError(f"d_sae {self.d_sae} must exceed input width {self.d_in}")
        self.layer = layer
        self.activation = activation
        self.theta = float(theta)
        self.lam = float(lam)
        if not scale > 0:
            raise SaeConfigError(f"input scale must be positive, got {scale}")
        self.scale = float(scale)

    @property
    def d_sae(self) -> int:
        return self.w_enc.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_enc.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w_enc, self.b_enc, self.w_dec, self.b_dec]

    def freeze(self) -> "SaeModel":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def pre_activation(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"SAE expects width {self.d_in}, got {x.shape}")
        centered = ad.add_bias(x * self.scale, self.b_dec * -1.0)
        return ad.add_bias(centered @ self.w_enc.T, self.b_enc)

    def encode(self, x) -> Tensor:
        pre = self.pre_activation(x)
        codes = ad.relu(pre)
        if self.activation == "jumprelu":
            codes = codes * Tensor(pre.data > self.theta)
        return codes

    def decode(self, codes) -> Tensor:
        codes = ad.as_tensor(codes)
        return ad.add_bias(codes @ self.w_dec.T, self.b_dec) * (1.0 / self.scale)

    def __call__(self, x) -> Tensor:
        return self.decode(self.encode(x))

    def loss(self, x) -> Tensor:
        """Batch mean of ||s x - s x_hat||^2 + lam * ||E(x)||_1."""
        x = ad.as_tensor(x)
        codes = self.encode(x)
        err = self.scaled_error(x, codes).sum()
        return (err + codes.sum() * self.lam) * (1.0 / x.shape[0])

    def scaled_error(self, x, codes=None) -> Tensor:
        """Per-row squared reconstruction error measured in the scaled frame."""
        x = ad.as_tensor(x)
        codes = self.encode(x) if codes is None else codes
        diff = self.decode(codes) - x
        return (diff * self.scale).square().sum(axis=-1)

    def normalize_decoder(self) -> None:
        self.w_dec.data /= np.linalg.norm(self.w_dec.data, axis=0, keepdims=True)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.data.tobytes())
        h.update(repr(self.scale).encode())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"w_enc": self.w_enc.data, "b_enc": self.b_enc.data,
                "w_dec": self.w_dec.data, "b_dec": self.b_dec.data}

    def manifest(self) -> dict:
        return {"kind": "sae", "layer": self.layer, "activation": self.activation,
                "theta": self.theta, "lam": self.lam, "scale": self.scale}

    @classmethod
    def from_state(cls, state: dict, manifest: dict) -> "SaeModel":
        return cls(state["w_enc"], state["b_enc"], state["w_dec"], state["b_dec"],
                   layer=manifest["layer"], activation=manifest["activation"],
                   theta=manifest["theta"], lam=manifest["lam"],
                   scale=manifest.get("scale", 1.0)).freeze()

    def with_activation(self, activation: str, theta: float = 0.0) -> "SaeModel":
        return SaeModel(self.w_enc.data, self.b_enc.data, self.w_dec.data, self.b_dec.data,
                        self.layer, activation, theta, self.lam, self.scale).freeze()


def sae_encode(m: SaeModel, x) -> Tensor:
    return m.encode(x)


def sae_decode(m: SaeModel, codes) -> Tensor:
    return m.decode(codes)


def codes_np(m: SaeModel, x: np.ndarray) -> np.ndarray:
    """Encode a plain array without building a graph."""
    pre = (x * m.scale - m.b_dec.data) @ m.w_enc.data.T + m.b_enc.data
    codes = np.maximum(pre, 0.0)
    if m.activation == "jumprelu":
        codes = np.where(pre > m.theta, codes, 0.0)
    return codes


def reconstruct_np(m: SaeModel, x: np.ndarray) -> np.ndarray:
    return (codes_np(m, x) @ m.w_dec.data.T + m.b_dec.data) / m.scale


def init_sae(d_in: int, cfg: SaeTrainConfig, data_mean: np.ndarray | None = None,
             layer: int = 0, scale: float = 1.0) -> SaeModel:
    rng = np.random.default_rng([cfg.seed, 303, layer])
    w_dec = rng.standard_normal((d_in, cfg.d_sae))
    w_dec /= np.linalg.norm(w_dec, axis=0, keepdims=True)
    b_dec = np.zeros(d_in) if data_mean is None else scale * np.array(data_mean, dtype=np.float64)
    m = SaeModel(w_dec.T.copy(), np.zeros(cfg.d_sae), w_dec, b_dec, layer=layer, lam=cfg.lam,
                 scale=scale)
    for p in m.parameters():
        p.requires_grad = True
    return m


def _resample(m: SaeModel, opt: ad.Adam, data: np.ndarray, dead: np.ndarray) -> None:
    """Point dead latents at the worst-reconstructed inputs."""
    recon = reconstruct_np(m, data)
    resid = data - recon
    worst = np.argsort(-(resid ** 2).sum(axis=1), kind="stable")[:len(dead)]
    dirs = resid[worst]
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    alive = np.setdiff1d(np.arange(m.d_sae), dead)
    enc_scale = np.linalg.norm(m.w_enc.data[alive], axis=1).mean() if alive.size else 1.0
    m.w_dec.data[:, dead] = dirs.T
    m.w_enc.data[dead] = dirs * enc_scale * 0.2
    m.b_enc.data[dead] = 0.0
    opt.reset_state(m.w_enc, dead)
    opt.reset_state(m.b_enc, dead)
    opt.m[opt.params.index(m.w_dec)][:, dead] = 0.0
    opt.v[opt.params.index(m.w_dec)][:, dead] = 0.0


def train_sae(data: np.ndarray, cfg: SaeTrainConfig | None = None, layer: int = 0,
              log_every: int = 0) -> SaeModel:
    """Minimize reconstruction + L1 on rows of ``data``; returns a frozen SaeModel."""
    cfg = cfg or SaeTrainConfig()
    if cfg.lam < 0:
        raise SaeConfigError(f"lambda must be non-negative, got {cfg.lam}")
    data = np.asarray(data, dtype=np.float64)
    n, d_in = data.shape
    if cfg.d_sae <= d_in:
        raise SaeConfigError(f"d_sae {cfg.d_sae} must exceed input width {d_in}")
    scale = 1.0
    if cfg.normalize:
        ms = float((data ** 2).sum(axis=1).mean())
        scale = float(np.sqrt(d_in / ms)) if ms > 0 else 1.0
    m = init_sae(d_in, cfg, data.mean(axis=0), layer, scale)
    opt = ad.Adam(m.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 304, layer])
    steps_per_epoch = max(1, n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        fired = np.zeros(m.d_sae, dtype=bool)
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            batch = data[order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            frac = step / total
            m.lam = cfg.lam * (1.0 + (cfg.lam_warm_mult - 1.0) * max(0.0, 1.0 - 2.0 * frac))
            loss = m.loss(Tensor(batch))
            opt.zero_grad()
            loss.backward()
            # late-phase decay helps the L1 solution settle
            opt.lr = cfg.lr * min(1.0, 2.0 * (1.0 - step / total))
            opt.step()
            m.normalize_decoder()
            fired |= (codes_np(m, batch) > 0).any(axis=0)
            step += 1
        dead = np.flatnonzero(~fired)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("sae layer %d epoch %d loss %.5f dead %d", layer, epoch, loss.item(),
                     dead.size)
        if cfg.resample and dead.size and epoch < cfg.epochs // 2:
            _resample(m, opt, data[order[: min(n, 8192)]], dead)
            m.normalize_decoder()
    m.lam = cfg.lam
    return m.freeze()


# --- labeling ---------------------------------------------------------------------------


@dataclass
class LatentLabelTable:
    """Per-latent best concept, selectivity in [0, 1], localizability, and strength.

    ``strength`` is the latent's mean activation on rows tagged with its concept.
    """

    concept: np.ndarray
    selectivity: np.ndarray
    localizable: np.ndarray
    strength: np.ndarray | None = None

    def __post_init__(self):
        if self.strength is None:
            self.strength = np.zeros(len(self.concept))

    def __len__(self) -> int:
        return len(self.concept)

    def labeled(self, floor: float) -> np.ndarray:
        return self.selectivity >= floor

    def to_tsv(self, names: list[str]) -> str:
        lines = ["latent\tconcept\tselectivity\tlocalizable\tstrength"]
        for j in range(len(self)):
            lines.append(f"{j}\t{names[self.concept[j]]}\t{self.selectivity[j]:.17g}\t"
                         f"{int(self.localizable[j])}\t{self.strength[j]:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str, names: list[str]) -> "LatentLabelTable":
        idx = {n: i for i, n in enumerate(names)}
        rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
        return cls(np.array([idx[r[1]] for r in rows], dtype=np.int64),
                   np.array([float(r[2]) for r in rows]),
                   np.array([r[3] == "1" for r in rows]),
                   np.array([float(r[4]) for r in rows]))


def label_latents(m: SaeModel, acts: np.ndarray, tags, token_ids, n_concepts: int,
                  localizable) -> LatentLabelTable:
    """Label each latent with the concept it fires on most, on average.

    ``tags[i]`` is the set of concept ids tagged on row ``i`` of ``acts``. Untagged rows
    are bucketed by ``token_ids[i]`` and count against selectivity, so a latent that
    mostly fires on function words is not credited to a concept.
    """
    acts = np.asarray(acts, dtype=np.float64)
    if acts.shape[0] == 0:
        raise ContractError("labeling corpus is empty")
    codes = codes_np(m, acts)
    sums = np.zeros((n_concepts, m.d_sae))
    counts = np.zeros(n_concepts)
    untagged: dict[int, list[int]] = {}
    for i, tg in enumerate(tags):
        if tg:
            for c in tg:
                sums[c] += codes[i]
                counts[c] += 1
        else:
            untagged.setdefault(int(token_ids[i]), []).append(i)
    means = sums / np.maximum(counts, 1)[:, None]
    other = np.zeros(m.d_sae)
    for tok in sorted(untagged):
        other += codes[untagged[tok]].mean(axis=0)
    best = np.argmax(means, axis=0)
    top = means[best, np.arange(m.d_sae)]
    denom = means.sum(axis=0) + other
    sel = np.where(denom > 0, top / np.where(denom > 0, denom, 1.0), 0.0)
    loc = np.asarray(localizable, dtype=bool)
    return LatentLabelTable(best.astype(np.int64), sel, loc[best], top)


def concept_direction(m: SaeModel, cid: int, table: LatentLabelTable,
                      floor: float = 0.3) -> np.ndarray:
    """Unit decoder column of the strongest latent labeled ``cid`` with selectivity >= floor.

    Strength ties go to the lower latent id.
    """
    cand = np.flatnonzero((table.concept == cid) & (table.selectivity >= floor))
    if cand.size == 0:
        raise NoDirectionError(f"no latent labeled with concept {cid} at selectivity {floor}")
    j = cand[np.argmax(table.strength[cand])]
    col = m.w_dec.data[:, j]
    return col / np.linalg.norm(col)


def sae_config_dict(cfg: SaeTrainConfig) -> dict:
    return asdict(cfg)
