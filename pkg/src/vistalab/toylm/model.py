"""Small causal pre-LN transformer with residual-stream taps."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from .. import autodiff as ad
from ..autodiff import ContractError, Tensor
from .vocab import EOS

Hook = Callable[[int, Tensor], Tensor]


@dataclass
class LmConfig:
    vocab_size: int = 64
    d_model: int = 48
    n_layers: int = 4
    n_heads: int = 2
    max_seq: int = 64
    mlp_mult: int = 4
    emb_std: float = 1.0
    seed: int = 0


class ToyLm:
    def __init__(self, cfg: LmConfig | None = None):
        cfg = cfg or LmConfig()
        if cfg.d_model % cfg.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 101])
        d, v, f = cfg.d_model, cfg.vocab_size, cfg.d_model * cfg.mlp_mult
        params: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0, cfg.emb_std, (v, d)),
            "pos_emb": rng.normal(0, cfg.emb_std * 0.3, (cfg.max_seq, d)),
        }
        for l in range(cfg.n_layers):
            p = f"l{l}."
            params[p + "ln1.g"] = np.ones(d)
            params[p + "ln1.b"] = np.zeros(d)
            for name in ("wq", "wk", "wv"):
                params[p + name] = rng.normal(0, d ** -0.5, (d, d))
            params[p + "wo"] = rng.normal(0, (2 * d * cfg.n_layers) ** -0.5, (d, d))
            params[p + "ln2.g"] = np.ones(d)
            params[p + "ln2.b"] = np.zeros(d)
            params[p + "w1"] = rng.normal(0, d ** -0.5, (d, f))
            params[p + "b1"] = np.zeros(f)
            params[p + "w2"] = rng.normal(0, (f * 2 * cfg.n_layers) ** -0.5, (f, d))
            params[p + "b2"] = np.zeros(d)
        params["lnf.g"] = np.ones(d)
        params["lnf.b"] = np.zeros(d)
        params["unembed"] = rng.normal(0, 0.02, (d, v))
        self.params = {k: Tensor(val, requires_grad=True) for k, val in params.items()}
        self.frozen = False

    # --- state ------------------------------------------------------------------------
    def freeze(self) -> "ToyLm":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def manifest(self) -> dict:
        return {"kind": "toylm", "config": asdict(self.cfg), "frozen": self.frozen}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], manifest: dict) -> "ToyLm":
        model = cls(LmConfig(**manifest["config"]))
        for k, arr in state.items():
            if model.params[k].shape != arr.shape:
                raise ValueError(f"checkpoint entry {k} has shape {arr.shape}")
            model.params[k].data = np.array(arr, dtype=np.float64)
        if manifest.get("frozen"):
            model.freeze()
        return model

    # --- forward ------------------------------------------------------------------------
    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    def embed_tokens(self, ids, overlay=None) -> Tensor:
        """Token embeddings (no positions). ``overlay`` ids >= 0 are added in place."""
        ids = np.asarray(ids, dtype=np.int64)
        emb = ad.embedding(self.params["tok_emb"], ids)
        if overlay is not None:
            overlay = np.asarray(overlay, dtype=np.int64)
            if (overlay >= 0).any():
                extra = ad.embedding(self.params["tok_emb"], np.maximum(overlay, 0))
                emb = emb + extra * Tensor((overlay >= 0)[..., None] * np.ones(self.d_model))
        return emb

    def forward(self, x: Tensor, collect: Iterable[int] = (), hook: Hook | None = None):
        """Run the blocks on input embeddings [T, D] or [B, T, D].

        Returns (logits, taps) where taps maps each requested layer to its post-block
        residual stream. ``hook(layer, h)`` may rewrite the residual after each block.
        """
        x = ad.as_tensor(x)
        squeeze = x.data.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        b, t, d = x.shape
        cfg = self.cfg
        if t > cfg.max_seq:
            raise ContractError(f"sequence length {t} exceeds max_seq {cfg.max_seq}")
        if d != cfg.d_model:
            raise ad.DimensionError(f"input width {d} != d_model {cfg.d_model}")
        collect = set(collect)
        bad = [l for l in collect if not 0 <= l < cfg.n_layers]
        if bad:
            raise ContractError(f"tap layers {bad} outside [0, {cfg.n_layers})")
        p = self.params
        nh, dh = cfg.n_heads, d // cfg.n_heads
        pos = np.broadcast_to(np.arange(t), (b, t))
        h = x + ad.embedding(p["pos_emb"], pos)
        causal = np.tril(np.ones((t, t), dtype=bool))
        taps: dict[int, Tensor] = {}

        def heads(z):
            return z.reshape(b, t, nh, dh).transpose(0, 2, 1, 3).reshape(b * nh, t, dh)

        for l in range(cfg.n_layers):
            pre = f"l{l}."
            a = ad.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"]).reshape(b * t, d)
            q, k, v = (heads(a @ p[pre + n]) for n in ("wq", "wk", "wv"))
            scores = ad.bmm(q, k.transpose(0, 2, 1)) * (dh ** -0.5)
            att = ad.bmm(ad.softmax(scores, causal), v)
            att = att.reshape(b, nh, t, dh).transpose(0, 2, 1, 3).reshape(b * t, d)
            h = h + (att @ p[pre + "wo"]).reshape(b, t, d)
            m = ad.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"]).reshape(b * t, d)
            m = ad.relu(ad.add_bias(m @ p[pre + "w1"], p[pre + "b1"]))
            m = ad.add_bias(m @ p[pre + "w2"], p[pre + "b2"])
            h = h + m.reshape(b, t, d)
            if hook is not None:
                h = hook(l, h)
            if l in collect:
                taps[l] = h[0] if squeeze else h
        out = ad.layer_norm(h, p["lnf.g"], p["lnf.b"]).reshape(b * t, d) @ p["unembed"]
        logits = out.reshape(b, t, cfg.vocab_size)
        return (logits[0] if squeeze else logits), taps


def lm_forward(model: ToyLm, input_embeddings, collect_taps: Iterable[int] = (),
               hook: Hook | None = None):
    return model.forward(input_embeddings, collect_taps, hook)


def generate(model: ToyLm, prefix_embeddings, max_new: int, hook: Hook | None = None,
             stop: int = EOS) -> list[int]:
    """Greedy decoding; argmax ties go to the lowest token id. EOS is kept in the output."""
    prefix = np.asarray(getattr(prefix_embeddings, "data", prefix_embeddings), dtype=np.float64)
    emb = model.params["tok_emb"].data
    seq = prefix
    out: list[int] = []
    for _ in range(max_new):
        if seq.shape[0] >= model.cfg.max_seq:
            break
        logits, _ = model.forward(Tensor(seq), (), hook)
        tok = int(np.argmax(logits.data[-1]))
        out.append(tok)
        if tok == stop:
            break
        seq = np.concatenate([seq, emb[tok][None]], axis=0)
    return out
