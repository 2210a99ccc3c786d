"""Experiment configuration and the staged pipeline behind the CLI.

Every stage writes into one output directory. Checkpoints carry a digest of the config
slice they were trained from; downstream stages reuse a checkpoint only when the digest
still matches, so re-running a command with the same config rewrites identical bytes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mx
from . import steering as st
from .autodiff import container
from .projector import Projector, VistaConfig, train_projector, vista_config_dict
from .sae import (LatentLabelTable, SaeModel, SaeTrainConfig, label_latents, sae_config_dict,
                  train_sae)
from .synthworld import (ShiftConfig, World, WorldConfig, encode_scenes, gen_scenes, gen_text_corpus,
                         save_scenes, style_shift, world_config_dict)
from .toylm import PretrainConfig, ToyLm, pretrain_lm

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FIDELITIES = ("local", "smoothed", "global")

# files outside the determinism contract
UNTRACKED = frozenset({"manifest.json", "timings.json", "error.json"})

# scene seed blocks; disjoint so splits never share a scene
TRAIN_BASE, EVAL_BASE, STEER_BASE = 1_000_000, 2_000_000, 3_000_000


STAGES = frozenset({"lm", "sae", "projector"})


class ConfigError(ValueError):
    pass


class MissingCheckpointError(RuntimeError):
    """An upstream checkpoint is absent or was produced under a different config."""

    def __init__(self, path: Path, producer: str):
        super().__init__(f"{path} is missing or stale; run `vistalab {producer}` first")
        self.path, self.producer = path, producer


class IntegrityError(RuntimeError):
    pass


@dataclass
class DataConfig:
    lm_corpus: int = 6000
    sae_corpus: int = 3000
    heldout_text: int = 300
    train_scenes: int = 1000
    eval_scenes: int = 100
    steer_pool: int = 300


@dataclass
class EvalConfig:
    k: int = 3
    floor: float = 0.3
    steer_layers: tuple[int, ...] = (0, 1, 2)
    alpha: float = 10.0
    beta: float = 10.0
    n_steer: int = 100
    n_attribute: int = 50
    n_text_visual: int = 20


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    encoder: str = "local"
    world: WorldConfig = field(default_factory=WorldConfig)
    lm: PretrainConfig = field(default_factory=PretrainConfig)
    sae: SaeTrainConfig = field(default_factory=SaeTrainConfig)
    vista: VistaConfig = field(default_factory=VistaConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.encoder not in FIDELITIES:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.lm.lm.vocab_size != self.world.vocab_size:
            raise ConfigError("LM vocab size must equal the world vocab size")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every component seed set to ``seed``."""
        return dataclasses.replace(
            self, seed=seed,
            world=dataclasses.replace(self.world, seed=seed),
            lm=dataclasses.replace(self.lm, seed=seed,
                                   lm=dataclasses.replace(self.lm.lm, seed=seed)),
            sae=dataclasses.replace(self.sae, seed=seed),
            vista=dataclasses.replace(self.vista, seed=seed))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} expects an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        t = hints[k]
        where = f"{cls.__name__}.{k}"
        if dataclasses.is_dataclass(t):
            kw[k] = _build(t, v)
        elif typing.get_origin(t) is tuple:
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{where}: expected a list, got {v!r}")
            item = typing.get_args(t)[0]
            kw[k] = tuple(_check(f"{where}[{i}]", item, x) for i, x in enumerate(v))
        else:
            kw[k] = _check(where, t, v)
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"{cls.__name__}: {e}") from None


def _check(where: str, t, v):
    """Accept ``v`` for a field annotated ``t`` (ints widen to float; bools stay bools)."""
    if typing.get_origin(t) in (typing.Union, types.UnionType):
        opts = typing.get_args(t)
        if v is None and type(None) in opts:
            return v
        t = next(o for o in opts if o is not type(None))
    ok = {bool: lambda x: isinstance(x, bool),
          int: lambda x: isinstance(x, int) and not isinstance(x, bool),
          float: lambda x: isinstance(x, (int, float)) and not isinstance(x, bool),
          str: lambda x: isinstance(x, str)}.get(t)
    if ok is not None and not ok(v):
        raise ConfigError(f"{where}: expected {t.__name__}, got {v!r}")
    return float(v) if t is float else v


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(_plain(obj), sort_keys=True).encode()).hexdigest()[:16]


def file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_json(path: Path, obj) -> Path:
    return write_text(path, json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


# --- pipeline -----------------------------------------------------------------------------

class Pipeline:
    """Lazily materialized stages of one experiment, cached in ``out``.

    ``build`` names the stages this instance may train when their checkpoint is missing
    or stale; any other missing stage raises MissingCheckpointError.
    """

    def __init__(self, cfg: ExperimentConfig, out, build=STAGES):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.build = frozenset(build)
        self.timings: dict[str, float] = {}
        self._world: World | None = None
        self._lm: ToyLm | None = None
        self._saes: dict[int, SaeModel] | None = None
        self._tables: dict[int, LatentLabelTable] | None = None
        self._text: dict[str, mx.TextActivations] = {}
        self._projectors: dict[str, Projector] = {}

    # --- config digests -------------------------------------------------------------
    def _world_key(self) -> dict:
        return {"world": world_config_dict(self.cfg.world), "data": asdict(self.cfg.data)}

    def _lm_key(self) -> dict:
        return {**self._world_key(), "lm": asdict(self.cfg.lm)}

    def _sae_key(self) -> dict:
        return {**self._lm_key(), "sae": sae_config_dict(self.cfg.sae)}

    def _proj_key(self, encoder: str, use_sae: bool, layers) -> dict:
        v = vista_config_dict(self.cfg.vista)
        v["layers"] = list(layers)
        return {**self._sae_key(), "vista": v, "encoder": encoder, "use_sae": use_sae}

    # --- world ------------------------------------------------------------------------
    @property
    def world(self) -> World:
        if self._world is None:
            self._world = World(self.cfg.world)
        return self._world

    def scenes(self, split: str):
        d = self.cfg.data
        base, n = {"train": (TRAIN_BASE, d.train_scenes), "eval": (EVAL_BASE, d.eval_scenes),
                   "steer": (STEER_BASE, d.steer_pool)}[split]
        return gen_scenes(self.world, range(base, base + n))

    def shifted(self, scenes):
        w = self.cfg.world
        return [style_shift(s, ShiftConfig(w.shift_eps, w.shift_noise_mult)) for s in scenes]

    def gen_world(self) -> dict:
        w = self.world
        wdir = self.out / "world"
        write_json(wdir / "world.json", {"config": world_config_dict(self.cfg.world),
                                         "concepts": [c.name for c in w.concepts],
                                         "vocab": w.vocab.tokens})
        for split in ("train", "eval", "steer"):
            save_scenes(wdir / f"scenes_{split}.jsonl", self.scenes(split))
        save_scenes(wdir / "scenes_eval_shifted.jsonl",
                    self.shifted(self.scenes("eval")))
        self.write_config()
        return {"concepts": w.n_concepts, "vocab": w.vocab.size}

    def write_config(self) -> None:
        write_text(self.out / "config.json", self.cfg.dumps())

    # --- language model ------------------------------------------------------------
    def _ckpt_ok(self, path: Path, key: dict) -> dict | None:
        if not path.exists():
            return None
        state, man = container.load(path)
        if not man or man.get("config_digest") != digest(key):
            return None
        return {"state": state, "manifest": man}

    def _need(self, stage: str, path: Path, producer: str) -> None:
        if stage not in self.build:
            raise MissingCheckpointError(path, producer)

    @staticmethod
    def _verify(model, man: dict, path: Path):
        if model.checksum() != man.get("checksum"):
            raise IntegrityError(f"{path}: parameter checksum differs from the one recorded "
                                 f"when it was frozen")
        return model

    def _timed(self, name: str, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[name] = round(time.perf_counter() - t0, 3)
        return out

    def lm(self, force: bool = False) -> ToyLm:
        if self._lm is not None and not force:
            return self._lm
        path = self.out / "lm.vsta"
        hit = None if force else self._ckpt_ok(path, self._lm_key())
        if hit:
            self._lm = self._verify(ToyLm.from_state(hit["state"], hit["manifest"]["model"]),
                                    hit["manifest"], path)
            return self._lm
        if not force:
            self._need("lm", path, "train-lm")
        corpus = gen_text_corpus(self.world, self.cfg.data.lm_corpus, seed=0)
        model, report = self._timed("train-lm", pretrain_lm, corpus, self.cfg.lm)
        container.save(path, model.state_dict(),
                       {"kind": "toylm", "model": model.manifest(), "checksum": model.checksum(),
                        "config_digest": digest(self._lm_key())})
        write_json(self.out / "lm_report.json", report)
        self._lm = model
        self._saes = self._tables = None
        self._text.clear()
        return model

    # --- SAEs ---------------------------------------------------------------------------
    def text_acts(self, which: str) -> mx.TextActivations:
        if which not in self._text:
            n, seed = {"sae": (self.cfg.data.sae_corpus, 1),
                       "heldout": (self.cfg.data.heldout_text, 2)}[which]
            corpus = gen_text_corpus(self.world, n, seed=seed)
            self._text[which] = mx.text_activations(self.lm(), self.world, corpus,
                                                    range(self.lm().n_layers))
        return self._text[which]

    def saes(self, force: bool = False, layers=None):
        """Per-layer SAEs and label tables; trains any that are missing or stale."""
        if self._saes is not None and not force and layers is None:
            return self._saes, self._tables
        n_layers = self.lm().n_layers
        layers = list(range(n_layers)) if layers is None else list(layers)
        bad = [l for l in layers if not 0 <= l < n_layers]
        if bad:
            raise ConfigError(f"SAE layers {bad} outside [0, {n_layers})")
        key = self._sae_key()
        saes, tables = {}, {}
        names = [c.name for c in self.world.concepts]
        loc = [c.localizable for c in self.world.concepts]
        for l in range(n_layers):
            path = self.out / f"sae_l{l}.vsta"
            lab = self.out / f"labels_l{l}.tsv"
            hit = None if (force and l in layers) else self._ckpt_ok(path, {**key, "layer": l})
            if hit and lab.exists():
                saes[l] = self._verify(SaeModel.from_state(hit["state"],
                                                           hit["manifest"]["model"]),
                                       hit["manifest"], path)
                tables[l] = LatentLabelTable.from_tsv(lab.read_text(), names)
                continue
            if not (force and l in layers):
                self._need("sae", path, "train-sae")
            acts = self.text_acts("sae")
            m = self._timed(f"train-sae-l{l}", train_sae, acts.taps[l], self.cfg.sae, layer=l)
            tab = label_latents(m, acts.taps[l], acts.tags, acts.token_ids,
                                self.world.n_concepts, loc)
            container.save(path, m.state_dict(),
                           {"kind": "sae", "model": m.manifest(), "checksum": m.checksum(),
                            "config_digest": digest({**key, "layer": l})})
            write_text(lab, tab.to_tsv(names))
            saes[l], tables[l] = m, LatentLabelTable.from_tsv(tab.to_tsv(names), names)
        self._saes, self._tables = saes, tables
        return saes, tables

    # --- projectors ---------------------------------------------------------------------
    @staticmethod
    def tag(encoder: str, use_sae: bool, layers=None) -> str:
        t = f"{'sae' if use_sae else 'nosae'}_{encoder}"
        if layers is not None:
            t += "_m" + ("".join(str(l) for l in layers) or "none")
        return t

    def projector(self, encoder: str | None = None, use_sae: bool = True, layers=None,
                  force: bool = False) -> tuple[str, Projector]:
        encoder = encoder or self.cfg.encoder
        if encoder not in FIDELITIES:
            raise ConfigError(f"unknown encoder {encoder!r}")
        lm = self.lm()
        default_m = self.cfg.vista.constrained(lm.n_layers)
        m_layers = default_m if layers is None else tuple(sorted(set(layers)))
        bad = [l for l in m_layers if not 0 <= l < lm.n_layers]
        if bad:
            raise ConfigError(f"constrained layers {bad} outside [0, {lm.n_layers})")
        tag = self.tag(encoder, use_sae, None if layers is None else m_layers)
        if tag in self._projectors and not force:
            return tag, self._projectors[tag]
        key = self._proj_key(encoder, use_sae, m_layers)
        path = self.out / f"projector_{tag}.vsta"
        hit = None if force else self._ckpt_ok(path, key)
        if hit:
            p = self._verify(Projector.from_state(hit["state"]), hit["manifest"], path)
        else:
            if not force:
                flags = f" --encoder {encoder}" + ("" if use_sae else " --no-sae")
                if layers is not None:
                    flags += " --layers " + (",".join(map(str, m_layers)) or "none")
                self._need("projector", path, "train-projector" + flags)
            saes, _ = self.saes()
            vcfg = dataclasses.replace(self.cfg.vista, layers=m_layers)
            use = use_sae and bool(m_layers)
            p, hist = self._timed(f"train-projector-{tag}", train_projector, vcfg, self.world,
                                  lm, saes, self.world.encoder(encoder), self.scenes("train"),
                                  self.scenes("eval"), use_sae=use)
            container.save(path, p.state_dict(),
                           {"kind": "projector", "tag": tag, "checksum": p.checksum(),
                            "config_digest": digest(key)})
            write_text(self.out / f"history_{tag}.jsonl",
                       "".join(json.dumps(r, sort_keys=True) + "\n" for r in hist))
        self._projectors[tag] = p
        return tag, p

    # --- evaluation ---------------------------------------------------------------------
    def visual(self, encoder: str, scenes):
        return encode_scenes(self.world.encoder(encoder), scenes)

    def eval_metrics(self, encoder: str | None = None, use_sae: bool = True,
                     layers=None) -> dict:
        encoder = encoder or self.cfg.encoder
        tag, p = self.projector(encoder, use_sae, layers)
        lm = self.lm()
        saes, tables = self.saes()
        ev = self.cfg.eval
        scenes = self.scenes("eval")
        vis_in = self.visual(encoder, scenes)
        vis = mx.visual_taps(p, lm, vis_in, sorted(saes))
        text = self.text_acts("heldout")
        rates = mx.matching_rate(saes, tables, vis, scenes, ev.k, ev.floor)
        constrained = self.cfg.vista.constrained(lm.n_layers)
        shifted = self.shifted(scenes)
        vis_shift = mx.visual_taps(p, lm, self.visual(encoder, shifted), sorted(saes))
        rates_shift = mx.matching_rate(saes, tables, vis_shift, shifted, ev.k, ev.floor)
        rows = []
        for l in sorted(saes):
            err_v, err_t = mx.recon_error(saes[l], vis[l], text.taps[l])
            rows.append(mx.LayerMetrics(l, err_v, err_t, mx.sparsity(saes[l], vis[l]),
                                        mx.sparsity(saes[l], text.taps[l]), rates[l]))
        active = [mx.active_token_count(saes, {l: vis[l][i] for l in saes})
                  for i in range(len(scenes))]
        purity = {l: mx.mean_purity(mx.cluster_by_latent(saes[l], tables[l], vis[l], scenes,
                                                         ev.floor)) for l in sorted(saes)}
        report = {
            "tag": tag,
            "encoder": encoder,
            "use_sae": use_sae,
            "constrained_layers": list(constrained),
            "layers": [asdict(r) for r in rows],
            "match_rate": {str(l): r for l, r in rates.items()},
            "match_rate_mean_constrained": _mean([rates[l] for l in constrained if l in rates]),
            "match_rate_mean_all": _mean(list(rates.values())),
            "match_rate_pooled_hits": sum(round(r * len(scenes)) for r in rates.values()),
            "match_rate_shifted": {str(l): r for l, r in rates_shift.items()},
            "match_rate_shifted_mean_constrained": _mean(
                [rates_shift[l] for l in constrained if l in rates_shift]),
            "sla": mx.sla(saes, tables, vis, scenes, ev.k, ev.floor).record(),
            "active_tokens_mean": _mean(active),
            "active_tokens_max": max(active) if active else 0,
            "cluster_purity": {str(l): v for l, v in purity.items()},
            "task_accuracy": mx.task_accuracy(p, lm, self.world, scenes, vis_in),
            "task_chance": mx.qa_chance(self.world, scenes),
        }
        write_json(self.out / f"metrics_{tag}.json", report)
        write_text(self.out / f"metrics_{tag}.csv", mx.layer_table(rows))
        return report

    def steer(self, encoder: str | None = None, use_sae: bool = True, alpha=None,
              beta=None) -> dict:
        encoder = encoder or self.cfg.encoder
        tag, p = self.projector(encoder, use_sae)
        lm = self.lm()
        saes, tables = self.saes()
        ev = self.cfg.eval
        alpha = ev.alpha if alpha is None else alpha
        beta = ev.beta if beta is None else beta
        world = self.world
        scenes = self.scenes("steer")
        vis = self.visual(encoder, scenes)
        reports = {}
        for kind in ("remove", "replace"):
            r = st.run_steering_eval(p, lm, saes, tables, world, scenes, vis, kind,
                                     n_scenes=ev.n_steer, seed=self.cfg.seed,
                                     layer_set=ev.steer_layers, alpha=alpha, beta=beta,
                                     floor=ev.floor)
            reports[kind] = r
            write_text(self.out / f"steering_{tag}_{kind}.csv", st.records_csv(r.records))
        summary = {"tag": tag, "alpha": alpha, "beta": beta,
                   "layer_set": list(ev.steer_layers),
                   **{k: r.summary() for k, r in reports.items()},
                   "attribute": self._attribute_eval(p, scenes, vis, alpha),
                   "text_vs_visual": self._text_vs_visual(p, scenes, vis, alpha, beta)}
        write_json(self.out / f"steering_{tag}.json", summary)
        write_text(self.out / f"steering_{tag}_table.csv",
                   st.score_table({f"{tag}_{k}": r for k, r in reports.items()}))
        return summary

    def _attribute_eval(self, p, scenes, vis, alpha) -> dict:
        world, lm = self.world, self.lm()
        saes, tables = self.saes()
        ev = self.cfg.eval
        yes, no = world.word("yes"), world.word("no")
        rng = np.random.default_rng([self.cfg.seed, 611])
        tried = flipped = 0
        for i, s in enumerate(scenes):
            if tried >= ev.n_attribute:
                break
            objs = [o for o in s.objects if 1 <= len(s.boxes[o]) <= 5]
            if not objs:
                continue
            obj = objs[int(rng.integers(len(objs)))]
            attrs = [a for a in world.attribute_ids
                     if not any(c is not None and c[0] == obj and a in c[1] for c in s.grid)]
            if not attrs:
                continue
            attr = attrs[int(rng.integers(len(attrs)))]
            before, after = st.attribute_steer(p, lm, saes, tables, world, s, vis[i], attr, obj,
                                               alpha, ev.steer_layers, ev.floor)
            if before[:1] != [no]:
                continue
            tried += 1
            flipped += after[:1] == [yes]
        return {"n_applicable": tried, "n_flipped": flipped,
                "flip_rate": flipped / tried if tried else None}

    def _text_vs_visual(self, p, scenes, vis, alpha, beta) -> dict:
        world = self.world
        saes, tables = self.saes()
        ev = self.cfg.eval
        rng = np.random.default_rng([self.cfg.seed, 612])
        recs = []
        for i, s in enumerate(scenes):
            if len(recs) >= ev.n_text_visual:
                break
            cands = st.eligible_targets(s, world)
            if not cands:
                continue
            src = cands[int(rng.integers(len(cands)))]
            absent = [c for c in world.object_ids if c not in s.concept_set]
            tgt = absent[int(rng.integers(len(absent)))]
            recs.append(st.text_vs_visual_comparison(p, self.lm(), saes, tables, world, s,
                                                     vis[i], src, tgt, alpha, beta,
                                                     ev.steer_layers, ev.floor))
        preserved = {}
        for regime in ("visual", "text_with_image", "text_without_image"):
            keep = 0
            for r in recs:
                keep += set(r["keep"]) <= set(r[regime]["concepts"])
            preserved[regime] = keep / len(recs) if recs else None
        return {"n": len(recs), "preserve_rate": preserved,
                "mean_score": {k: _mean([r[k]["score"] for r in recs])
                               for k in ("visual", "text_with_image", "text_without_image")},
                "records": recs}

    # --- composite commands -------------------------------------------------------------
    def compare(self) -> dict:
        """Paired with-SAE / no-SAE runs from one seed, plus a joint report."""
        self.write_config()
        enc = self.cfg.encoder
        m_sae = self.eval_metrics(enc, True)
        m_no = self.eval_metrics(enc, False)
        s_sae = self.steer(enc, True)
        s_no = self.steer(enc, False)
        layers = m_sae["constrained_layers"]
        by_l = {True: {r["layer"]: r for r in m_sae["layers"]},
                False: {r["layer"]: r for r in m_no["layers"]}}
        joint = {
            "seed": self.cfg.seed,
            "encoder": enc,
            "constrained_layers": layers,
            "err_visual": {str(l): {"sae": by_l[True][l]["err_visual"],
                                    "nosae": by_l[False][l]["err_visual"],
                                    "text": by_l[True][l]["err_text"]} for l in layers},
            "sparsity_visual": {str(l): {"sae": by_l[True][l]["sparsity_visual"],
                                         "nosae": by_l[False][l]["sparsity_visual"],
                                         "text": by_l[True][l]["sparsity_text"]}
                                for l in layers},
            "match_rate_mean": {"sae": m_sae["match_rate_mean_constrained"],
                                "nosae": m_no["match_rate_mean_constrained"]},
            "match_rate_ratio": _ratio(m_sae["match_rate_mean_constrained"],
                                       m_no["match_rate_mean_constrained"]),
            "sla": {"sae": m_sae["sla"], "nosae": m_no["sla"]},
            "task_accuracy": {"sae": m_sae["task_accuracy"], "nosae": m_no["task_accuracy"]},
            "steering": {k: {"sae": s_sae[k]["mean_score"], "nosae": s_no[k]["mean_score"]}
                         for k in ("remove", "replace")},
        }
        write_json(self.out / "compare.json", joint)
        rows = {f"{t}_{k}": _report_from(s[k]) for t, s in (("sae", s_sae), ("nosae", s_no))
                for k in ("remove", "replace")}
        write_text(self.out / "compare_table.csv", st.score_table(rows))
        self.write_manifest()
        return joint

    def encoder_sweep(self, fidelities=FIDELITIES) -> dict:
        """With-SAE runs per encoder fidelity: SLA and steering scores."""
        out = {}
        for f in fidelities:
            m = self.eval_metrics(f, True)
            s = self.steer(f, True)
            out[f] = {"sla": m["sla"]["sla"], "match_rate": m["match_rate_mean_constrained"],
                      "remove": s["remove"]["mean_score"], "replace": s["replace"]["mean_score"]}
        write_json(self.out / "encoder_sweep.json", out)
        self.write_manifest()
        return out

    def sweep_layers(self) -> list[dict]:
        """Interpretability versus task accuracy as the constrained set M grows."""
        n = self.lm().n_layers
        sets = {"none": (), "0..1": (0, 1), "0..4": tuple(l for l in range(5) if l < n),
                f"0..{n - 1}": tuple(range(n))}
        rows = []
        for name, m in sets.items():
            rep = self.eval_metrics(self.cfg.encoder, bool(m), layers=m)
            rows.append({"M": name, "layers": list(m),
                         "match_rate_mean": rep["match_rate_mean_all"],
                         "sla": rep["sla"]["sla"],
                         "err_visual_mean": _mean([r["err_visual"] for r in rep["layers"]]),
                         "task_accuracy": rep["task_accuracy"]})
        write_json(self.out / "sweep_layers.json", rows)
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["M", "match_rate_mean", "sla", "err_visual_mean",
                                 "task_accuracy"], lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
        write_text(self.out / "sweep_layers.csv", buf.getvalue())
        self.write_manifest()
        return rows

    def report(self) -> dict:
        """Plot-data files from whatever metric and steering outputs exist."""
        made = {}
        for path in sorted(self.out.glob("metrics_*.json")):
            rep = json.loads(path.read_text())
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["layer", "series", "value"])
            for r in rep["layers"]:
                for key in ("err_visual", "err_text", "sparsity_visual", "sparsity_text",
                            "match_rate"):
                    w.writerow([r["layer"], key, repr(float(r[key]))])
            name = f"curves_{rep['tag']}.csv"
            write_text(self.out / "plots" / name, buf.getvalue())
            made[name] = rep["tag"]
        reports = {}
        for path in sorted(self.out.glob("steering_*_re*.csv")):
            name = path.stem[len("steering_"):]
            reports[name] = _report_from_records(path.read_text())
        if reports:
            write_text(self.out / "plots" / "mean_scores.csv", st.score_table(reports))
            made["mean_scores.csv"] = sorted(reports)
        self.write_manifest()
        return made

    def write_manifest(self) -> dict:
        """Config hash, file hashes and frozen-parameter checksums of everything in ``out``.

        Wall-clock timings go to timings.json, which the manifest does not cover, so the
        manifest itself stays a pure function of config and seed.
        """
        files, checksums = {}, {}
        for p in sorted(self.out.rglob("*")):
            if not p.is_file() or p.name in UNTRACKED:
                continue
            files[str(p.relative_to(self.out))] = file_sha(p)
            if p.suffix == ".vsta":
                _, man = container.load(p)
                if man and "checksum" in man:
                    checksums[p.stem] = man["checksum"]
        man = {"version": __version__, "schema_version": SCHEMA_VERSION,
               "config_digest": digest(self.cfg.to_dict()), "checksums": checksums,
               "files": files}
        write_json(self.out / "manifest.json", man)
        if self.timings:
            path = self.out / "timings.json"
            old = json.loads(path.read_text()) if path.exists() else {}
            write_json(path, {**old, **self.timings})
        return man


def _mean(xs) -> float | None:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _ratio(a, b):
    if a is None or b is None:
        return None
    return a / b if b else (float("inf") if a else None)


def _report_from(summary: dict) -> st.SteeringReport:
    return st.SteeringReport(summary["n_s2"], summary["n_s1"], summary["n_s0"],
                             summary["n_unparseable"])


def _report_from_records(text: str) -> st.SteeringReport:
    r = st.SteeringReport()
    for row in csv.DictReader(io.StringIO(text)):
        r.add(int(row["score"]))
    return r
