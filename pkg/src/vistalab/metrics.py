"""Evaluation metrics for visual tokens read through text SAEs.

Conventions shared by every metric here:

* a latent is *active* on a token iff its code is strictly positive;
* top-k latents rank by max activation over the visual tokens, ties to the lower id,
  and only latents with a positive max are eligible;
* a latent *carries* its concept label only if its selectivity reaches ``floor``.
"""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .projector import Projector, answer_accuracy, project, qa_examples
from .sae import LatentLabelTable, SaeModel, codes_np, reconstruct_np
from .synthworld import Scene, TextSeq, World, gen_qa
from .toylm import PAD, ToyLm, pad_batch


class MetricConfigError(ValueError):
    pass


@dataclass
class LayerMetrics:
    layer: int
    err_visual: float
    err_text: float
    sparsity_visual: float
    sparsity_text: float
    match_rate: float


@dataclass
class SlaReport:
    n_candidates: int
    n_filtered: int
    n_hits: int

    @property
    def sla(self) -> float | None:
        return self.n_hits / self.n_filtered if self.n_filtered else None

    def record(self) -> dict:
        return {**asdict(self), "sla": self.sla}


# --- activations ---------------------------------------------------------------------------

def visual_taps(p: Projector, lm: ToyLm, visual: np.ndarray, layers,
                batch_size: int = 64) -> dict[int, np.ndarray]:
    """Residual streams of the visual prefix: layer -> [S, N, D]."""
    layers = list(layers)
    out: dict[int, list] = {l: [] for l in layers}
    for i in range(0, len(visual), batch_size):
        emb = project(p, visual[i:i + batch_size])
        _, taps = lm.forward(emb, layers)
        for l in layers:
            out[l].append(taps[l].data)
    return {l: np.concatenate(v) for l, v in out.items()}


@dataclass
class TextActivations:
    """Residual rows of a text corpus with per-row token ids and concept tags."""

    taps: dict[int, np.ndarray]
    token_ids: np.ndarray
    tags: list[frozenset]


def text_activations(lm: ToyLm, world: World, seqs: list[TextSeq], layers,
                     batch_size: int = 128) -> TextActivations:
    layers = list(layers)
    rows: dict[int, list] = {l: [] for l in layers}
    toks, tags = [], []
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        ids, over, _ = pad_batch(chunk)
        _, taps = lm.forward(lm.embed_tokens(ids, over), layers)
        valid = ids != PAD
        for l in layers:
            rows[l].append(taps[l].data[valid])
        toks.append(ids[valid])
        for tok, ov in zip(ids[valid], over[valid]):
            tg = set()
            c = world.token_concept(int(tok))
            if c is not None:
                tg.add(c)
            if ov >= 0:
                tg.add(world.token_concept(int(ov)))
            tags.append(frozenset(tg))
    return TextActivations({l: np.concatenate(v) for l, v in rows.items()},
                           np.concatenate(toks), tags)


# --- reconstruction and sparsity --------------------------------------------------------------

def mean_sq_error(sae: SaeModel, rows: np.ndarray) -> float:
    """Mean per-row squared reconstruction error in the SAE's scaled frame."""
    rows = rows.reshape(-1, rows.shape[-1])
    diff = (rows - reconstruct_np(sae, rows)) * sae.scale
    return float((diff ** 2).sum(axis=1).mean())


def recon_error(sae: SaeModel, visual_rows: np.ndarray, text_rows: np.ndarray):
    """Mean per-token squared reconstruction error, for visual and text rows separately."""
    return mean_sq_error(sae, visual_rows), mean_sq_error(sae, text_rows)


def sparsity(sae: SaeModel, rows: np.ndarray) -> float:
    """Average fraction of latents strictly active per token."""
    rows = rows.reshape(-1, rows.shape[-1])
    return float((codes_np(sae, rows) > 0).sum(axis=1).mean() / sae.d_sae)


# --- top-k machinery ----------------------------------------------------------------------------

def top_latents(codes: np.ndarray, k: int) -> np.ndarray:
    """Top-k latent ids by max activation over rows of ``codes`` ([N, d_sae])."""
    if k < 1:
        raise MetricConfigError(f"k must be >= 1, got {k}")
    peak = codes.max(axis=0)
    order = np.lexsort((np.arange(peak.size), -peak))
    order = order[peak[order] > 0]
    return order[:k]


def scene_codes(sae: SaeModel, taps_l: np.ndarray) -> np.ndarray:
    """[S, N, D] residuals -> [S, N, d_sae] codes."""
    s, n, d = taps_l.shape
    return codes_np(sae, taps_l.reshape(-1, d)).reshape(s, n, -1)


def matching_rate(saes: dict[int, SaeModel], tables: dict[int, LatentLabelTable],
                  vis: dict[int, np.ndarray], scenes: list[Scene], k: int = 3,
                  floor: float = 0.3) -> dict[int, float]:
    """Per-layer fraction of scenes whose top-k latents include a present, labeled concept."""
    if k < 1:
        raise MetricConfigError(f"k must be >= 1, got {k}")
    rates = {}
    for l in sorted(saes):
        codes = scene_codes(saes[l], vis[l])
        tab = tables[l]
        hits = 0
        for si, scene in enumerate(scenes):
            for j in top_latents(codes[si], k):
                if tab.selectivity[j] >= floor and tab.concept[j] in scene.concept_set:
                    hits += 1
                    break
        rates[l] = hits / len(scenes) if scenes else 0.0
    return rates


def sla(saes: dict[int, SaeModel], tables: dict[int, LatentLabelTable],
        vis: dict[int, np.ndarray], scenes: list[Scene], k: int = 3,
        floor: float = 0.3) -> SlaReport:
    """Spatial localization: does a kept latent peak inside its concept's box?"""
    n_cand = n_filt = n_hit = 0
    for l in sorted(saes):
        codes = scene_codes(saes[l], vis[l])
        tab = tables[l]
        for si, scene in enumerate(scenes):
            for j in top_latents(codes[si], k):
                n_cand += 1
                c = int(tab.concept[j])
                if not (tab.selectivity[j] >= floor and tab.localizable[j]
                        and c in scene.concept_set):
                    continue
                n_filt += 1
                pos = int(np.argmax(codes[si][:, j]))
                n_hit += pos in scene.boxes[c]
    return SlaReport(n_cand, n_filt, n_hit)


def active_token_count(saes: dict[int, SaeModel], vis_scene: dict[int, np.ndarray]) -> int:
    """Distinct argmax positions of each layer's top latent for one scene ([N, D] per layer)."""
    positions = set()
    for l in sorted(saes):
        codes = codes_np(saes[l], vis_scene[l])
        top = top_latents(codes, 1)
        if top.size:
            positions.add(int(np.argmax(codes[:, top[0]])))
    return len(positions)


def cluster_by_latent(sae: SaeModel, table: LatentLabelTable, taps_l: np.ndarray,
                      scenes: list[Scene], floor: float = 0.3) -> dict[int, dict]:
    """Group scenes by their strongest concept-labeled latent; report cluster purity."""
    codes = scene_codes(sae, taps_l)
    usable = table.selectivity >= floor
    clusters: dict[int, list[int]] = {}
    for si in range(len(scenes)):
        peak = np.where(usable, codes[si].max(axis=0), 0.0)
        if peak.max() <= 0:
            continue
        clusters.setdefault(int(np.argmax(peak)), []).append(si)
    out = {}
    for j, members in sorted(clusters.items()):
        c = int(table.concept[j])
        pure = sum(c in scenes[i].concept_set for i in members) / len(members)
        out[j] = {"concept": c, "scenes": members, "purity": pure}
    return out


def mean_purity(clusters: dict[int, dict]) -> float:
    """Scene-weighted mean purity over clusters."""
    n = sum(len(c["scenes"]) for c in clusters.values())
    if not n:
        return float("nan")
    return sum(c["purity"] * len(c["scenes"]) for c in clusters.values()) / n


def task_accuracy(p: Projector, lm: ToyLm, world: World, scenes: list[Scene],
                  visual: np.ndarray) -> float:
    """Exact-match accuracy of greedy answers on the templated QA pairs of ``scenes``."""
    return answer_accuracy(p, lm, qa_examples(world, scenes, visual))


def qa_chance(world: World, scenes: list[Scene]) -> float:
    """Accuracy of always emitting each question type's most frequent answer."""
    by_type: dict[str, Counter] = {}
    for s in scenes:
        for q, a in gen_qa(s, world):
            by_type.setdefault(world.vocab.tokens[q[0]] + str(len(q)), Counter())[tuple(a)] += 1
    total = sum(sum(c.values()) for c in by_type.values())
    return sum(c.most_common(1)[0][1] for c in by_type.values()) / total


# --- reports -------------------------------------------------------------------------------------

def layer_table(rows: list[LayerMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "metric", "value"])
    for r in rows:
        for key in ("err_visual", "err_text", "sparsity_visual", "sparsity_text", "match_rate"):
            w.writerow([r.layer, key, repr(float(getattr(r, key)))])
    return buf.getvalue()


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
