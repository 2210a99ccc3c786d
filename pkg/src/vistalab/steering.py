"""Localized concept steering on visual-token hidden states, and its exact judge."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .projector import Projector, project
from .sae import LatentLabelTable, NoDirectionError, SaeModel, concept_direction
from .synthworld import (Scene, World, caption_phrases, caption_prompt, parse_caption,
                         qa_attribute)
from .toylm import ToyLm, generate

KINDS = ("remove", "replace", "attribute")


class SteeringSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SteeringSpec:
    kind: str
    target_positions: tuple[int, ...]
    remove_concept: int | None = None
    add_concept: int | None = None
    layer_set: tuple[int, ...] = (0, 1, 2)
    beta: float = 10.0
    alpha: float = 10.0
    scope: str = "visual"

    def __post_init__(self):
        object.__setattr__(self, "target_positions", tuple(int(p) for p in self.target_positions))
        object.__setattr__(self, "layer_set", tuple(int(l) for l in self.layer_set))
        if self.kind not in KINDS:
            raise SteeringSpecError(f"unknown steering kind {self.kind!r}")
        if self.scope not in ("visual", "text"):
            raise SteeringSpecError(f"unknown scope {self.scope!r}")
        if self.alpha < 0 or self.beta < 0:
            raise SteeringSpecError("steering coefficients must be non-negative")
        if self.kind == "remove" and self.remove_concept is None:
            raise SteeringSpecError("remove needs remove_concept")
        if self.kind in ("replace", "attribute") and self.add_concept is None:
            raise SteeringSpecError(f"{self.kind} needs add_concept")

    @property
    def target(self) -> int:
        """The concept whose presence the judge checks."""
        return self.remove_concept if self.kind == "remove" else self.add_concept


@dataclass
class SteeringReport:
    n_s2: int = 0
    n_s1: int = 0
    n_s0: int = 0
    n_unparseable: int = 0
    n_no_direction: int = 0
    records: list[dict] = field(default_factory=list, repr=False)

    @property
    def n_total(self) -> int:
        return self.n_s2 + self.n_s1 + self.n_s0

    @property
    def mean_score(self) -> float:
        return mean_score(self.n_s2, self.n_s1, self.n_total)

    def add(self, score: int) -> None:
        if score == 2:
            self.n_s2 += 1
        elif score == 1:
            self.n_s1 += 1
        else:
            self.n_s0 += 1

    def summary(self) -> dict:
        return {"n_s2": self.n_s2, "n_s1": self.n_s1, "n_s0": self.n_s0,
                "n_total": self.n_total, "n_unparseable": self.n_unparseable,
                "n_no_direction": self.n_no_direction,
                "mean_score": self.mean_score if self.n_total else None}


def mean_score(n_s2: int, n_s1: int, n_total: int) -> float:
    """(2 * N_S2 + N_S1) / N_total."""
    if n_total <= 0:
        raise ValueError("mean score needs at least one judged output")
    if n_s2 < 0 or n_s1 < 0 or n_s2 + n_s1 > n_total:
        raise ValueError(f"inconsistent counts s2={n_s2} s1={n_s1} total={n_total}")
    return (2 * n_s2 + n_s1) / n_total


# --- intervention ------------------------------------------------------------------------

def steering_vectors(saes: dict[int, SaeModel], tables: dict[int, LatentLabelTable],
                     spec: SteeringSpec, floor: float = 0.3) -> dict[int, np.ndarray]:
    """Per-layer additive vector: -beta * v_remove + alpha * v_add.

    A layer whose SAE has no qualifying latent for a concept simply skips that term; a
    concept that resolves at none of the steering layers raises NoDirectionError.
    """
    terms = [(c, -spec.beta) for c in (spec.remove_concept,) if c is not None and spec.beta]
    terms += [(c, spec.alpha) for c in (spec.add_concept,) if c is not None and spec.alpha]
    out = {}
    found = {c: False for c, _ in terms}
    for l in spec.layer_set:
        if l not in saes:
            raise NoDirectionError(f"no SAE for steering layer {l}")
        vec = np.zeros(saes[l].d_in)
        for c, coef in terms:
            try:
                vec += coef * concept_direction(saes[l], c, tables[l], floor)
                found[c] = True
            except NoDirectionError:
                pass
        out[l] = vec
    missing = [c for c, ok in found.items() if not ok]
    if missing:
        raise NoDirectionError(f"concepts {missing} have no direction at layers "
                               f"{list(spec.layer_set)}")
    return out


def steering_hook(vectors: dict[int, np.ndarray], positions):
    """Hook adding ``vectors[l]`` at ``positions`` after block ``l``; other rows untouched."""
    positions = np.asarray(sorted(set(positions)), dtype=np.int64)

    def hook(layer: int, h: Tensor) -> Tensor:
        vec = vectors.get(layer)
        if vec is None or positions.size == 0:
            return h
        delta = np.zeros(h.shape)
        pos = positions[positions < h.shape[-2]]
        delta[..., pos, :] = vec
        return h + Tensor(delta)

    return hook


def apply_steering(lm: ToyLm, saes, tables, embeddings, spec: SteeringSpec,
                   max_new: int = 12, n_visual: int | None = None,
                   floor: float = 0.3) -> list[int]:
    """Greedy generation with the intervention applied at every decoding step."""
    if n_visual is not None and spec.scope == "visual":
        bad = [p for p in spec.target_positions if not 0 <= p < n_visual]
        if bad:
            raise SteeringSpecError(f"target positions {bad} outside [0, {n_visual})")
    if not spec.layer_set or not spec.target_positions:
        return generate(lm, embeddings, max_new)
    vectors = steering_vectors(saes, tables, spec, floor)
    return generate(lm, embeddings, max_new, steering_hook(vectors, spec.target_positions))


def _steer_or_base(lm, saes, tables, prefix, spec, base, floor, **kw):
    """Steered output, or ``base`` unchanged (flagged) when a concept has no direction."""
    try:
        return apply_steering(lm, saes, tables, prefix, spec, floor=floor, **kw), False
    except NoDirectionError:
        return list(base), True


# --- judging -----------------------------------------------------------------------------

def judge(world: World, scene: Scene, baseline: list[int], steered: list[int],
          spec: SteeringSpec) -> tuple[int, bool]:
    """Exact rule-based score in {0, 1, 2}; second value flags an unparseable caption."""
    base, ok_b = parse_caption(world, baseline)
    new, ok_s = parse_caption(world, steered)
    if not ok_b:
        base = set()
    if not ok_s:
        new = set()
    flagged = not (ok_b and ok_s)
    if spec.kind == "remove":
        if spec.remove_concept in new:
            return 0, flagged
    else:
        if spec.add_concept not in new:
            return 0, flagged
        if spec.remove_concept is not None and spec.remove_concept in new:
            return 0, flagged
    allowed = set(base)
    if spec.kind != "remove":
        allowed.add(spec.add_concept)
    extra = new - allowed
    if not extra:
        return 2, flagged
    return (2 if extra <= scene.concept_set else 1), flagged


# --- evaluation --------------------------------------------------------------------------

def caption_prefix(p: Projector, lm: ToyLm, world: World, visual: np.ndarray | None):
    prompt = lm.embed_tokens(caption_prompt(world))
    if visual is None:
        return prompt.data
    return ad.concat([project(p, visual), prompt], axis=0).data


def eligible_targets(scene: Scene, world: World, lo: int = 1, hi: int = 5) -> list[int]:
    return [c for c in scene.objects if lo <= len(scene.boxes[c]) <= hi]


def run_steering_eval(p: Projector, lm: ToyLm, saes, tables, world: World,
                      scenes: list[Scene], visual: np.ndarray, kind: str,
                      n_scenes: int = 100, seed: int = 0, layer_set=(0, 1, 2),
                      alpha: float = 10.0, beta: float = 10.0,
                      floor: float = 0.3) -> SteeringReport:
    """Steer the first ``n_scenes`` eligible scenes and judge each output.

    ``replace`` removes the boxed object and adds a concept sampled from the scene's
    absent objects.
    """
    if kind not in ("remove", "replace"):
        raise SteeringSpecError(f"evaluation supports remove/replace, got {kind!r}")
    rng = np.random.default_rng([seed, 601, KINDS.index(kind)])
    report = SteeringReport()
    for i, scene in enumerate(scenes):
        if report.n_total >= n_scenes:
            break
        cands = eligible_targets(scene, world)
        if not cands:
            continue
        target = cands[int(rng.integers(len(cands)))]
        add = None
        if kind == "replace":
            absent = [c for c in world.object_ids if c not in scene.concept_set]
            add = absent[int(rng.integers(len(absent)))]
        spec = SteeringSpec(kind, scene.boxes[target], remove_concept=target, add_concept=add,
                            layer_set=layer_set, alpha=alpha, beta=beta)
        prefix = caption_prefix(p, lm, world, visual[i])
        base = generate(lm, prefix, 12)
        steered, missing = _steer_or_base(lm, saes, tables, prefix, spec, base, floor,
                                          n_visual=visual.shape[1])
        score, flagged = judge(world, scene, base, steered, spec)
        report.add(score)
        report.n_unparseable += flagged
        report.n_no_direction += missing
        report.records.append({"scene": scene.seed, "op": kind,
                               "target": world.concepts[spec.target].name,
                               "removed": world.concepts[target].name,
                               "baseline": " ".join(world.vocab.decode(base)),
                               "steered": " ".join(world.vocab.decode(steered)),
                               "score": score, "no_direction": int(missing)})
    return report


def attribute_steer(p: Projector, lm: ToyLm, saes, tables, world: World, scene: Scene,
                    visual: np.ndarray, attribute: int, subject: int,
                    alpha: float = 10.0, layer_set=(0, 1, 2), floor: float = 0.3):
    """Add an attribute direction on the subject's patches; probe with a yes/no question.

    Returns (answer_before, answer_after) as token id lists.
    """
    q, _ = qa_attribute(world, scene, subject, attribute)
    prefix = ad.concat([project(p, visual), lm.embed_tokens(q)], axis=0).data
    before = generate(lm, prefix, 3)
    spec = SteeringSpec("attribute", scene.boxes[subject], add_concept=attribute,
                        layer_set=layer_set, alpha=alpha)
    after, _ = _steer_or_base(lm, saes, tables, prefix, spec, before, floor, max_new=3,
                              n_visual=visual.shape[0])
    return before, after


def text_vs_visual_comparison(p: Projector, lm: ToyLm, saes, tables, world: World,
                              scene: Scene, visual: np.ndarray, source: int, target: int,
                              alpha: float = 10.0, beta: float = 10.0, layer_set=(0, 1, 2),
                              floor: float = 0.3) -> dict:
    """Replace ``source`` by ``target`` under three regimes and judge each caption."""
    n = visual.shape[0]
    n_prompt = len(caption_prompt(world))
    spec_v = SteeringSpec("replace", scene.boxes[source], remove_concept=source,
                          add_concept=target, layer_set=layer_set, alpha=alpha, beta=beta)
    with_img = caption_prefix(p, lm, world, visual)
    no_img = caption_prefix(p, lm, world, None)
    base = generate(lm, with_img, 12)
    out = {"scene": scene.seed, "source": world.concepts[source].name,
           "target": world.concepts[target].name, "source_id": source, "target_id": target,
           "baseline": " ".join(world.vocab.decode(base)),
           "baseline_concepts": sorted(parse_caption(world, base)[0]),
           "keep": sorted({c for o, attrs in caption_phrases(world, base).items()
                           if o != source for c in (o, *attrs)})}
    regimes = {
        "visual": (with_img, spec_v),
        "text_with_image": (with_img, replace(spec_v, scope="text",
                                              target_positions=range(n, n + n_prompt))),
        "text_without_image": (no_img, replace(spec_v, scope="text",
                                               target_positions=range(n_prompt))),
    }
    for name, (prefix, spec) in regimes.items():
        steered, _ = _steer_or_base(lm, saes, tables, prefix, spec, base, floor)
        score, _ = judge(world, scene, base, steered, spec)
        out[name] = {"caption": " ".join(world.vocab.decode(steered)), "score": score,
                     "concepts": sorted(parse_caption(world, steered)[0])}
    return out


def records_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["scene", "op", "target", "removed", "baseline", "steered", "score", "no_direction"]
    w = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(records)
    return buf.getvalue()


def score_table(rows: dict[str, SteeringReport]) -> str:
    """Rows of S2/S1/S0/MS per named run."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "S2", "S1", "S0", "MS"])
    for name, r in rows.items():
        w.writerow([name, r.n_s2, r.n_s1, r.n_s0,
                    f"{r.mean_score:.2f}" if r.n_total else ""])
    return buf.getvalue()


def spec_dict(spec: SteeringSpec) -> dict:
    d = asdict(spec)
    d["target_positions"] = list(spec.target_positions)
    d["layer_set"] = list(spec.layer_set)
    return d
