"""Byte tokenizer, sample rendering, JSONL ingestion and synthetic datasets."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BOS, PAD, USR, SYS, SEP = 256, 257, 258, 259, 260
VOCAB_SIZE = 261
SPECIAL = {"[BOS]": BOS, "[PAD]": PAD, "[USR]": USR, "[SYS]": SYS, "[SEP]": SEP}
SPECIAL_NAMES = {v: k for k, v in SPECIAL.items()}
_SPECIAL_RE = re.compile("|".join(re.escape(k) for k in SPECIAL))

ROLE_BOS, ROLE_KNOW, ROLE_USR, ROLE_SYS = 0, 1, 2, 3

TEMPLATE_OPEN = "Imagine that { "
TEMPLATE_CLOSE = " }"
LABELS = ("True", "False", "Unknown")


class OverlongError(ValueError):
    def __init__(self, length: int, limit: int):
        super().__init__(f"rendered length {length} exceeds max_context {limit}")
        self.length = length
        self.limit = limit


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes, with literal special markers such as ``[SEP]`` mapped to their ids."""
    out: list[int] = []
    pos = 0
    for m in _SPECIAL_RE.finditer(text):
        out.extend(text[pos:m.start()].encode("utf-8", errors="surrogateescape"))
        out.append(SPECIAL[m.group()])
        pos = m.end()
    out.extend(text[pos:].encode("utf-8", errors="surrogateescape"))
    return out


def detokenize(ids) -> str:
    parts: list[str] = []
    buf = bytearray()
    for t in ids:
        t = int(t)
        if t < 256:
            buf.append(t)
            continue
        if buf:
            parts.append(buf.decode("utf-8", errors="surrogateescape"))
            buf = bytearray()
        parts.append(SPECIAL_NAMES[t])
    if buf:
        parts.append(buf.decode("utf-8", errors="surrogateescape"))
    return "".join(parts)


@dataclass
class KnowledgeSample:
    knowledge: list[str]
    source: str
    target: str
    sample_id: str = ""


@dataclass
class EditSample:
    subject: str
    relation: str
    true_object: str
    counter_object: str
    prompt: str
    paraphrases: list[str] = field(default_factory=list)
    neighborhood: list[str] = field(default_factory=list)


@dataclass
class Rendered:
    """A rendered sample. ``ids`` is the knowledge run; ``plain_ids`` the input-only run."""

    ids: np.ndarray
    roles: np.ndarray
    k_len: int

    @property
    def plain_ids(self) -> np.ndarray:
        return np.concatenate([self.ids[:1], self.ids[1 + self.k_len:]])

    @property
    def plain_roles(self) -> np.ndarray:
        return np.concatenate([self.roles[:1], self.roles[1 + self.k_len:]])

    @property
    def x_len(self) -> int:
        """Length of the plain run, BOS included."""
        return len(self.ids) - self.k_len


def render_knowledge(knowledge: list[str]) -> list[int]:
    if not knowledge:
        return []
    return tokenize(TEMPLATE_OPEN + " [SEP] ".join(knowledge) + TEMPLATE_CLOSE)


def render(sample: KnowledgeSample, max_context: int | None = None) -> Rendered:
    k = render_knowledge(sample.knowledge)
    src = tokenize(sample.source)
    tgt = tokenize(sample.target)
    ids = [BOS] + k + [USR] + src + [SYS] + tgt
    roles = ([ROLE_BOS] + [ROLE_KNOW] * len(k) + [ROLE_USR] * (1 + len(src))
             + [ROLE_SYS] * (1 + len(tgt)))
    if max_context is not None and len(ids) > max_context:
        raise OverlongError(len(ids), max_context)
    return Rendered(np.array(ids, dtype=np.int64), np.array(roles, dtype=np.int8), len(k))


def target_mask(roles: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """True at target tokens, i.e. every SYS-role token except the [SYS] marker itself."""
    return (roles == ROLE_SYS) & (ids != SYS)


# ---------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------

@dataclass
class LoadReport:
    samples: list[KnowledgeSample]
    errors: list[tuple[int, str]]


def load_jsonl(path, strict: bool = False) -> LoadReport:
    samples: list[KnowledgeSample] = []
    errors: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append((lineno, f"invalid JSON: {exc.msg}"))
                continue
            if not isinstance(obj, dict):
                errors.append((lineno, "line is not an object"))
                continue
            missing = [k for k in ("knowledge", "source", "target") if k not in obj]
            if missing:
                errors.append((lineno, f"missing key(s): {', '.join(missing)}"))
                continue
            kn = obj["knowledge"]
            if not isinstance(kn, list) or not all(isinstance(s, str) for s in kn):
                errors.append((lineno, "knowledge must be an array of strings"))
                continue
            if not isinstance(obj["source"], str) or not isinstance(obj["target"], str):
                errors.append((lineno, "source and target must be strings"))
                continue
            if not obj["target"]:
                errors.append((lineno, "empty target: no [SYS] tokens to train on"))
                continue
            samples.append(KnowledgeSample(kn, obj["source"], obj["target"], str(obj.get("id", lineno))))
    if strict and errors:
        raise ValueError(f"{path}: {len(errors)} malformed line(s), first at line {errors[0][0]}: {errors[0][1]}")
    for lineno, msg in errors:
        log.warning("%s:%d: %s", path, lineno, msg)
    return LoadReport(samples, errors)


def write_jsonl(path, samples: list[KnowledgeSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"id": s.sample_id, "knowledge": s.knowledge,
                                 "source": s.source, "target": s.target}) + "\n")


def write_edit_jsonl(path, edits: list[EditSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in edits:
            fh.write(json.dumps(asdict(e)) + "\n")


def load_edit_jsonl(path) -> list[EditSample]:
    with open(path, encoding="utf-8") as fh:
        return [EditSample(**json.loads(line)) for line in fh if line.strip()]


def write_manifest(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={values[k]}\n" for k in sorted(values)))


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


# ---------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------

_LOWER = np.array(list("abcdefghijklmnopqrstuvwxyz"))
_UPPER = np.array(list("ABCDEFGHIJKLMNOPQRSTUVWXYZ"))


def _word(rng, letters, n) -> str:
    return "".join(rng.choice(letters, size=n))


def gen_kv_dataset(n_entities: int, n_distractors: int, seed: int, key_len: int = 3,
                   value_len: int = 3, split=(0.8, 0.1, 0.1)):
    """Key/value recall samples: the answer is a random value stated in the knowledge.

    Returns (train, val, test); the three splits use disjoint keys.
    """
    rng = np.random.default_rng([seed, 0x6B76])
    keys: list[str] = []
    seen: set[str] = set()
    while len(keys) < n_entities:
        k = _word(rng, _LOWER, key_len)
        if k not in seen:
            seen.add(k)
            keys.append(k)
    n_train = int(round(split[0] * n_entities))
    n_val = int(round(split[1] * n_entities))
    pools = [keys[:n_train], keys[n_train:n_train + n_val], keys[n_train + n_val:]]
    out = []
    for name, pool in zip(("train", "val", "test"), pools):
        samples = []
        for i, key in enumerate(pool):
            value = _word(rng, _UPPER, value_len)
            facts = [f"{key} is {value}"]
            others = [k for k in pool if k != key]
            for _ in range(n_distractors):
                dk = others[rng.integers(len(others))] if others else _word(rng, _LOWER, key_len)
                facts.append(f"{dk} is {_word(rng, _UPPER, value_len)}")
            order = rng.permutation(len(facts))
            samples.append(KnowledgeSample([facts[j] for j in order], f"what is {key}?", value,
                                           f"kv-{name}-{i}"))
        out.append(samples)
    return tuple(out)


_RELATIONS = {
    "lives_in": {
        "prompt": "{} lives in",
        "paraphrases": ["The home of {} is", "{} has a house in"],
        "objects": ["Paris", "Rome", "Oslo", "Lima", "Cairo", "Tokyo"],
    },
    "speaks": {
        "prompt": "{} speaks",
        "paraphrases": ["The language of {} is", "{} talks in"],
        "objects": ["French", "Hindi", "Polish", "Dutch", "Korean", "Greek"],
    },
    "works_as": {
        "prompt": "{} works as a",
        "paraphrases": ["The job of {} is", "{} is employed as a"],
        "objects": ["baker", "pilot", "nurse", "judge", "miner", "tailor"],
    },
}
_SYLLABLES = ["ka", "lo", "mi", "ren", "tu", "sa", "vel", "do", "ri", "na", "bo", "zel", "fa", "gu"]


@dataclass
class CounterfactWorld:
    subjects: list[str]
    facts: dict  # (subject, relation) -> object

    def fact_samples(self) -> list[KnowledgeSample]:
        """Every true fact in every prompt form, knowledge-free."""
        out = []
        for (subj, rel), obj in sorted(self.facts.items()):
            spec = _RELATIONS[rel]
            for tmpl in [spec["prompt"]] + spec["paraphrases"]:
                out.append(KnowledgeSample([], tmpl.format(subj), obj, f"fact-{subj}-{rel}"))
        return out


def gen_counterfact_world(n_subjects: int, seed: int) -> CounterfactWorld:
    rng = np.random.default_rng([seed, 0x6366])
    subjects: list[str] = []
    seen: set[str] = set()
    while len(subjects) < n_subjects:
        first = "".join(rng.choice(_SYLLABLES, size=2)).capitalize()
        if first not in seen:
            seen.add(first)
            subjects.append(first)
    facts = {}
    for s in subjects:
        for rel, spec in _RELATIONS.items():
            facts[(s, rel)] = str(rng.choice(spec["objects"]))
    return CounterfactWorld(subjects, facts)


def gen_counterfact_dataset(n_edits: int, seed: int, n_subjects: int | None = None,
                            n_neighbors: int = 2) -> list[EditSample]:
    """Counterfactual edits over a synthetic fact world (see :func:`gen_counterfact_world`)."""
    world = gen_counterfact_world(n_subjects or max(3 * n_edits, 30), seed)
    return counterfact_edits(world, n_edits, seed, n_neighbors)


def counterfact_edits(world: CounterfactWorld, n_edits: int, seed: int,
                      n_neighbors: int = 2) -> list[EditSample]:
    rng = np.random.default_rng([seed, 0x6564])
    keys = sorted(world.facts)
    order = rng.permutation(len(keys))
    edits: list[EditSample] = []
    used_subjects: set[str] = set()
    for j in order:
        if len(edits) == n_edits:
            break
        subj, rel = keys[j]
        if subj in used_subjects:
            continue
        true_obj = world.facts[(subj, rel)]
        spec = _RELATIONS[rel]
        neighbors = [s for s in world.subjects if s != subj and world.facts[(s, rel)] == true_obj]
        if len(neighbors) < n_neighbors:
            continue
        chosen = [neighbors[i] for i in rng.choice(len(neighbors), size=n_neighbors, replace=False)]
        counters = [o for o in spec["objects"] if o != true_obj]
        counter = str(counters[rng.integers(len(counters))])
        used_subjects.add(subj)
        edits.append(EditSample(
            subject=subj, relation=rel, true_object=true_obj, counter_object=counter,
            prompt=spec["prompt"].format(subj),
            paraphrases=[p.format(subj) for p in spec["paraphrases"]],
            neighborhood=[spec["prompt"].format(s) for s in chosen],
        ))
    if len(edits) < n_edits:
        raise ValueError(f"world too small for {n_edits} edits with {n_neighbors} neighbours each")
    return edits


_ENTITIES = ["cat", "dog", "bear", "mouse", "lion", "cow", "rabbit", "tiger", "squirrel", "eagle"]
_ATTRS = ["red", "big", "cold", "kind", "round", "young", "blue", "rough", "nice", "green"]


def gen_rules_dataset(n_samples: int, seed: int) -> list[KnowledgeSample]:
    """One-hop facts-and-rules entailment with balanced True/False/Unknown labels."""
    rng = np.random.default_rng([seed, 0x7275])
    out = []
    for i in range(n_samples):
        label = LABELS[i % 3]
        ents = list(rng.choice(_ENTITIES, size=3, replace=False))
        attrs = list(rng.choice(_ATTRS, size=5, replace=False))
        e1, e2, absent = ents
        a1, a2, b1, b2, spare = attrs
        facts = [f"the {e1} is {a1}", f"the {e2} is {a2}"]
        rules = [f"if something is {a1} then it is {b1}", f"if something is {a2} then it is {b2}"]
        hop = int(rng.integers(2))
        if label == "True":
            stmt = f"the {e1} is {a1}" if hop == 0 else f"the {e1} is {b1}"
        elif label == "False":
            stmt = f"the {e1} is not {a1}" if hop == 0 else f"the {e1} is not {b1}"
        else:
            stmt = f"the {absent} is {a1}" if hop == 0 else f"the {e2} is {spare}"
        knowledge = facts + rules
        knowledge = [knowledge[j] for j in rng.permutation(len(knowledge))]
        out.append(KnowledgeSample(knowledge, stmt, label, f"rules-{i}"))
    perm = rng.permutation(n_samples)
    return [out[j] for j in perm]


def rules_label(sample: KnowledgeSample) -> str:
    """Reference labeller for :func:`gen_rules_dataset` samples (closed-world over stated rules)."""
    facts: dict[str, set[str]] = {}
    rules: list[tuple[str, str]] = []
    for k in sample.knowledge:
        m = re.fullmatch(r"if something is (\w+) then it is (\w+)", k)
        if m:
            rules.append((m.group(1), m.group(2)))
            continue
        m = re.fullmatch(r"the (\w+) is (\w+)", k)
        facts.setdefault(m.group(1), set()).add(m.group(2))
    for ent in facts:
        for a, b in rules:
            if a in facts[ent]:
                facts[ent] = facts[ent] | {b}
    m = re.fullmatch(r"the (\w+) is (not )?(\w+)", sample.source)
    ent, neg, attr = m.group(1), m.group(2), m.group(3)
    if ent not in facts or attr not in facts[ent]:
        return "Unknown"
    return "False" if neg else "True"
