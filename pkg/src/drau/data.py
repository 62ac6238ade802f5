"""Synthetic grid-world VQA data.

A scene is a g x g grid whose cells may hold one object (shape, color).
Each cell becomes one region feature row: one-hot shape, one-hot color,
normalised position, occupancy, zero padding, plus Gaussian noise. Questions
come from counting, existence, attribute and relational templates with exact
ground truth; each gets ten annotations, each independently replaced by a
wrong answer of the same kind with probability ``rho``.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, VocabLookupError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
PLURAL = {"circle": "circles", "square": "squares", "triangle": "triangles"}
DIRECTIONS = {"left of": (0, -1), "above": (-1, 0)}
CATEGORIES = ("yesno", "number", "other")
NUM_ANNOTATIONS = 10
CLEAN_DIM = len(SHAPES) + len(COLORS) + 3
PAD, UNK = "<pad>", "<unk>"


@dataclass(frozen=True)
class DataConfig:
    side: int = 4
    region_dim: int = 20
    occupancy: float = 0.2
    noise: float = 0.05
    rho: float = 0.1
    questions_per_scene: int = 6
    proportions: tuple = (0.4, 0.3, 0.3)   # yesno, number, other

    def __post_init__(self):
        if self.side < 2:
            raise ConfigError(f"grid side must be >= 2, got {self.side}")
        if self.region_dim < CLEAN_DIM:
            raise ConfigError(f"region_dim must be >= {CLEAN_DIM}")
        if not 0.0 <= self.rho <= 1.0 or not 0.0 < self.occupancy <= 1.0:
            raise ConfigError("rho must be in [0, 1] and occupancy in (0, 1]")
        if len(self.proportions) != 3 or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ConfigError("category proportions must be three values summing to 1")

    @property
    def regions(self):
        return self.side * self.side


@dataclass(frozen=True)
class Scene:
    side: int
    cells: tuple          # row-major; None or (shape, color)
    seed: int

    @property
    def objects(self):
        return [(i, c) for i, c in enumerate(self.cells) if c is not None]

    def at(self, row, col):
        if 0 <= row < self.side and 0 <= col < self.side:
            return self.cells[row * self.side + col]
        return None


@dataclass
class VQASample:
    id: int
    question: str
    tokens: list
    category: str
    features: np.ndarray
    annotations: list
    scene_seed: int

    def __eq__(self, other):
        if not isinstance(other, VQASample):
            return NotImplemented
        return (self.id == other.id and self.question == other.question
                and list(self.tokens) == list(other.tokens)
                and self.category == other.category
                and np.array_equal(self.features, other.features)
                and list(self.annotations) == list(other.annotations)
                and self.scene_seed == other.scene_seed)

    @property
    def majority(self):
        return Counter(self.annotations).most_common(1)[0][0]


class Vocab:
    """Token and answer maps. Token id 0 is padding, 1 is unknown."""

    def __init__(self, tokens, answers):
        self.tokens = list(tokens)
        self.answers = list(answers)
        self.token_ids = {t: i for i, t in enumerate(self.tokens)}
        self.answer_ids = {a: i for i, a in enumerate(self.answers)}
        if self.tokens[:2] != [PAD, UNK]:
            raise ConfigError("vocab must start with <pad>, <unk>")

    @classmethod
    def build(cls, side):
        words = ["how", "many", "objects", "are", "there", "is", "a", "what",
                 "color", "the", "left", "of", "above"]
        words += list(COLORS) + list(SHAPES) + [PLURAL[s] for s in SHAPES]
        answers = ["yes", "no"] + [str(n) for n in range(side * side + 1)]
        answers += list(COLORS) + [f"{c} {s}" for c in COLORS for s in SHAPES] + ["nothing"]
        return cls([PAD, UNK] + words, answers)

    def encode(self, text):
        return [self.token_ids.get(w, self.token_ids[UNK]) for w in text.split()]

    def answer_id(self, answer):
        try:
            return self.answer_ids[answer]
        except KeyError:
            raise VocabLookupError(answer) from None

    def __eq__(self, other):
        return self.tokens == other.tokens and self.answers == other.answers

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("[tokens]\n")
            fh.writelines(f"{i}\t{t}\n" for i, t in enumerate(self.tokens))
            fh.write("[answers]\n")
            fh.writelines(f"{i}\t{a}\n" for i, a in enumerate(self.answers))

    @classmethod
    def read(cls, path):
        sections = {"tokens": [], "answers": []}
        current = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if line in ("[tokens]", "[answers]"):
                    current = sections[line[1:-1]]
                    continue
                if current is None or "\t" not in line:
                    raise ParseError(f"bad vocab entry {line!r}", lineno)
                idx, text = line.split("\t", 1)
                if int(idx) != len(current):
                    raise ParseError(f"vocab ids out of order at {idx}", lineno)
                current.append(text)
        return cls(sections["tokens"], sections["answers"])


# -- scenes and features --------------------------------------------------------

def generate_scene(seed, side=4, occupancy=0.2):
    if side < 2:
        raise ConfigError(f"grid side must be >= 2, got {side}")
    rng = np.random.default_rng(seed)
    K = side * side
    occupied = rng.random(K) < occupancy
    if not occupied.any():
        occupied[rng.integers(K)] = True
    shapes = rng.integers(len(SHAPES), size=K)
    colors = rng.integers(len(COLORS), size=K)
    cells = tuple((SHAPES[shapes[i]], COLORS[colors[i]]) if occupied[i] else None
                  for i in range(K))
    return Scene(side, cells, int(seed))


def clean_features(scene, region_dim=20):
    K = scene.side * scene.side
    out = np.zeros((K, region_dim))
    for i, cell in enumerate(scene.cells):
        row, col = divmod(i, scene.side)
        out[i, 7] = (col + 0.5) / scene.side
        out[i, 8] = (row + 0.5) / scene.side
        if cell is not None:
            shape, color = cell
            out[i, SHAPES.index(shape)] = 1.0
            out[i, len(SHAPES) + COLORS.index(color)] = 1.0
            out[i, 9] = 1.0
    return out


def region_features(scene, noise=0.05, seed=0, region_dim=20):
    """Clean one-hot/position/occupancy rows plus N(0, noise^2) on every entry."""
    feats = clean_features(scene, region_dim)
    if noise > 0:
        feats = feats + np.random.default_rng(seed).normal(0.0, noise, size=feats.shape)
    return feats


def decode_cell(row):
    """(shape, color) or None from a clean-ish feature row."""
    if row[9] < 0.5:
        return None
    return SHAPES[int(np.argmax(row[:3]))], COLORS[int(np.argmax(row[3:7]))]


# -- questions -------------------------------------------------------------------

def count_answer(scene, color=None, shape=None):
    return sum(1 for _, (s, c) in scene.objects
               if (color is None or c == color) and (shape is None or s == shape))


def neighbor(scene, index, direction):
    """Cell content one step in ``direction``; ``False`` when off the grid."""
    dr, dc = DIRECTIONS[direction]
    row, col = divmod(index, scene.side)
    r, c = row + dr, col + dc
    if not (0 <= r < scene.side and 0 <= c < scene.side):
        return False
    return scene.at(r, c)


def _describe(cell):
    return "nothing" if cell is None else f"{cell[1]} {cell[0]}"


def _counting(scene, rng):
    pick = rng.integers(3)
    if pick == 0:
        return "how many objects are there", str(len(scene.objects)), "count"
    if pick == 1:
        color = COLORS[rng.integers(len(COLORS))]
        return (f"how many {color} objects are there",
                str(count_answer(scene, color=color)), "count")
    shape = SHAPES[rng.integers(len(SHAPES))]
    return (f"how many {PLURAL[shape]} are there",
            str(count_answer(scene, shape=shape)), "count")


def _existence(scene, rng):
    if rng.random() < 0.5:
        _, (shape, color) = scene.objects[rng.integers(len(scene.objects))]
    else:
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
    present = count_answer(scene, color=color, shape=shape) > 0
    return f"is there a {color} {shape}", "yes" if present else "no", "exist"


def _attribute_options(scene):
    counts = Counter(s for _, (s, _c) in scene.objects)
    return [s for s in SHAPES if counts[s] == 1]


def _relational_options(scene):
    counts = Counter(cell for _, cell in scene.objects)
    out = []
    for idx, cell in scene.objects:
        if counts[cell] != 1:
            continue
        for direction in DIRECTIONS:
            if neighbor(scene, idx, direction) is not False:
                out.append((idx, direction))
    return out


def _other(scene, rng):
    attr = _attribute_options(scene)
    rel = _relational_options(scene)
    if not attr and not rel:
        return None
    if attr and (not rel or rng.random() < 0.5):
        shape = attr[rng.integers(len(attr))]
        color = next(c for _, (s, c) in scene.objects if s == shape)
        return f"what color is the {shape}", color, "attribute"
    idx, direction = rel[rng.integers(len(rel))]
    shape, color = scene.cells[idx]
    answer = _describe(neighbor(scene, idx, direction))
    return f"what is {direction} the {color} {shape}", answer, "relational"


def answer_pool(kind, side):
    if kind == "exist":
        return ["yes", "no"]
    if kind == "count":
        return [str(n) for n in range(side * side + 1)]
    if kind == "attribute":
        return list(COLORS)
    return [f"{c} {s}" for c in COLORS for s in SHAPES] + ["nothing"]


def annotate(truth, kind, side, rho, rng):
    pool = [a for a in answer_pool(kind, side) if a != truth]
    return [pool[rng.integers(len(pool))] if rng.random() < rho else truth
            for _ in range(NUM_ANNOTATIONS)]


_TEMPLATES = {"yesno": _existence, "number": _counting, "other": _other}


def generate_questions(scene, features, rng, vocab, config=DataConfig(), start_id=0):
    """Questions about one scene; slots whose category has no applicable
    template in this scene are dropped."""
    samples = []
    for _ in range(config.questions_per_scene):
        category = CATEGORIES[rng.choice(3, p=config.proportions)]
        made = _TEMPLATES[category](scene, rng)
        if made is None:
            continue
        question, truth, kind = made
        samples.append(VQASample(
            id=start_id + len(samples), question=question, tokens=vocab.encode(question),
            category=category, features=features,
            annotations=annotate(truth, kind, scene.side, config.rho, rng),
            scene_seed=scene.seed))
    return samples


def scene_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(num_scenes, seed=0, config=DataConfig()):
    """(train, val, vocab). Scenes with an even seed go to train."""
    vocab = Vocab.build(config.side)
    train, val = [], []
    next_id = 0
    for i in range(num_scenes):
        s = scene_seed(seed, i)
        scene = generate_scene(s, config.side, config.occupancy)
        feats = region_features(scene, config.noise, seed=[s, 2], region_dim=config.region_dim)
        qs = generate_questions(scene, feats, np.random.default_rng([s, 1]), vocab,
                                config, start_id=next_id)
        next_id += len(qs)
        (train if s % 2 == 0 else val).extend(qs)
    return train, val, vocab


def generate_split(num_samples, split="train", seed=0, config=DataConfig()):
    """First ``num_samples`` questions of one split, generating scenes as needed."""
    vocab = Vocab.build(config.side)
    want = 0 if split == "train" else 1
    out = []
    i = 0
    next_id = 0
    while len(out) < num_samples:
        s = scene_seed(seed, i)
        i += 1
        if s % 2 != want:
            continue
        scene = generate_scene(s, config.side, config.occupancy)
        feats = region_features(scene, config.noise, seed=[s, 2], region_dim=config.region_dim)
        qs = generate_questions(scene, feats, np.random.default_rng([s, 1]), vocab,
                                config, start_id=next_id)
        next_id += len(qs)
        out.extend(qs)
    return out[:num_samples], vocab


def consensus_ceiling(samples):
    """Best achievable mean consensus accuracy (always answering the majority)."""
    if not samples:
        return 0.0
    return float(np.mean([min(Counter(s.annotations).most_common(1)[0][1] / 3.0, 1.0)
                          for s in samples]))


# -- files -----------------------------------------------------------------------

def _record(sample):
    return json.dumps({
        "id": sample.id, "question": sample.question, "tokens": list(map(int, sample.tokens)),
        "category": sample.category, "features": sample.features.ravel().tolist(),
        "annotations": list(sample.annotations), "scene_seed": sample.scene_seed,
    }, ensure_ascii=False)


def write_dataset(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(_record(s) + "\n")


def read_dataset(path, region_dim=20):
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                feats = np.asarray(r["features"], dtype=np.float64)
                if feats.size % region_dim:
                    raise ValueError(f"{feats.size} features not a multiple of {region_dim}")
                if len(r["annotations"]) != NUM_ANNOTATIONS:
                    raise ValueError(f"{len(r['annotations'])} annotations")
                samples.append(VQASample(
                    id=int(r["id"]), question=r["question"], tokens=[int(t) for t in r["tokens"]],
                    category=r["category"], features=feats.reshape(-1, region_dim),
                    annotations=list(r["annotations"]), scene_seed=int(r["scene_seed"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed record: {exc}", lineno) from None
    return samples


def category_counts(samples):
    counts = Counter(s.category for s in samples)
    return {c: counts.get(c, 0) for c in CATEGORIES}


def question_kind(question):
    """Template family of a generated question: count, exist, attribute, relational."""
    if question.startswith("how many"):
        return "count"
    if question.startswith("is there"):
        return "exist"
    if question.startswith("what color"):
        return "attribute"
    if question.startswith("what is"):
        return "relational"
    return "unknown"
