"""Seeded synthetic corpus where knowing the critical entity matters.

Every query asks about one facet (color, origin, use, material) of a
hidden object.  The question itself only names the object's category
("what color is this fruit"), so the query text alone cannot pin down the
answer.  The object shows up in the entity set: always (or mostly) as a
sub-question answer, sometimes among the image tags next to unrelated
objects.  Answer candidates contain the true answer only part of the time.

Passage kinds:

* object-facet passages mention the object, the facet and its answer;
* background passages mention the object but no answer;
* answer passages mention an answer word without any object;
* facet passages mention a category and facet but no answer;
* filler passages share none of the above vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Entity, Passage, QueryExample

CATEGORIES = ("fruit", "animal", "vehicle", "tool", "toy")

FACETS = {
    "color": {
        "answers": ("red", "green", "yellow", "purple", "orange", "brown", "white", "black"),
        "fact": "the {obj} is usually {ans} in color",
        "questions": ("what color is this {cat}", "which color does this {cat} have"),
        "generic": "many kinds of {cat} differ in color",
    },
    "origin": {
        "answers": ("peru", "china", "mexico", "india", "spain", "egypt", "brazil", "japan"),
        "fact": "the {obj} originally comes from {ans}",
        "questions": ("where does this {cat} come from", "which country is this {cat} from"),
        "generic": "every {cat} comes from some country of origin",
    },
    "use": {
        "answers": ("cooking", "painting", "racing", "cleaning", "farming", "hunting", "sewing", "fishing"),
        "fact": "the {obj} is mostly used for {ans}",
        "questions": ("what is this {cat} used for", "what do people use this {cat} for"),
        "generic": "a {cat} can be used for many different purposes",
    },
    "material": {
        "answers": ("wood", "steel", "glass", "cotton", "rubber", "clay", "wool", "plastic"),
        "fact": "the {obj} is typically made of {ans}",
        "questions": ("what is this {cat} made of", "which material is this {cat} made of"),
        "generic": "a {cat} can be made of many materials",
    },
}

FILLER = (
    "people often talk about it in old stories and local legends "
    "the region has a long history of trade markets and seasonal festivals "
    "visitors describe the landscape as calm quiet and full of small villages "
    "scholars have written many books about the topic over several centuries "
    "the museum keeps records letters maps and photographs from that period "
    "children learn simple songs about rivers hills bridges and roads "
    "the town council meets every week to discuss roads schools and parks "
    "travellers usually arrive by train during the warm summer months "
    "writers praise the gentle weather and the friendly neighbours there "
    "the library opens early and closes late on most weekdays"
).split()

PLACES = ("table", "street", "kitchen", "garden", "beach", "shelf", "field", "room")
SCENES = ("photo", "picture", "snapshot", "image")

_SYLLABLES = ("ba", "ko", "ri", "zu", "ne", "lo", "ta", "vi", "mu", "sa", "pe", "do", "xi", "ga", "fo", "ly")


@dataclass
class SynthDataset:
    passages: list[Passage]
    train_queries: list[QueryExample]
    eval_queries: list[QueryExample]
    objects: dict[str, str]  # object -> category
    answers: dict[tuple[str, str], str]  # (object, facet) -> answer


def _object_names(n: int, rng: np.random.Generator) -> list[str]:
    names: set[str] = set()
    while len(names) < n:
        names.add("".join(rng.choice(_SYLLABLES, size=3)))
    return sorted(names)


def _filler(rng: np.random.Generator, n: int) -> str:
    start = int(rng.integers(0, len(FILLER) - n))
    return " ".join(FILLER[start : start + n])


def generate(
    n_queries: int = 400,
    n_train: int | None = None,
    objects_per_category: int = 8,
    n_filler: int = 1400,
    p_tag_true: float = 0.5,
    p_subq_true: float = 0.8,
    p_cand_true: float = 0.6,
    seed: int = 0,
) -> SynthDataset:
    """Build passages and queries; ``n_train`` defaults to 60% of the queries."""
    rng = np.random.default_rng(seed)
    names = _object_names(len(CATEGORIES) * objects_per_category, rng)
    rng.shuffle(names)
    objects = {o: CATEGORIES[i // objects_per_category] for i, o in enumerate(names)}
    by_cat = {c: [o for o, oc in objects.items() if oc == c] for c in CATEGORIES}
    answers = {(o, f): str(rng.choice(spec["answers"])) for o in objects for f, spec in FACETS.items()}

    texts: list[str] = []
    for o, cat in objects.items():
        for f, spec in FACETS.items():
            fact = spec["fact"].format(obj=o, ans=answers[o, f])
            for _ in range(2):
                texts.append(f"{o} is a kind of {cat}. {fact}. {_filler(rng, 8)}.")
        for _ in range(2):
            texts.append(f"{o} is a kind of {cat}. {_filler(rng, 10)}. {_filler(rng, 6)}.")
    for f, spec in FACETS.items():
        for ans in spec["answers"]:
            for _ in range(3):
                texts.append(f"the word {ans} shows up in many stories. {_filler(rng, 10)}.")
        for cat in CATEGORIES:
            for _ in range(10):
                texts.append(f"{spec['generic'].format(cat=cat)}. {_filler(rng, 12)}.")
    for _ in range(n_filler):
        texts.append(f"{_filler(rng, 12)}. {_filler(rng, 8)}.")
    order = rng.permutation(len(texts))
    width = len(str(len(texts)))
    passages = [Passage(f"p{i:0{width}d}", texts[j]) for i, j in enumerate(order)]

    queries = []
    facet_names = list(FACETS)
    for qi in range(n_queries):
        o = str(rng.choice(names))
        cat = objects[o]
        f = facet_names[int(rng.integers(len(facet_names)))]
        spec = FACETS[f]
        ans = answers[o, f]
        question = str(rng.choice(spec["questions"])).format(cat=cat)
        place = str(rng.choice(PLACES))
        caption = f"a {rng.choice(SCENES)} of a {cat} on the {place}"

        others = [x for x in names if objects[x] != cat]
        tags = [str(x) for x in rng.choice(others, size=2, replace=False)]
        if rng.random() < p_tag_true:
            tags.insert(int(rng.integers(0, 3)), o)
        if rng.random() < p_subq_true:
            sub = o
        else:
            sub = str(rng.choice([x for x in by_cat[cat] if x != o]))
        wrong = [a for a in spec["answers"] if a != ans]
        cands = [str(a) for a in rng.choice(wrong, size=2, replace=False)]
        if rng.random() < p_cand_true:
            cands.insert(int(rng.integers(0, 3)), ans)
        else:
            cands.append(str(rng.choice([a for a in wrong if a not in cands])))

        ents = [Entity(t, "tag") for t in tags]
        ents.append(Entity(str(rng.choice(others)), "wikidata"))
        ents.append(Entity(place, "caption"))
        ents.append(Entity(cat, "question"))
        ents.append(Entity(sub, "sub_question"))
        ents.extend(Entity(c, "candidate") for c in cands)
        # drop accidental (text, source) repeats
        seen, uniq = set(), []
        for e in ents:
            if (e.text, e.source) not in seen:
                seen.add((e.text, e.source))
                uniq.append(e)
        queries.append(QueryExample(f"q{qi:04d}", question, (ans,), caption, tuple(uniq)))

    n_train = int(round(0.6 * n_queries)) if n_train is None else n_train
    return SynthDataset(passages, queries[:n_train], queries[n_train:], objects, answers)
