"""Deterministic synthetic byte corpus with long-range copy dependencies.

Each document opens with a short record (a name, a city, a colour and a
five-digit code), continues with templated filler sentences, and ends with
questions whose answers must be copied from the record.
"""
from __future__ import annotations

import random
from pathlib import Path

FIRST = ["Alba", "Bruno", "Celia", "Dario", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas",
         "Katia", "Leon", "Marta", "Nils", "Olga", "Pavel", "Rosa", "Sven", "Tessa", "Ugo"]
LAST = ["Corvin", "Delane", "Ferro", "Gallo", "Hart", "Ivers", "Kranz", "Lund", "Moreau", "Novak",
        "Orsini", "Pratt", "Quist", "Rinaldi", "Serra", "Tamm", "Varga", "Weiss", "Yates", "Zorn"]
CITY = ["Lisbon", "Oslo", "Turin", "Quebec", "Krakow", "Dublin", "Porto", "Ghent", "Bergen", "Lyon",
        "Malmo", "Zagreb", "Tallinn", "Seville", "Basel", "Leeds"]
COLOR = ["amber", "blue", "crimson", "green", "indigo", "ochre", "silver", "teal", "violet", "white"]
OBJECT = ["lamp", "kettle", "ladder", "violin", "bicycle", "compass", "notebook", "basket", "clock", "rope"]
PLACE = ["market", "harbour", "library", "garden", "station", "bakery", "museum", "workshop"]
VERB = ["carried", "repaired", "painted", "sold", "found", "borrowed", "cleaned", "wrapped"]
TIME = ["in the morning", "at noon", "before dinner", "late at night", "on Sunday", "after the rain"]

FILLER = [
    "{who} walked to the {place} {time}.",
    "At the {place}, {who} {verb} the {color} {obj}.",
    "The {obj} was {color} and very old.",
    "{who} said that the {place} in {city} was quiet {time}.",
    "Nobody {verb} the {obj} {time}.",
    "A neighbour {verb} the {obj} near the {place}.",
]


def _document(rng: random.Random) -> str:
    first, last = rng.choice(FIRST), rng.choice(LAST)
    name = f"{first} {last}"
    city, color, code = rng.choice(CITY), rng.choice(COLOR), rng.randint(10000, 99999)
    parts = [f"Record of {name}. City: {city}. Colour: {color}. Code: {code}."]
    for _ in range(rng.randint(2, 7)):
        sentence = rng.choice(FILLER).format(
            who=rng.choice([first, name, "the visitor"]), place=rng.choice(PLACE), time=rng.choice(TIME),
            verb=rng.choice(VERB), color=rng.choice(COLOR), obj=rng.choice(OBJECT), city=city)
        parts.append(sentence[0].upper() + sentence[1:])
    questions = [
        f"Where does {name} live? {first} lives in {city}.",
        f"What colour does {first} like? {first} likes {color}.",
        f"What is the code of {name}? The code is {code}.",
    ]
    rng.shuffle(questions)
    parts.extend(questions[: rng.randint(1, 3)])
    return " ".join(parts) + "\n"


def generate(n_bytes: int, seed: int = 0) -> bytes:
    """Return exactly ``n_bytes`` bytes of synthetic text for ``seed``."""
    rng = random.Random(seed)
    chunks, size = [], 0
    while size < n_bytes:
        doc = _document(rng).encode("ascii")
        chunks.append(doc)
        size += len(doc)
    return b"".join(chunks)[:n_bytes]


def write(path, n_bytes: int, seed: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(generate(n_bytes, seed))
    return path
