#!/usr/bin/env python3
"""Freeze the 50-pair BLEU fixture corpus scored by the independent oracle.

Run once from the repo root; the resulting JSON is committed and the test
suite compares the library implementation against these frozen values.
"""

import json
import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from bleu_oracle import oracle_bleu4  # noqa: E402

HAND_PAIRS = [
    ("a black teddy bear sitting on a bed", "a black teddy bear sitting on a bed"),
    ("a black teddy bear sitting on a bed", "a brown teddy bear sitting on a bed"),
    ("a dog chewing on a bone", "a photo of a cute dog"),
    ("two children fly a red kite", "children flying a red kite on the beach"),
    ("the cat sleeps", "a photo of a tabby cat sleeping on a sofa"),
    ("a bowl of fruit on a wooden table, freshly washed",
     "a bowl of fresh fruit on a wooden table"),
    ("an elephant wearing a small red bow on its head",
     "an elephant with a red bow on its head"),
    ("a plate with french fries and a burger", "french fries on a white plate"),
    ("birds flying over a clear blue sky above the mountains",
     "birds in the sky over a mountain range"),
    ("it's a sunny day at the beach", "it's a rainy day at the beach"),
    ("the woman, smiling, holds an umbrella", "a woman holding an umbrella"),
    ("a red car parked on the street", "a blue car parked on the street"),
    ("completely unrelated words here", "nothing matches in this sentence"),
    ("one two three four five six", "one two three four five six seven eight"),
    ("short", "a much longer reference sentence for brevity checks"),
]

VOCAB = ("a the cat dog bear bed sofa red black white sitting sleeping on in "
         "photo of with small large park street sky cloud tree kite plate "
         "bowl fruit table wooden holding wearing hat bow").split()


def random_sentence(rng: random.Random, length: int) -> str:
    return " ".join(rng.choice(VOCAB) for _ in range(length))


def main():
    rng = random.Random(20240601)
    pairs = list(HAND_PAIRS)
    while len(pairs) < 50:
        base = random_sentence(rng, rng.randint(8, 14))
        roll = rng.random()
        if roll < 0.45:
            # swap one token: partial overlap with surviving 4-grams
            tokens = base.split()
            tokens[rng.randrange(len(tokens))] = rng.choice(VOCAB)
            pairs.append((" ".join(tokens), base))
        elif roll < 0.75:
            # drop a token or extend with noise: length/brevity variation
            tokens = base.split()
            if rng.random() < 0.5 and len(tokens) > 5:
                del tokens[rng.randrange(len(tokens))]
            else:
                tokens += [rng.choice(VOCAB) for _ in range(rng.randint(1, 3))]
            pairs.append((" ".join(tokens), base))
        else:
            pairs.append((random_sentence(rng, rng.randint(4, 12)), base))

    corpus = [{"candidate": cand, "reference": ref,
               "bleu": oracle_bleu4(cand, ref)} for cand, ref in pairs]
    out = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "bleu_corpus.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(corpus, indent=2))
    nonzero = sum(1 for entry in corpus if entry["bleu"] > 0)
    print(f"wrote {len(corpus)} pairs ({nonzero} nonzero) -> {out}")


if __name__ == "__main__":
    main()
