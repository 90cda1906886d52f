"""Regenerates the bundled text fixtures (couplets, general-text corpus,
prompt pairs, toy vocabulary). Deterministic; run from this directory."""
import json
import random
import re

random.seed(20240611)

VOWELS = {"AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW"}


def load_lexicon():
    lex = {}
    for line in open("cmudict-0.7b", encoding="latin-1"):
        if line.startswith(";;;") or not line.strip():
            continue
        word, *phones = line.split()
        word = re.sub(r"\(\d+\)$", "", word).lower()
        lex.setdefault(word, []).append(phones)
    return lex


def keys(word, lex):
    out = set()
    for phones in lex.get(word, []):
        idx = [i for i, p in enumerate(phones) if p[-1] in "12"]
        if not idx:
            idx = [i for i, p in enumerate(phones) if p[-1] in "012"]
        start = idx[-1]
        out.add(tuple(re.sub(r"\d", "", p) for p in phones[start:]))
    return out


FAMILIES = [
    "night light flight sight kite height fright delight knight spite",
    "day way bay clay ray play hay spray tray display",
    "sea tree bee key knee glee plea decree tea degree",
    "rain pain lane plain chain train grain stain crane cane",
    "heart part start art cart dart chart",
    "sky sigh eye pie tie dye cry spy",
    "home foam dome comb loam gnome chrome",
    "snow glow flow row crow dough toe show foe",
    "moon tune dune spoon noon loon balloon lagoon cocoon",
    "stone bone throne cone drone tone zone phone groan loan",
    "bed head bread thread shed sled dread spread",
    "dream stream beam cream team seam theme scheme steam gleam",
    "gold fold mold hold marigold",
    "door floor shore core store war roar oar chore lore",
    "sun fun run bun ton nun son gun pun",
    "fear year ear spear deer cheer pier sphere frontier",
    "joy toy boy ploy decoy alloy",
    "grief leaf reef chief thief belief relief beef",
    "doom room bloom gloom tomb broom loom plume perfume",
    "dark park spark lark ark bark mark shark",
    "bliss kiss abyss hiss",
    "sand land hand band strand stand brand",
    "hill mill will thrill chill sill quill drill spill",
    "rose nose prose hose pose",
]

TOPICS = {
    "nature": [
        "Beneath the hills there lay the {w},",
        "The forest whispered of the {w},",
        "Among the ferns I found the {w},",
    ],
    "sea": [
        "Out on the waves I thought about the {w},",
        "The sailors sang at dawn about the {w},",
        "Along the coast we searched for the {w},",
    ],
    "weather": [
        "The autumn clouds rolled in above the {w},",
        "The storm came rushing down upon the {w},",
        "A gentle breeze drifted past the {w},",
    ],
    "childhood": [
        "When I was young I loved the {w},",
        "The children laughed and ran toward the {w},",
        "My grandmother once told me of the {w},",
    ],
    "city": [
        "The crowded streets were filled with {w},",
        "Above the shops there hung the {w},",
        "The market traders argued over the {w},",
    ],
    "love": [
        "She wrote a letter about the {w},",
        "He kept a secret near the {w},",
        "Together we would wander to the {w},",
    ],
    "night": [
        "The candle flickered by the {w},",
        "The stars looked down upon the {w},",
        "At midnight I remembered the {w},",
    ],
    "seasons": [
        "In spring the valley woke beside the {w},",
        "The winter frost had covered up the {w},",
        "All summer long we tended to the {w},",
    ],
    "music": [
        "The fiddler played a tune about the {w},",
        "A quiet drum kept time beside the {w},",
        "The choir rose and sang about the {w},",
    ],
    "travel": [
        "We packed our bags and left behind the {w},",
        "The train rolled slowly past the {w},",
        "Across the border waited the {w},",
    ],
}

CLOSERS = [
    "and hoped that we would someday see the {w}.",
    "and no one there could quite forget the {w}.",
    "until the evening brought us to the {w}.",
    "and dreamed all night of nothing but the {w}.",
    "while far away we heard about the {w}.",
    "and every heart was turning to the {w}.",
    "as morning light returned to find the {w}.",
    "and softly spoke the story of the {w}.",
    "before the silence settled on the {w}.",
    "and smiled because we finally saw the {w}.",
]


def couplets(lex):
    fams = [f.split() for f in FAMILIES]
    for fam in fams:
        for w in fam:
            assert w in lex, w
        k0 = keys(fam[0], lex)
        for w in fam[1:]:
            assert keys(w, lex) & k0, (fam[0], w)
    seen = set()
    out = []
    topics = sorted(TOPICS)
    while len(out) < 1200:
        fam = random.choice(fams)
        r1, r2 = random.sample(fam, 2)
        topic = random.choice(topics)
        line1 = random.choice(TOPICS[topic]).format(w=r1)
        line1 = line1[0].upper() + line1[1:]
        line2 = random.choice(CLOSERS).format(w=r2)
        if (line1, line2) in seen:
            continue
        seen.add((line1, line2))
        out.append({"line1": line1, "line2": line2, "r1": r1, "r2": r2, "topic": topic})
    for i, rec in enumerate(out):
        rec["id"] = f"c{i:04d}"
        rec["split"] = "train" if i < 1000 else "validation"
    return out


SUBJECTS = ["The farmer", "A traveler", "The old teacher", "My neighbor", "The young painter",
            "A quiet child", "The captain", "Her brother", "The baker", "A stranger",
            "The mayor", "Our guide", "The doctor", "A poet", "The gardener"]
VERBS = ["carried", "noticed", "repaired", "described", "painted", "borrowed", "found",
         "remembered", "sold", "measured", "cleaned", "opened", "studied", "moved", "counted"]
OBJECTS = ["the wooden table", "a small basket", "the heavy gate", "an old map", "the broken clock",
           "a bright lantern", "the narrow bridge", "a blue coat", "the garden wall", "a paper boat",
           "the kitchen window", "a silver coin", "the long ladder", "a green bottle", "the village well"]
TAILS = ["before noon", "after the rain", "with great care", "for the festival", "near the river",
         "on a Sunday", "without a word", "in the morning", "by the harbor", "during the winter",
         "at the market", "for his sister", "in the afternoon", "beside the road", "at sunset"]
LINKS = ["Later,", "Meanwhile,", "Afterwards,", "Then", "Soon", "That evening,", "Still,"]


def documents():
    docs = []
    for i in range(1400):
        n = random.randint(2, 4)
        sents = []
        for j in range(n):
            s = f"{random.choice(SUBJECTS)} {random.choice(VERBS)} {random.choice(OBJECTS)} {random.choice(TAILS)}."
            if j > 0 and random.random() < 0.4:
                s = random.choice(LINKS) + " " + s[0].lower() + s[1:]
            sents.append(s)
        docs.append({"id": f"d{i:04d}", "text": " ".join(sents)})
    return docs


PAIRS = [
    ("pair1", "The castle halls were filled with silent {word},\nwhen suddenly they", "doom", "dread"),
    ("pair2", "The children laughed in {word},\nuntil they all", "bliss", "joy"),
    ("pair3", "She wandered home alone into the {word},\nand then she", "dark", "night"),
    ("pair4", "I never knew the depth of such {word},\nas though the", "grief", "pain"),
    ("pair5", "She felt a sudden sense of {word},\nand hoped that", "fright", "fear"),
]

DONOR = "The weather outside is warm and sunny today, and the birds are singing."
PREAMBLE = "A rhyming couplet:\n"


def main():
    lex = load_lexicon()
    cs = couplets(lex)
    with open("couplets.jsonl", "w") as f:
        for c in cs:
            f.write(json.dumps(c) + "\n")
    docs = documents()
    with open("general_text.jsonl", "w") as f:
        for d in docs:
            f.write(json.dumps(d) + "\n")
    with open("prompt_pairs.jsonl", "w") as f:
        for pid, tpl, clean, corrupt in PAIRS:
            f.write(json.dumps({"pair_id": pid, "template": PREAMBLE + tpl,
                                "clean_word": clean, "corrupt_word": corrupt}) + "\n")
    words = set()
    texts = [c["line1"] + " " + c["line2"] for c in cs] + [d["text"] for d in docs]
    texts += [tpl.format(word=w) for _, tpl, a, b in PAIRS for w in (a, b)]
    texts += [DONOR, PREAMBLE]
    for fam in FAMILIES:
        texts.append(fam)
    for t in texts:
        words.update(re.findall(r"[A-Za-z0-9']+", t))
    with open("toy_vocab.txt", "w") as f:
        for w in sorted(words):
            f.write(w + "\n")
    print(len(cs), len(docs), len(words))


if __name__ == "__main__":
    main()
