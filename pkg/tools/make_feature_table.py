"""Regenerate src/awelab/data/phoible_de_cs.tsv.

Feature names and value conventions follow the PHOIBLE feature set
(Hayes-style ternary features). Contour values of affricates are
flattened to a single value (continuant -, delayedRelease +).
"""

from pathlib import Path

FEATURES = [
    "tone", "stress", "syllabic", "short", "long", "consonantal", "sonorant",
    "continuant", "delayedRelease", "approximant", "tap", "trill", "nasal",
    "lateral", "labial", "round", "labiodental", "coronal", "anterior",
    "distributed", "strident", "dorsal", "high", "low", "front", "back",
    "tense", "retractedTongueRoot", "advancedTongueRoot",
    "periodicGlottalSource", "epilaryngealSource", "spreadGlottis",
    "constrictedGlottis", "fortis", "raisedLarynxEjective",
    "loweredLarynxImplosive", "click",
]

CONS = dict.fromkeys(FEATURES, "-")
CONS.update(tone="0", round="0", labiodental="0", anterior="0",
            distributed="0", strident="0", high="0", low="0", front="0",
            back="0", tense="0")

VOWEL = dict(CONS)
VOWEL.update(syllabic="+", consonantal="-", sonorant="+", continuant="+",
             delayedRelease="0", approximant="+", dorsal="+",
             periodicGlottalSource="+", labiodental="0")

PLACE = {
    "bilabial": dict(labial="+", round="-", labiodental="-"),
    "labiodental": dict(labial="+", round="-", labiodental="+"),
    "alveolar": dict(coronal="+", anterior="+", distributed="-", strident="-"),
    "postalveolar": dict(coronal="+", anterior="-", distributed="+", strident="+"),
    "palatal": dict(coronal="+", anterior="-", distributed="+", strident="-",
                    dorsal="+", high="+", low="-", front="+", back="-"),
    "velar": dict(dorsal="+", high="+", low="-", front="-", back="+"),
    "uvular": dict(dorsal="+", high="-", low="-", front="-", back="+"),
    "glottal": dict(consonantal="-"),
}

MANNER = {
    "stop": {},
    "fricative": dict(continuant="+", delayedRelease="+"),
    "affricate": dict(delayedRelease="+"),
    "nasal": dict(sonorant="+", nasal="+", periodicGlottalSource="+"),
    "lateral": dict(sonorant="+", continuant="+", approximant="+", lateral="+",
                    periodicGlottalSource="+"),
    "trill": dict(sonorant="+", continuant="+", approximant="+", trill="+",
                  periodicGlottalSource="+"),
    "approximant": dict(consonantal="-", sonorant="+", continuant="+",
                        approximant="+", periodicGlottalSource="+"),
}

# symbol: (place, manner, voiced, extra)
CONSONANTS = {
    "p": ("bilabial", "stop", False, {}),
    "b": ("bilabial", "stop", True, {}),
    "t": ("alveolar", "stop", False, {}),
    "d": ("alveolar", "stop", True, {}),
    "k": ("velar", "stop", False, {}),
    "g": ("velar", "stop", True, {}),
    "c": ("palatal", "stop", False, {}),
    "ɟ": ("palatal", "stop", True, {}),
    "ʔ": ("glottal", "stop", False, dict(constrictedGlottis="+")),
    "pf": ("labiodental", "affricate", False, {}),
    "ts": ("alveolar", "affricate", False, dict(strident="+")),
    "tʃ": ("postalveolar", "affricate", False, {}),
    "dʒ": ("postalveolar", "affricate", True, {}),
    "f": ("labiodental", "fricative", False, {}),
    "v": ("labiodental", "fricative", True, {}),
    "s": ("alveolar", "fricative", False, dict(strident="+")),
    "z": ("alveolar", "fricative", True, dict(strident="+")),
    "ʃ": ("postalveolar", "fricative", False, {}),
    "ʒ": ("postalveolar", "fricative", True, {}),
    "ç": ("palatal", "fricative", False, {}),
    "x": ("velar", "fricative", False, {}),
    "ʁ": ("uvular", "fricative", True, {}),
    "h": ("glottal", "fricative", False, dict(spreadGlottis="+", delayedRelease="0")),
    "ɦ": ("glottal", "fricative", True, dict(spreadGlottis="+", delayedRelease="0")),
    "m": ("bilabial", "nasal", True, {}),
    "n": ("alveolar", "nasal", True, {}),
    "ɲ": ("palatal", "nasal", True, {}),
    "ŋ": ("velar", "nasal", True, {}),
    "l": ("alveolar", "lateral", True, {}),
    "r": ("alveolar", "trill", True, {}),
    "r̝": ("alveolar", "trill", True, dict(sonorant="-", approximant="-",
                                          delayedRelease="+", strident="+")),
    "j": ("palatal", "approximant", True, dict(coronal="-", anterior="0",
                                                distributed="0", strident="0")),
}

# symbol: (high, low, front, back, tense, round, long)
VOWELS = {
    "i": "+-+-+--", "iː": "+-+-+-+", "ɪ": "+-+----",
    "y": "+-+-++-", "yː": "+-+-+++", "ʏ": "+-+--+-",
    "e": "--+-+--", "eː": "--+-+-+", "ɛ": "--+----", "ɛː": "--+---+",
    "ø": "--+-++-", "øː": "--+-+++", "œ": "--+--+-",
    "a": "-++----", "aː": "-++---+", "ɐ": "-+-----", "ə": "-------",
    "o": "---+++-", "oː": "---++++", "ɔ": "---+-+-",
    "u": "+--+++-", "uː": "+--++++", "ʊ": "+--+-+-",
}


def consonant(place, manner, voiced, extra):
    row = dict(CONS)
    row.update(PLACE[place])
    row.update(MANNER[manner])
    if voiced:
        row["periodicGlottalSource"] = "+"
    row.update(extra)
    return row


def vowel(code):
    high, low, front, back, tense, rnd, long_ = code
    row = dict(VOWEL)
    row.update(high=high, low=low, front=front, back=back, tense=tense,
               advancedTongueRoot=tense, long=long_)
    if rnd == "+":
        row.update(labial="+", round="+", labiodental="-")
    return row


def main():
    rows = {s: consonant(*spec) for s, spec in CONSONANTS.items()}
    rows.update({s: vowel(code) for s, code in VOWELS.items()})
    out = Path(__file__).resolve().parents[1] / "src" / "awelab" / "data" / "phoible_de_cs.tsv"
    lines = ["\t".join(["phone"] + FEATURES)]
    for sym, row in rows.items():
        lines.append("\t".join([sym] + [row[f] for f in FEATURES]))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(rows)} phones x {len(FEATURES)} features to {out}")


if __name__ == "__main__":
    main()
