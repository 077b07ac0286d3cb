"""Synthetic document-classification universe.

Sixteen document classes, two token modalities (``image`` renders layout and
visual cues as words, ``ocr`` is bag-of-words text) and two visual styles: the
``vintage`` scanned look used for training and a ``modern`` born-digital look
that only appears in test data. Documents mix class-indicative words with
style-dependent noise; confusable classes bleed into each other.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .textio import MODALITIES, TEMPLATE_WORDS, Vocab, canonical_response, normalize

# RVL-CDIP label order
ALL_CLASSES = (
    "letter",
    "form",
    "email",
    "handwritten",
    "advertisement",
    "scientific report",
    "scientific publication",
    "specification",
    "file folder",
    "news article",
    "budget",
    "invoice",
    "presentation",
    "questionnaire",
    "resume",
    "memo",
)
TRAIN_CLASSES = (
    "letter",
    "form",
    "advertisement",
    "scientific report",
    "scientific publication",
    "specification",
    "file folder",
    "budget",
    "resume",
    "memo",
)
HELDOUT_CLASSES = ("email", "handwritten", "news article", "invoice", "presentation", "questionnaire")

PROMPT_VARIANTS = {"all16": ALL_CLASSES, "train10": TRAIN_CLASSES, "heldout6": HELDOUT_CLASSES}

STYLES = ("vintage", "modern")

OCR_LEXICON = {
    "letter": "dear sincerely regards yours truly enclosed correspondence kindly thank_you cordially",
    "form": "applicant please_print signature date_field checkbox section_a approved office_use field_no initials",
    "email": "sent subject cc recipient forwarded reply message inbox attachment from",
    "handwritten": "scribbled illegible jotted cursive ink crossed_out pencil margin_note doodle rough",
    "advertisement": "sale offer buy free discount brand flavor limited_time new_look save",
    "scientific report": "results experiment laboratory samples analysis method findings test_series observed protocol",
    "scientific publication": "abstract journal bibliography et_al volume published doi introduction citation peer",
    "specification": "tolerance component dimensions standard grade requirement material compliance parameter protocol",
    "file folder": "tab_label archive drawer binder divider index_no case_file box_no retention contents",
    "news article": "headline reporter edition said city yesterday press correspondent breaking sources",
    "budget": "expenses fiscal allocation estimate quarter projected cost funds total amount",
    "invoice": "invoice_no due payment bill_to qty unit_price remit tax total amount",
    "presentation": "slide agenda overview bullet objectives summary next_steps goals outline key_points",
    "questionnaire": "question survey respondent rate agree disagree how_often circle_one scale_item section_a",
    "resume": "experience education skills employment degree objective university career position references_available",
    "memo": "memorandum re distribution attached internal to from subject cc routing",
}

IMAGE_LEXICON = {
    "letter": "letterhead_logo salutation_block signature_scrawl closing_block address_block_top single_column_prose date_line_right wide_margins",
    "form": "grid_boxes fill_lines checkbox_array label_value_pairs boxed_sections stamp_box signature_line dense_fields",
    "email": "header_fields_block timestamp_line address_list_top quoted_reply_bars monospace_text horizontal_rule_top short_paragraphs printout_footer",
    "handwritten": "irregular_strokes slanted_lines ink_blots uneven_baseline ruled_paper no_typeset_text loose_script smudges",
    "advertisement": "large_display_type product_photo logo_centered bold_slogan coupon_border decorative_frame price_burst full_bleed_image",
    "scientific report": "section_headings data_table line_chart numbered_sections caption_below dense_paragraphs appendix_tables lab_stamp",
    "scientific publication": "two_column_layout title_author_block abstract_box reference_list equation_lines figure_panels journal_header footnote_text",
    "specification": "spec_table part_diagram revision_block tolerance_columns numbered_clauses drawing_border code_labels data_table",
    "file folder": "folder_tab_edge blank_cover sticker_label handwritten_label cardboard_texture large_empty_area tab_number crease_line",
    "news article": "masthead multi_column_text headline_banner byline photo_caption column_rules dateline pull_quote",
    "budget": "number_columns ledger_rows totals_row currency_columns row_labels_left sum_lines dense_numerals year_columns",
    "invoice": "company_logo_corner line_item_table amount_due_box billing_address_block invoice_header tax_line totals_row remittance_stub",
    "presentation": "large_title_text bullet_list slide_border sparse_text slide_number centered_heading diagram_shapes landscape_page",
    "questionnaire": "numbered_questions answer_boxes rating_scale_rows tick_circles instructions_block option_columns skip_arrows checkbox_array",
    "resume": "name_header_large dated_entries section_rules bulleted_roles contact_line two_column_dates compact_text education_block",
    "memo": "memo_header_caps to_from_lines subject_line_bold horizontal_rule short_body initials_mark distribution_list routing_stamp",
}

CONFUSABLE_PAIRS = (
    ("letter", "email"),
    ("letter", "memo"),
    ("email", "memo"),
    ("form", "budget"),
    ("form", "questionnaire"),
    ("budget", "invoice"),
    ("scientific report", "scientific publication"),
    ("scientific report", "specification"),
    ("advertisement", "news article"),
    ("advertisement", "presentation"),
    ("handwritten", "file folder"),
    ("resume", "letter"),
)

NOISE_LEXICON = {
    ("vintage", "ocr"): "tobacco lorillard facsimile typewritten carbon_copy telex 1978 1985 1992 ref_no page received "
    "file_copy confidential dept corp inc mr mrs suite tel brand_x smokers research_center",
    ("modern", "ocr"): "www online pdf download digital click website 2019 2021 app cloud social_media link update "
    "portal login password wifi smartphone hashtag video stream startup newsletter",
    ("vintage", "image"): "scan_speckle skew faded_ink punch_holes staple_mark fax_header_strip grainy_background "
    "photocopy_streaks coffee_stain low_contrast dark_border bates_number",
    ("modern", "image"): "crisp_fonts color_graphics hyperlink_underline qr_code gradient_fill high_resolution "
    "sans_serif white_background icon_row rounded_boxes web_banner screenshot_frame",
}

LAYOUT_MARKERS = {
    "vintage": ("region_top", "region_body", "region_foot"),
    "modern": ("block_header", "block_main", "block_sidebar"),
}

REASONING_TEMPLATE = "the document contains {w1} {w2} typical of a {label}"
NEAREST_TEMPLATE = "the document contains {w1} {w2} closest to a {label}"
REASONING_WORDS = tuple(
    dict.fromkeys(
        (REASONING_TEMPLATE + " " + NEAREST_TEMPLATE).replace("{w1}", "").replace("{w2}", "").replace("{label}", "").split()
    )
)


def lexicon(label: str, modality: str) -> tuple[str, ...]:
    table = OCR_LEXICON if modality == "ocr" else IMAGE_LEXICON
    return tuple(table[label].split())


def confusables(label: str) -> tuple[str, ...]:
    out = [b if a == label else a for a, b in CONFUSABLE_PAIRS if label in (a, b)]
    return tuple(c for c in ALL_CLASSES if c in out)


@dataclass(frozen=True)
class ClassSpec:
    name: str
    lexicons: dict
    confusable: tuple[str, ...]


def class_specs() -> list[ClassSpec]:
    return [
        ClassSpec(c, {m: lexicon(c, m) for m in MODALITIES}, confusables(c)) for c in ALL_CLASSES
    ]


def slug(label: str) -> str:
    return label.replace(" ", "_")


@dataclass
class DocumentSample:
    id: str
    label: str
    modality: str
    style: str
    split: str
    document_words: list[str]
    gold_reasoning: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DocumentSample":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class GenConfig:
    """Generation parameters; all keys may appear in a ``key = value`` config file."""

    seed: int = 0
    train_per_class: int = 100
    test_per_class: int = 20
    doc_len: int = 24
    signal_fraction: float = 0.5
    ood_signal_fraction: float = 0.3
    ood_distractor_fraction: float = 0.15
    confusability: float = 0.25
    label_noise: float = 0.0
    ood_margin: float = 0.01

    def validate(self) -> None:
        for name in ("train_per_class", "test_per_class", "doc_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("signal_fraction", "ood_signal_fraction"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        for name in ("ood_distractor_fraction", "confusability", "label_noise", "ood_margin"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.ood_signal_fraction + self.ood_distractor_fraction > 1:
            raise ConfigError("ood signal + distractor fractions exceed 1")

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def parse(cls, text: str) -> "GenConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = int(val) if kinds[key] in ("int", int) else float(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
        cfg = cls(**values)
        cfg.validate()
        return cfg


def _draw_document(
    rng: np.random.Generator,
    label: str,
    modality: str,
    style: str,
    cfg: GenConfig,
    known: dict | None = None,
    extra_noise: Sequence[str] = (),
    extra_rate: float = 0.0,
) -> list[str]:
    n = cfg.doc_len
    ood = style == "modern"
    n_signal = max(2, int(round((cfg.ood_signal_fraction if ood else cfg.signal_fraction) * n)))
    n_distract = int(round(cfg.ood_distractor_fraction * n)) if ood else 0
    n_noise = max(0, n - n_signal - n_distract)

    def pool(c):
        words = lexicon(c, modality)
        return known[(c, modality)] if known is not None else words

    own = pool(label)
    conf = confusables(label)
    words: list[str] = []
    # at least two distinct own-class cues so the templated reasoning can cite them
    words.extend(rng.choice(own, size=2, replace=False).tolist())
    for _ in range(n_signal - 2):
        if conf and rng.random() < cfg.confusability:
            c = conf[int(rng.integers(len(conf)))]
            words.append(str(rng.choice(pool(c))))
        else:
            words.append(str(rng.choice(own)))
    others = [c for c in ALL_CLASSES if c != label]
    for _ in range(n_distract):
        c = others[int(rng.integers(len(others)))]
        words.append(str(rng.choice(pool(c))))
    noise = NOISE_LEXICON[(style, modality)].split()
    for w in rng.choice(noise, size=n_noise).tolist():
        if extra_noise and rng.random() < extra_rate:
            w = str(extra_noise[int(rng.integers(len(extra_noise)))])
        words.append(w)
    words = [words[i] for i in rng.permutation(len(words))]
    if modality == "image":
        # three layout regions, each opened by a style-specific marker
        cut = [0, len(words) // 3, 2 * len(words) // 3, len(words)]
        laid: list[str] = []
        for r, marker in enumerate(LAYOUT_MARKERS[style]):
            laid.append(marker)
            laid.extend(words[cut[r] : cut[r + 1]])
        words = laid
    return words


def gold_reasoning(label: str, modality: str, words: Sequence[str], rng: np.random.Generator) -> str:
    """Templated explanation citing two distinct class cues present in ``words``."""
    own = set(lexicon(label, modality))
    present = list(dict.fromkeys(w for w in words if w in own))
    if len(present) < 2:
        present = list(dict.fromkeys(w for w in words if w not in LAYOUT_MARKERS["vintage"] + LAYOUT_MARKERS["modern"]))
    pick = rng.choice(len(present), size=2, replace=False)
    return REASONING_TEMPLATE.format(w1=present[pick[0]], w2=present[pick[1]], label=label)


def generate(cfg: GenConfig | None = None, modalities: Sequence[str] = MODALITIES) -> list[DocumentSample]:
    """Deterministic dataset: a pure function of ``cfg``.

    Train documents are vintage only; test documents cover both styles.
    """
    cfg = cfg or GenConfig()
    cfg.validate()
    out: list[DocumentSample] = []
    plan = [("train", "vintage", cfg.train_per_class)]
    plan += [("test", s, cfg.test_per_class) for s in STYLES]
    split_idx = {"train": 0, "test": 1}
    for split, style, count in plan:
        for mi, modality in enumerate(MODALITIES):
            if modality not in modalities:
                continue
            for ci, label in enumerate(ALL_CLASSES):
                rng = np.random.default_rng([cfg.seed, split_idx[split], STYLES.index(style), mi, ci])
                for i in range(count):
                    words = _draw_document(rng, label, modality, style, cfg)
                    shown = label
                    if cfg.label_noise and rng.random() < cfg.label_noise:
                        shown = ALL_CLASSES[int(rng.integers(len(ALL_CLASSES)))]
                    out.append(
                        DocumentSample(
                            id=f"{split}-{style}-{modality}-{slug(label)}-{i:04d}",
                            label=shown,
                            modality=modality,
                            style=style,
                            split=split,
                            document_words=words,
                            gold_reasoning=gold_reasoning(label, modality, words, rng),
                        )
                    )
    return out


def pretraining_stream(
    seed: int,
    known_fraction: float = 0.3,
    cfg: GenConfig | None = None,
    empty_reasoning_rate: float = 0.1,
    absent_rate: float = 0.4,
    unknown_noise_rate: float = 0.2,
    copy_rate: float = 0.15,
):
    """Endless generator of (prompt spec, reasoning text, target label) for base pretraining.

    Only the first ``known_fraction`` of every class lexicon carries class
    information; the remaining lexicon words still occur, but as unassociated
    filler, and a ``copy_rate`` share of explanations cites arbitrary document
    words, so every word can be read and written. Class lists are random
    subsets in random order. With probability ``absent_rate`` the true class
    is left out of the list and the target becomes the listed class with the
    most visible cues, so the model has to read the list it is given.
    """
    from .textio import PromptSpec

    cfg = cfg or GenConfig()
    rng = np.random.default_rng([seed, 7919])
    known = {}
    unknown = {m: [] for m in MODALITIES}
    for c in ALL_CLASSES:
        for m in MODALITIES:
            words = lexicon(c, m)
            k = max(2, int(round(known_fraction * len(words))))
            known[(c, m)] = words[:k]
            unknown[m].extend(words[k:])
    for m in MODALITIES:
        seen = {w for c in ALL_CLASSES for w in known[(c, m)]}
        unknown[m] = sorted(set(unknown[m]) - seen)
    markers = set(LAYOUT_MARKERS["vintage"] + LAYOUT_MARKERS["modern"])
    while True:
        label = ALL_CLASSES[int(rng.integers(len(ALL_CLASSES)))]
        modality = MODALITIES[int(rng.integers(2))]
        style = STYLES[int(rng.integers(2))]
        words = _draw_document(rng, label, modality, style, cfg, known, unknown[modality], unknown_noise_rate)
        others = [c for c in ALL_CLASSES if c != label]
        absent = rng.random() < absent_rate
        # short lists half of the time, so that reading the list pays off early
        k = int(rng.integers(1, 5)) if rng.random() < 0.5 else int(rng.integers(1, len(ALL_CLASSES) + 1))
        if absent:
            k = min(k, len(others))
            chosen = [others[i] for i in rng.choice(len(others), size=k, replace=False)]
        else:
            chosen = [others[i] for i in rng.choice(len(others), size=k - 1, replace=False)] + [label]
            chosen = [chosen[i] for i in rng.permutation(k)]
        target = label
        if absent:
            conf = set(confusables(label))
            target = max(
                chosen,
                key=lambda c: (sum(w in known[(c, modality)] for w in words), c in conf, -chosen.index(c)),
            )
        u = rng.random()
        if u < empty_reasoning_rate:
            reasoning = ""
        elif u < empty_reasoning_rate + copy_rate:
            body = list(dict.fromkeys(w for w in words if w not in markers))
            pick = rng.choice(len(body), size=2, replace=False)
            template = REASONING_TEMPLATE if target == label else NEAREST_TEMPLATE
            reasoning = template.format(w1=body[pick[0]], w2=body[pick[1]], label=target)
        else:
            reasoning = _known_reasoning(label, modality, words, known, rng, target)
        yield PromptSpec(tuple(chosen), modality, tuple(words)), reasoning, target


def _known_reasoning(label, modality, words, known, rng, target) -> str:
    own = set(known[(label, modality)])
    present = list(dict.fromkeys(w for w in words if w in own))
    pick = rng.choice(len(present), size=2, replace=False)
    template = REASONING_TEMPLATE if target == label else NEAREST_TEMPLATE
    return template.format(w1=present[pick[0]], w2=present[pick[1]], label=target)


def all_words() -> list[str]:
    words: list[str] = list(TEMPLATE_WORDS)
    for c in ALL_CLASSES:
        words.extend(c.split())
    words.extend(REASONING_WORDS)
    for styl in STYLES:
        words.extend(LAYOUT_MARKERS[styl])
    for c in ALL_CLASSES:
        for m in MODALITIES:
            words.extend(lexicon(c, m))
    for key in sorted(NOISE_LEXICON):
        words.extend(NOISE_LEXICON[key].split())
    return words


def build_vocab() -> Vocab:
    return Vocab.build(all_words())


# ---------------------------------------------------------------------------
# SFT targets


@dataclass
class SftExample:
    prompt: list[int]
    response: list[int]
    label: str
    sample_id: str = ""


def make_sft_targets(
    samples: Iterable[DocumentSample], vocab: Vocab, prompt_classes: Sequence[str] = TRAIN_CLASSES
) -> list[SftExample]:
    from .textio import PromptSpec, build_prompt

    out = []
    for s in samples:
        prompt = build_prompt(PromptSpec(tuple(prompt_classes), s.modality, tuple(s.document_words)), vocab)
        out.append(SftExample(prompt, canonical_response(s.gold_reasoning, s.label, vocab), s.label, s.id))
    return out


# ---------------------------------------------------------------------------
# scenario partitions


SPLIT_CLASSES = {
    "train10": TRAIN_CLASSES,
    "heldout6": HELDOUT_CLASSES,
    "all16": ALL_CLASSES,
    "vintage": ALL_CLASSES,
    "modern": ALL_CLASSES,
}

SCENARIOS = ("ood-style", "unseen-classes", "modality")


@dataclass
class EvalSet:
    split: str
    modality: str
    samples: list[DocumentSample] = field(default_factory=list)

    @property
    def classes(self) -> tuple[str, ...]:
        return SPLIT_CLASSES[self.split]


@dataclass
class ScenarioData:
    scenario: str
    train: list[DocumentSample]
    train_classes: tuple[str, ...]
    train_modality: str
    eval_sets: list[EvalSet]


def scenario_split(dataset: Sequence[DocumentSample], scenario: str, train_modality: str = "image") -> ScenarioData:
    if scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    if train_modality not in MODALITIES:
        raise UsageError(f"unknown modality {train_modality!r}")

    def pick(split, style, modality, classes):
        keep = set(classes)
        return [
            s for s in dataset if s.split == split and s.style == style and s.modality == modality and s.label in keep
        ]

    m = train_modality
    if scenario == "ood-style":
        train = pick("train", "vintage", m, ALL_CLASSES)
        evals = [EvalSet(st, m, pick("test", st, m, ALL_CLASSES)) for st in STYLES]
        classes = ALL_CLASSES
    elif scenario == "unseen-classes":
        train = pick("train", "vintage", m, TRAIN_CLASSES)
        evals = [EvalSet(sp, m, pick("test", "vintage", m, SPLIT_CLASSES[sp])) for sp in ("train10", "heldout6", "all16")]
        classes = TRAIN_CLASSES
    else:
        train = pick("train", "vintage", m, ALL_CLASSES)
        evals = [EvalSet("all16", mm, pick("test", "vintage", mm, ALL_CLASSES)) for mm in MODALITIES]
        classes = ALL_CLASSES
    for es in evals:
        if not es.samples:
            raise UsageError(f"dataset has no samples for split {es.split!r} / modality {es.modality!r}")
    if not train:
        raise UsageError("dataset has no training samples for this scenario")
    return ScenarioData(scenario, train, classes, m, evals)


# ---------------------------------------------------------------------------
# frequency oracle and file I/O


def frequency_oracle(sample: DocumentSample, candidates: Sequence[str] = ALL_CLASSES) -> str:
    """Brute-force lexicon counting classifier; ties go to the earlier candidate."""
    counts = {c: 0 for c in candidates}
    words = sample.document_words
    for c in candidates:
        lex = set(lexicon(c, sample.modality))
        counts[c] = sum(w in lex for w in words)
    return max(candidates, key=lambda c: (counts[c], -candidates.index(c)))


def oracle_accuracy(samples: Sequence[DocumentSample]) -> float:
    if not samples:
        raise UsageError("no samples")
    return float(np.mean([frequency_oracle(s) == s.label for s in samples]))


def write_jsonl(samples: Iterable[DocumentSample], path: str | Path) -> str:
    text = "".join(s.to_json() + "\n" for s in samples)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_jsonl(path: str | Path) -> list[DocumentSample]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(DocumentSample.from_dict(json.loads(line)))
    return out


def dataset_bytes(samples: Iterable[DocumentSample]) -> bytes:
    return "".join(s.to_json() + "\n" for s in samples).encode()


def manifest(cfg: GenConfig, samples: Sequence[DocumentSample]) -> dict:
    return {
        "generator": "doclab.synthdocs",
        "params": asdict(cfg),
        "n_samples": len(samples),
        "sha256": hashlib.sha256(dataset_bytes(samples)).hexdigest(),
    }


_SAFE = re.compile(r"^[a-z0-9_]+$")


def check_lexicons() -> None:
    """Raise if lexicon words are malformed or overlap outside confusable pairs."""
    pairs = {frozenset(p) for p in CONFUSABLE_PAIRS}
    for m in MODALITIES:
        for i, a in enumerate(ALL_CLASSES):
            la = set(lexicon(a, m))
            if not la or not all(_SAFE.match(w) for w in la):
                raise ValueError(f"bad lexicon for {a}/{m}")
            for b in ALL_CLASSES[i + 1 :]:
                if la & set(lexicon(b, m)) and frozenset((a, b)) not in pairs:
                    raise ValueError(f"lexicons of {a} and {b} overlap but are not confusable")
