"""Deterministic synthetic pseudo-CXR corpus.

Images are procedural renders (dark background, two elliptical lung
fields, a bright mediastinum band, per-finding primitives, seeded noise).
Reports come from a closed context-free grammar; a rule-based extractor
inverts the grammar exactly, which is what makes finding-F1 scorable.
Everything is a pure function of (config, index), so corpora are
byte-reproducible and samples can be rendered in parallel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from multiprocessing import Pool

import numpy as np

from .pgm import write_pgm
from .seeding import derive_seed, make_rng

KINDS = ("nodule", "opacity", "effusion", "cardiomegaly")
SIDES = ("left", "right", "bilateral")
SEVERITIES = ("mild", "moderate", "severe")
NO_SIDE = "n/a"
UNSPECIFIED = "unspecified"

_KIND_ORDER = {k: i for i, k in enumerate(KINDS + ("none",))}
_SIDE_ORDER = {s: i for i, s in enumerate(SIDES + (NO_SIDE, UNSPECIFIED))}
_SEV_ORDER = {s: i for i, s in enumerate(SEVERITIES + (UNSPECIFIED,))}

# lung-field geometry in normalized [0,1]^2 coordinates
_LUNGS = {"left": (0.30, 0.55, 0.155, 0.30), "right": (0.70, 0.55, 0.155, 0.30)}
_BAND_HALF_WIDTH = 0.085
_BAND_Y = (0.22, 0.90)
_BG, _LUNG_VAL, _BAND_VAL, _NOISE_SIGMA = 0.08, 0.42, 0.78, 0.02

_NODULE_AMP = {"mild": 0.28, "moderate": 0.42, "severe": 0.55}
_OPACITY_AMP = {"mild": 0.22, "moderate": 0.30, "severe": 0.38}
_EFFUSION_FILL = {"mild": 0.22, "moderate": 0.33, "severe": 0.45}
_CARDIO_WIDEN = {"mild": 1.4, "moderate": 1.7, "severe": 2.0}


class CorpusError(ValueError):
    """Invalid finding specification or corpus configuration."""


@dataclass(frozen=True)
class FindingSpec:
    """One ground-truth finding. kind='none' carries no geometry."""

    kind: str
    side: str = NO_SIDE
    severity: str = "moderate"
    center: tuple | None = None
    size: float | None = None

    @property
    def label(self):
        return (self.kind, self.side, self.severity)


@dataclass
class ImageSample:
    pixels: np.ndarray
    findings: frozenset
    sample_seed: int
    split: str = "train"
    clamped: bool = False


@dataclass
class Report:
    text: list
    findings: frozenset  # of (kind, side, severity) labels


@dataclass
class VqaItem:
    image_ref: str | None
    question: list
    answer: list
    answer_class: str


@dataclass(frozen=True)
class InstructionTemplate:
    task: str
    template_id: int
    pattern: str

    def render(self, **slots) -> list:
        return self.pattern.format(**slots).split()


def sort_labels(labels):
    return sorted(labels, key=lambda t: (_KIND_ORDER[t[0]], _SIDE_ORDER[t[1]], _SEV_ORDER[t[2]]))


# -- geometry ----------------------------------------------------------------

def _grid(h, w):
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return np.meshgrid(xs, ys)  # (X, Y), each (h, w)


def _ellipse_mask(X, Y, cx, cy, ax, ay):
    return ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 <= 1.0


def lung_mask(h, w, side=None) -> np.ndarray:
    """The dark lung fields: the lung ellipses minus the mediastinum band."""
    X, Y = _grid(h, w)
    sides = [side] if side in ("left", "right") else ["left", "right"]
    mask = np.zeros((h, w), dtype=bool)
    for s in sides:
        mask |= _ellipse_mask(X, Y, *_LUNGS[s])
    band = (np.abs(X - 0.5) <= _BAND_HALF_WIDTH) & (Y >= _BAND_Y[0]) & (Y <= _BAND_Y[1])
    return mask & ~band


def point_in_lung(x, y, side) -> bool:
    sides = [side] if side in ("left", "right") else ["left", "right"]
    for s in sides:
        cx, cy, ax, ay = _LUNGS[s]
        if ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0:
            return True
    return False


def _point_in_band(x, y) -> bool:
    return abs(x - 0.5) <= _BAND_HALF_WIDTH and _BAND_Y[0] <= y <= _BAND_Y[1]


def validate_findings(findings) -> None:
    cardio = 0
    for f in findings:
        if f.kind == "none":
            if f.side != NO_SIDE or f.center is not None or f.size is not None:
                raise CorpusError("kind 'none' carries no side or geometry")
            continue
        if f.kind not in KINDS:
            raise CorpusError(f"unknown kind {f.kind!r}")
        if f.severity not in SEVERITIES:
            raise CorpusError(f"unknown severity {f.severity!r}")
        if f.kind == "cardiomegaly":
            cardio += 1
            if f.side != NO_SIDE:
                raise CorpusError("cardiomegaly has no side")
            if f.center is not None and not _point_in_band(*f.center):
                raise CorpusError(f"cardiomegaly center {f.center} outside the mediastinum")
            continue
        if f.side not in SIDES:
            raise CorpusError(f"unknown side {f.side!r}")
        if f.center is None or f.size is None:
            raise CorpusError(f"{f.kind} needs center and size")
        if not 0.0 < f.size <= 0.25:
            raise CorpusError(f"size must lie in (0, 0.25], got {f.size}")
        # bilateral primitives anchor in the left lung and mirror
        anchor_side = "left" if f.side == "bilateral" else f.side
        if not point_in_lung(f.center[0], f.center[1], anchor_side):
            raise CorpusError(f"{f.kind} center {f.center} outside the {anchor_side} lung field")
    if cardio > 1:
        raise CorpusError("at most one cardiomegaly per sample")


# -- image rendering -----------------------------------------------------------

def _finding_sites(f):
    if f.side == "bilateral":
        cx, cy = f.center
        return [(cx, cy), (1.0 - cx, cy)]
    return [f.center]


def _canonical(findings):
    return sorted(findings, key=lambda f: (_KIND_ORDER[f.kind], _SIDE_ORDER[f.side], _SEV_ORDER[f.severity]))


def generate_image(sample_seed: int, findings, dims=(32, 32)) -> ImageSample:
    """Render a pseudo-CXR; identical (seed, findings, dims) give identical pixels."""
    h, w = dims
    if h < 16 or w < 16:
        raise CorpusError(f"dims must be at least 16x16, got {h}x{w}")
    findings = frozenset(findings)
    validate_findings(findings)

    X, Y = _grid(h, w)
    img = np.full((h, w), _BG)
    for side in ("left", "right"):
        img[_ellipse_mask(X, Y, *_LUNGS[side])] = _LUNG_VAL

    widen = 1.0
    for f in findings:
        if f.kind == "cardiomegaly":
            widen = _CARDIO_WIDEN[f.severity]
    band = (np.abs(X - 0.5) <= _BAND_HALF_WIDTH * widen) & (Y >= _BAND_Y[0]) & (Y <= _BAND_Y[1])
    img[band] = _BAND_VAL

    for f in _canonical(findings):
        if f.kind == "effusion":
            frac = _EFFUSION_FILL[f.severity]
            sides = ["left", "right"] if f.side == "bilateral" else [f.side]
            for s in sides:
                cx, cy, ax, ay = _LUNGS[s]
                wedge = _ellipse_mask(X, Y, cx, cy, ax, ay) & (Y >= cy + ay * (1.0 - 2.0 * frac))
                img[wedge] = 0.72
    texture_rng = make_rng(sample_seed, "texture")
    for f in _canonical(findings):
        if f.kind == "opacity":
            texture = texture_rng.uniform(0.0, 1.0, size=(h, w))
            for cx, cy in _finding_sites(f):
                disc = (X - cx) ** 2 + (Y - cy) ** 2 <= f.size**2
                img[disc] += _OPACITY_AMP[f.severity] * (0.35 + 0.65 * texture[disc])
        elif f.kind == "nodule":
            sigma = 0.6 * f.size
            for cx, cy in _finding_sites(f):
                img += _NODULE_AMP[f.severity] * np.exp(
                    -((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * sigma**2)
                )

    img += make_rng(sample_seed, "noise").normal(0.0, _NOISE_SIGMA, size=(h, w))
    clamped = bool((img > 1.0).any() or (img < 0.0).any())
    return ImageSample(np.clip(img, 0.0, 1.0), findings, sample_seed, clamped=clamped)


# -- report grammar --------------------------------------------------------------

_PATTERNS = {
    "nodule": (
        "there is a {sev} {side} nodule .",
        "a {sev} nodule is seen in the {side} lung .",
        "the {side} lung contains a {sev} nodule .",
    ),
    "opacity": (
        "there is a {sev} {side} opacity .",
        "patchy {sev} opacity is noted in the {side} lung .",
        "the {side} lung shows a {sev} opacity .",
    ),
    "effusion": (
        "there is a {sev} {side} pleural effusion .",
        "a {sev} effusion is present on the {side} side .",
        "the {side} costophrenic angle shows a {sev} effusion .",
    ),
    "cardiomegaly": (
        "there is {sev} cardiomegaly .",
        "{sev} cardiomegaly is present .",
        "the cardiac silhouette shows {sev} enlargement .",
    ),
}

_NORMAL_SENTENCES = (
    "no acute findings .",
    "the lungs are clear .",
    "no acute cardiopulmonary abnormality .",
)

_KIND_KEYWORDS = {
    "nodule": ("nodule",),
    "opacity": ("opacity",),
    "effusion": ("effusion",),
    "cardiomegaly": ("cardiomegaly", "enlargement"),
}

INSTRUCTION_TEMPLATES = {
    "cxr_to_report": tuple(
        InstructionTemplate("cxr_to_report", i, p)
        for i, p in enumerate((
            "generate the report for this image .",
            "describe the findings in this image .",
            "write a report for the image .",
        ))
    ),
    "report_to_cxr": tuple(
        InstructionTemplate("report_to_cxr", i, p)
        for i, p in enumerate((
            "generate an image for this report .",
            "synthesize the image described by the report .",
            "create an image matching the report .",
        ))
    ),
    "vqa": tuple(
        InstructionTemplate("vqa", i, p)
        for i, p in enumerate((
            "is there a {kind} ?",
            "is a {kind} present ?",
            "does the image show a {kind} ?",
            "where is the {kind} ?",
            "which side shows the {kind} ?",
            "on which side is the {kind} ?",
            "how many findings are there ?",
            "what is the number of findings ?",
            "how many findings does the image show ?",
        ))
    ),
}
_VQA_FAMILY = {0: "presence", 1: "presence", 2: "presence",
               3: "location", 4: "location", 5: "location",
               6: "count", 7: "count", 8: "count"}


def tokenize_text(text) -> list:
    """Shared normalization rule: lowercase, punctuation as its own token."""
    if isinstance(text, (list, tuple)):
        text = " ".join(text)
    out = []
    for raw in text.lower().split():
        word = ""
        for ch in raw:
            if ch in ".?,":
                if word:
                    out.append(word)
                    word = ""
                out.append(ch)
            else:
                word += ch
        if word:
            out.append(word)
    return out


def text_vocabulary() -> list:
    """The closed word list: grammar + instructions + answers + digits."""
    words = set()
    for patterns in _PATTERNS.values():
        for p in patterns:
            words.update(p.format(sev="{x}", side="{x}").replace("{x}", "").split())
    for s in _NORMAL_SENTENCES:
        words.update(s.split())
    for templates in INSTRUCTION_TEMPLATES.values():
        for t in templates:
            words.update(t.pattern.replace("{kind}", "").split())
    words.update(KINDS)
    words.update(SIDES)
    words.update(SEVERITIES)
    words.update(("yes", "no"))
    words.update(str(d) for d in range(10))
    words.discard("")
    return sorted(words)


def _labels_of(findings):
    out = set()
    for f in findings:
        label = f.label if isinstance(f, FindingSpec) else tuple(f)
        if label[0] != "none":
            out.add(label)
    return out


def render_report(findings, grammar_seed: int) -> Report:
    """One canonical-order sentence per finding; surface form varies by seed."""
    labels = _labels_of(findings)
    rng = make_rng(grammar_seed, "grammar")
    if not labels:
        return Report(list(_NORMAL_SENTENCES[rng.integers(len(_NORMAL_SENTENCES))].split()), frozenset())
    tokens = []
    for kind, side, sev in sort_labels(labels):
        pattern = _PATTERNS[kind][rng.integers(len(_PATTERNS[kind]))]
        tokens.extend(pattern.format(sev=sev, side=side).split())
    return Report(tokens, frozenset(labels))


def extract_findings(text) -> frozenset:
    """Rule-based inverse of the grammar; total on arbitrary token streams.

    Per sentence, every kind keyword combines conjunctively with every side
    and severity mentioned; missing slots report 'unspecified'.
    """
    tokens = tokenize_text(text)
    labels = set()
    sentence = []
    for tok in tokens + ["."]:
        if tok != ".":
            sentence.append(tok)
            continue
        if sentence:
            present = set(sentence)
            sides = [s for s in SIDES if s in present]
            sevs = [s for s in SEVERITIES if s in present]
            for kind, keywords in _KIND_KEYWORDS.items():
                if not any(k in present for k in keywords):
                    continue
                kind_sides = [NO_SIDE] if kind == "cardiomegaly" else (sides or [UNSPECIFIED])
                for side in kind_sides:
                    for sev in sevs or [UNSPECIFIED]:
                        labels.add((kind, side, sev))
        sentence = []
    return frozenset(labels)


# -- vqa ---------------------------------------------------------------------------

def make_vqa(findings, question_seed: int, image_ref=None) -> VqaItem:
    """Sample one question whose answer follows from the ground truth."""
    labels = _labels_of(findings)
    rng = make_rng(question_seed, "vqa")
    kinds_present = {k for k, _, _ in labels}
    sides_by_kind = {}
    for k, side, _ in labels:
        if k != "cardiomegaly":
            sides_by_kind.setdefault(k, set()).add(side)
    locatable = sorted(k for k, sides in sides_by_kind.items() if len(sides) == 1)

    families = ["presence", "count"] + (["location"] if locatable else [])
    family = families[rng.integers(len(families))]
    templates = [t for t in INSTRUCTION_TEMPLATES["vqa"] if _VQA_FAMILY[t.template_id] == family]
    template = templates[rng.integers(len(templates))]

    if family == "presence":
        kind = KINDS[rng.integers(len(KINDS))]
        answer = "yes" if kind in kinds_present else "no"
        return VqaItem(image_ref, template.render(kind=kind), [answer], answer)
    if family == "location":
        kind = locatable[rng.integers(len(locatable))]
        side = next(iter(sides_by_kind[kind]))
        return VqaItem(image_ref, template.render(kind=kind), [side], side)
    return VqaItem(image_ref, template.render(), [str(len(labels))], str(len(labels)))


# -- corpus builder -----------------------------------------------------------------

DEFAULT_FREQUENCIES = {"nodule": 0.35, "opacity": 0.30, "effusion": 0.25, "cardiomegaly": 0.20}
_SIDE_PROBS = ((0.4, "left"), (0.4, "right"), (0.2, "bilateral"))


def _validate_frequencies(freq: dict) -> None:
    for kind, p in freq.items():
        if kind not in KINDS:
            raise CorpusError(f"unknown kind in frequency table: {kind!r}")
        if not 0.0 <= p <= 1.0:
            raise CorpusError(f"frequency for {kind} must lie in [0, 1], got {p}")


def sample_findings(rng: np.random.Generator, present_kinds) -> frozenset:
    """Geometry and attributes for a chosen set of kinds (one finding each)."""
    out = []
    for kind in sorted(present_kinds, key=_KIND_ORDER.get):
        severity = SEVERITIES[rng.integers(len(SEVERITIES))]
        if kind == "cardiomegaly":
            out.append(FindingSpec(kind, NO_SIDE, severity, (0.5, 0.55), 0.1))
            continue
        u = rng.uniform()
        acc, side = 0.0, "left"
        for p, s in _SIDE_PROBS:
            acc += p
            if u <= acc:
                side = s
                break
        anchor = "left" if side == "bilateral" else side
        cx0, cy0, ax, ay = _LUNGS[anchor]
        # polar sampling keeps the center strictly inside the ellipse
        r = 0.8 * np.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2.0 * np.pi)
        center = (cx0 + ax * r * np.cos(theta), cy0 + ay * r * np.sin(theta))
        size = rng.uniform(0.06, 0.15)
        out.append(FindingSpec(kind, side, severity, center, float(size)))
    return frozenset(out)


def _split_of(index, sizes):
    train, val, _ = sizes
    if index < train:
        return "train"
    return "val" if index < train + val else "test"


def plan_corpus(cfg: dict):
    """The full deterministic sample plan: (id, split, seed, findings) rows."""
    sizes = (int(cfg["train"]), int(cfg["val"]), int(cfg["test"]))
    seed = int(cfg["seed"])
    freq = dict(cfg.get("frequencies", DEFAULT_FREQUENCIES))
    _validate_frequencies(freq)

    total = sum(sizes)
    offsets = (0, sizes[0], sizes[0] + sizes[1])
    present = [set() for _ in range(total)]
    # stratified per split and kind: exactly round(p*n) positives each
    for split_idx, n in enumerate(sizes):
        base = offsets[split_idx]
        for kind in KINDS:
            p = freq.get(kind, 0.0)
            count = int(round(p * n))
            chosen = make_rng(seed, "strata", split_idx, kind).permutation(n)[:count]
            for j in chosen:
                present[base + int(j)].add(kind)

    plan = []
    for index in range(total):
        sample_seed = derive_seed(seed, "sample", index)
        findings = sample_findings(make_rng(seed, "findings", index), present[index])
        plan.append((f"s{index:06d}", _split_of(index, sizes), sample_seed, findings))
    return plan


def _render_row(args):
    row, dims = args
    sample_id, split, sample_seed, findings = row
    sample = generate_image(sample_seed, findings, dims)
    sample.split = split
    return sample_id, sample


def _finding_record(f: FindingSpec) -> dict:
    return {
        "kind": f.kind,
        "side": f.side,
        "severity": f.severity,
        "center": None if f.center is None else [round(float(f.center[0]), 6), round(float(f.center[1]), 6)],
        "size": None if f.size is None else round(float(f.size), 6),
    }


def _jsonl_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def build_corpus(cfg: dict, out_dir, force: bool = False, workers: int = 1) -> dict:
    """Write images, the pair manifest, and the VQA file; returns summary counts."""
    pairs_path = os.path.join(out_dir, "pairs.jsonl")
    if os.path.exists(pairs_path) and not force:
        raise FileExistsError(f"{pairs_path} exists; pass force=True to overwrite")
    dims = (int(cfg.get("height", 32)), int(cfg.get("width", 32)))
    plan = plan_corpus(cfg)
    seed = int(cfg["seed"])

    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)

    jobs = [(row, dims) for row in plan]
    if workers > 1:
        with Pool(workers) as pool:
            rendered = pool.map(_render_row, jobs, chunksize=64)
    else:
        rendered = [_render_row(j) for j in jobs]

    counts = {"train": 0, "val": 0, "test": 0}
    label_counts = dict.fromkeys(KINDS, 0)
    with open(pairs_path + ".tmp", "w") as pairs_fh, open(os.path.join(out_dir, "vqa.jsonl.tmp"), "w") as vqa_fh:
        for (sample_id, split, sample_seed, findings), (_, sample) in zip(plan, rendered):
            rel_path = f"images/{sample_id}.pgm"
            write_pgm(os.path.join(out_dir, rel_path), sample.pixels, comment=sample_id)
            report = render_report(findings, derive_seed(seed, "report", sample_id))
            pairs_fh.write(_jsonl_line({
                "id": sample_id,
                "image_path": rel_path,
                "report_text": " ".join(report.text),
                "findings": [_finding_record(f) for f in sorted(findings, key=lambda f: f.label)],
                "split": split,
                "sample_seed": sample_seed,
            }))
            vqa = make_vqa(findings, derive_seed(seed, "question", sample_id), image_ref=sample_id)
            vqa_fh.write(_jsonl_line({
                "id": f"{sample_id}-q0",
                "image_path": rel_path,
                "question": " ".join(vqa.question),
                "answer": " ".join(vqa.answer),
                "answer_class": vqa.answer_class,
                "split": split,
            }))
            counts[split] += 1
            for kind in {f.kind for f in findings}:
                label_counts[kind] += 1
    os.replace(pairs_path + ".tmp", pairs_path)
    os.replace(os.path.join(out_dir, "vqa.jsonl.tmp"), os.path.join(out_dir, "vqa.jsonl"))

    total = max(1, len(plan))
    return {
        "counts": counts,
        "label_marginals": {k: label_counts[k] / total for k in KINDS},
        "pairs_path": pairs_path,
        "vqa_path": os.path.join(out_dir, "vqa.jsonl"),
    }


def load_jsonl(path, split=None) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            record = json.loads(line)
            if split is None or record["split"] == split:
                out.append(record)
    return out
