import itertools
import json

import numpy as np
import numpy.testing as npt
import pytest

from cxrlm import corpus as cp
from cxrlm.pgm import read_pgm, write_pgm
from cxrlm.seeding import make_rng


def disc_annulus_means(pixels, center, radius):
    # region oracle: mean inside the disc vs the surrounding annulus
    h, w = pixels.shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    X, Y = np.meshgrid(xs, ys)
    d2 = (X - center[0]) ** 2 + (Y - center[1]) ** 2
    disc = d2 <= radius**2
    annulus = (d2 > radius**2) & (d2 <= (2 * radius) ** 2)
    return pixels[disc].mean(), pixels[annulus].mean()


# -- image generation ----------------------------------------------------------

def test_empty_findings_baseline():
    sample = cp.generate_image(321, frozenset())
    mask = cp.lung_mask(32, 32)
    assert sample.pixels[mask].max() < 0.55  # below any nodule level
    assert sample.pixels.min() >= 0.0 and sample.pixels.max() <= 1.0


def test_nodule_region_oracle():
    f = cp.FindingSpec("nodule", "left", "moderate", (0.3, 0.4), 0.1)
    sample = cp.generate_image(99, {f})
    inside, around = disc_annulus_means(sample.pixels, (0.3, 0.4), 0.1)
    assert inside - around >= 0.15


def test_generate_image_deterministic():
    f = cp.FindingSpec("opacity", "right", "severe", (0.7, 0.5), 0.12)
    a = cp.generate_image(5, {f})
    b = cp.generate_image(5, {f})
    npt.assert_array_equal(a.pixels, b.pixels)


def test_generate_image_rejects_small_dims():
    with pytest.raises(cp.CorpusError):
        cp.generate_image(0, frozenset(), dims=(8, 8))


def test_center_outside_lung_rejected():
    f = cp.FindingSpec("nodule", "left", "mild", (0.95, 0.05), 0.1)
    with pytest.raises(cp.CorpusError, match="outside"):
        cp.generate_image(0, {f})


def test_two_cardiomegaly_rejected():
    fs = {
        cp.FindingSpec("cardiomegaly", "n/a", "mild", (0.5, 0.55), 0.1),
        cp.FindingSpec("cardiomegaly", "n/a", "severe", (0.5, 0.55), 0.1),
    }
    with pytest.raises(cp.CorpusError, match="cardiomegaly"):
        cp.validate_findings(fs)


def test_cardiomegaly_widens_band():
    base = cp.generate_image(3, frozenset())
    wide = cp.generate_image(3, {cp.FindingSpec("cardiomegaly", "n/a", "severe", (0.5, 0.55), 0.1)})
    row = 16
    assert (wide.pixels[row] > 0.7).sum() > (base.pixels[row] > 0.7).sum()


# -- grammar round trip -----------------------------------------------------------

def test_render_report_empty_case():
    report = cp.render_report(frozenset(), 0)
    assert report.findings == frozenset()
    assert cp.extract_findings(report.text) == frozenset()
    assert " ".join(report.text) in {s for s in ("no acute findings .", "the lungs are clear .", "no acute cardiopulmonary abnormality .")}


def test_render_report_tokens_and_roundtrip():
    label = ("nodule", "right", "moderate")
    report = cp.render_report({label}, 7)
    assert "nodule" in report.text and "right" in report.text
    assert cp.extract_findings(report.text) == frozenset({label})


def test_paraphrase_invariance():
    labels = {("effusion", "left", "mild"), ("cardiomegaly", "n/a", "severe")}
    texts = set()
    for seed in range(12):
        report = cp.render_report(labels, seed)
        texts.add(" ".join(report.text))
        assert cp.extract_findings(report.text) == frozenset(labels)
    assert len(texts) > 1  # surface form actually varies


def test_roundtrip_sweep_200_cases():
    rng = make_rng(2024, "sweep")
    kinds = list(cp.KINDS)
    for case in range(200):
        chosen = [k for k in kinds if rng.uniform() < 0.5]
        labels = set()
        for k in chosen:
            side = "n/a" if k == "cardiomegaly" else cp.SIDES[rng.integers(3)]
            labels.add((k, side, cp.SEVERITIES[rng.integers(3)]))
        report = cp.render_report(labels, int(rng.integers(1 << 31)))
        assert cp.extract_findings(report.text) == frozenset(labels), labels


def test_extract_empty_text():
    assert cp.extract_findings("") == frozenset()
    assert cp.extract_findings([]) == frozenset()


def test_extract_conjunctive_contradictions():
    got = cp.extract_findings("there is a mild left right nodule .")
    assert ("nodule", "left", "mild") in got and ("nodule", "right", "mild") in got


def test_extract_ignores_unknown_tokens():
    got = cp.extract_findings("zzz qqq severe left nodule xyzzy .")
    assert got == frozenset({("nodule", "left", "severe")})


def test_report_words_in_closed_vocabulary():
    vocab = set(cp.text_vocabulary())
    for seed in range(20):
        labels = {("nodule", "bilateral", "mild"), ("opacity", "left", "severe"),
                  ("effusion", "right", "moderate"), ("cardiomegaly", "n/a", "moderate")}
        report = cp.render_report(labels, seed)
        assert set(report.text) <= vocab


def test_instruction_templates_counts_and_vocab():
    vocab = set(cp.text_vocabulary())
    for task, templates in cp.INSTRUCTION_TEMPLATES.items():
        assert len(templates) >= 3
        for t in templates:
            rendered = t.render(kind="nodule") if "{kind}" in t.pattern else t.render()
            assert set(rendered) <= vocab


# -- vqa ---------------------------------------------------------------------------

def test_vqa_presence_yes():
    f = cp.FindingSpec("nodule", "left", "mild", (0.3, 0.5), 0.1)
    for seed in range(40):
        item = cp.make_vqa({f}, seed)
        if item.answer_class in ("yes", "no"):
            kind = [t for t in item.question if t in cp.KINDS][0]
            expected = "yes" if kind == "nodule" else "no"
            assert item.answer == [expected]


def test_vqa_presence_no_on_empty():
    for seed in range(30):
        item = cp.make_vqa(frozenset(), seed)
        if item.answer_class in ("yes", "no"):
            assert item.answer == ["no"]


def test_vqa_count_cardinality():
    fs = {
        cp.FindingSpec("nodule", "left", "mild", (0.3, 0.5), 0.1),
        cp.FindingSpec("opacity", "right", "severe", (0.7, 0.5), 0.1),
    }
    seen = False
    for seed in range(60):
        item = cp.make_vqa(fs, seed)
        if item.answer_class not in ("yes", "no", "left", "right", "bilateral"):
            assert item.answer == ["2"]
            seen = True
    assert seen


def test_vqa_location():
    f = cp.FindingSpec("effusion", "right", "severe", (0.7, 0.6), 0.1)
    seen = False
    for seed in range(60):
        item = cp.make_vqa({f}, seed)
        if item.answer_class in ("left", "right", "bilateral"):
            assert item.answer == ["right"]
            seen = True
    assert seen


# -- corpus builder ------------------------------------------------------------------

SMALL_CFG = {"train": 30, "val": 6, "test": 6, "seed": 7, "height": 32, "width": 32}


def read_tree_bytes(root):
    import os

    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            p = os.path.join(dirpath, name)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_build_corpus_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cp.build_corpus(dict(SMALL_CFG), a)
    cp.build_corpus(dict(SMALL_CFG), b)
    ta, tb = read_tree_bytes(a), read_tree_bytes(b)
    assert ta.keys() == tb.keys()
    for k in ta:
        assert ta[k] == tb[k], k


def test_build_corpus_refuses_overwrite(tmp_path):
    cp.build_corpus(dict(SMALL_CFG), tmp_path)
    with pytest.raises(FileExistsError):
        cp.build_corpus(dict(SMALL_CFG), tmp_path)
    cp.build_corpus(dict(SMALL_CFG), tmp_path, force=True)


def test_build_corpus_seed_changes_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cp.build_corpus(dict(SMALL_CFG), a)
    cp.build_corpus(dict(SMALL_CFG, seed=8), b)
    assert read_tree_bytes(a) != read_tree_bytes(b)


def test_zero_frequency_kind_absent(tmp_path):
    cfg = dict(SMALL_CFG, frequencies={"nodule": 0.0, "opacity": 0.5, "effusion": 0.2, "cardiomegaly": 0.1})
    cp.build_corpus(cfg, tmp_path)
    for record in cp.load_jsonl(tmp_path / "pairs.jsonl"):
        assert all(f["kind"] != "nodule" for f in record["findings"])


def test_default_marginals_within_3_percent(tmp_path):
    cfg = {"train": 400, "val": 50, "test": 50, "seed": 0}
    summary = cp.build_corpus(cfg, tmp_path)
    for kind, p in cp.DEFAULT_FREQUENCIES.items():
        assert abs(summary["label_marginals"][kind] - p) <= 0.03, (kind, summary["label_marginals"])


def test_invalid_frequency_table():
    with pytest.raises(cp.CorpusError):
        cp.plan_corpus(dict(SMALL_CFG, frequencies={"nodule": -0.1}))
    with pytest.raises(cp.CorpusError):
        cp.plan_corpus(dict(SMALL_CFG, frequencies={"nodule": 1.2}))
    with pytest.raises(cp.CorpusError):
        cp.plan_corpus(dict(SMALL_CFG, frequencies={"bogus": 0.5}))


def test_splits_disjoint_and_seeds_unique(tmp_path):
    cp.build_corpus(dict(SMALL_CFG), tmp_path)
    records = cp.load_jsonl(tmp_path / "pairs.jsonl")
    by_split = {}
    for r in records:
        by_split.setdefault(r["split"], set()).add(r["id"])
    for a, b in itertools.combinations(by_split.values(), 2):
        assert not (a & b)
    seeds = [r["sample_seed"] for r in records]
    assert len(set(seeds)) == len(seeds)


def test_pgm_roundtrip_quantization(tmp_path):
    rng = make_rng(1, "pgm")
    pixels = rng.uniform(0, 1, size=(20, 24))
    path = tmp_path / "x.pgm"
    write_pgm(path, pixels, comment="sample-x")
    loaded, comment = read_pgm(path)
    assert comment == "sample-x"
    assert np.abs(loaded - pixels).max() <= 1.0 / 255.0


def test_manifest_images_reload_match(tmp_path):
    cp.build_corpus(dict(SMALL_CFG), tmp_path)
    records = cp.load_jsonl(tmp_path / "pairs.jsonl")
    r = records[0]
    loaded, comment = read_pgm(tmp_path / r["image_path"])
    assert comment == r["id"]
    findings = frozenset(
        cp.FindingSpec(f["kind"], f["side"], f["severity"],
                       None if f["center"] is None else tuple(f["center"]), f["size"])
        for f in r["findings"]
    )
    regenerated = cp.generate_image(r["sample_seed"], findings)
    assert np.abs(loaded - regenerated.pixels).max() <= 1.0 / 255.0


def test_workers_equivalence(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cp.build_corpus(dict(SMALL_CFG), a, workers=1)
    cp.build_corpus(dict(SMALL_CFG), b, workers=2)
    ta, tb = read_tree_bytes(a), read_tree_bytes(b)
    assert ta == tb


def test_report_text_matches_findings_in_manifest(tmp_path):
    cp.build_corpus(dict(SMALL_CFG), tmp_path)
    for r in cp.load_jsonl(tmp_path / "pairs.jsonl"):
        gold = frozenset((f["kind"], f["side"], f["severity"]) for f in r["findings"])
        assert cp.extract_findings(r["report_text"]) == gold


def test_manifest_is_sorted_json(tmp_path):
    cp.build_corpus(dict(SMALL_CFG), tmp_path)
    with open(tmp_path / "pairs.jsonl") as fh:
        line = fh.readline()
    assert json.loads(line)  # valid json per line
    assert line.index('"findings"') < line.index('"id"') < line.index('"split"')
