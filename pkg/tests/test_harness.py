import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doclab.errors import IntegrityError, UsageError
from doclab.harness import (
    EvalCell,
    EvalMatrix,
    Prediction,
    compare,
    evaluate,
    generalization_gap,
    mean_matrix,
    parse_csv,
    recount,
    scenario_grid,
    score_cell,
    to_csv,
    to_json,
    to_markdown,
)
from doclab.synthdocs import ALL_CLASSES, DocumentSample, PROMPT_VARIANTS, TRAIN_CLASSES, frequency_oracle, scenario_split
from doclab.textio import R_CLOSE, R_OPEN
from conftest import tiny_config
from doclab.policy import init_base


def _prompt_parts(vocab, prompt):
    text = vocab.decode(prompt[:-1])
    head, body = text.split(" . input : ")
    classes = tuple(c.strip() for c in head.split(" : ", 1)[1].split(" ; "))
    modality, words = body.split(" . ", 1)
    return classes, modality, words.split()


def _responder(vocab, choose):
    def respond(prompts, prefill):
        out = []
        for p in prompts:
            classes, modality, words = _prompt_parts(vocab, p)
            label = choose(classes, modality, words)
            body = vocab.encode(f"<answer> {label} </answer> <eos>")
            reasoning = list(prefill) if prefill else vocab.encode("<reasoning> </reasoning>")
            out.append(reasoning + body)
        return out

    return respond


def _follower(vocab):
    """Answers the prompted class whose lexicon best matches the document."""

    def choose(classes, modality, words):
        return frequency_oracle(DocumentSample("x", classes[0], modality, "vintage", "test", words), classes)

    return _responder(vocab, choose)


@pytest.fixture(scope="module")
def unseen(small_dataset):
    return scenario_split(small_dataset, "unseen-classes", "ocr")


def test_disjoint_prompt_forces_zero_accuracy(vocab, unseen, tmp_path):
    m, preds = evaluate(
        None, vocab, unseen.eval_sets, ("heldout6", "train10", "all16"), responder=_follower(vocab),
        predictions_path=tmp_path / "p.jsonl",
    )
    c = m.cell("heldout6", "train10")
    assert c.mismatch and c.in_prompt_rate == 1.0 and c.accuracy == 0.0
    assert m.cell("train10", "heldout6").accuracy == 0.0
    assert not m.cell("all16", "all16").mismatch and m.cell("all16", "all16").accuracy > 0.5
    # independent recount from the dump
    for key, (n, acc, fmt, inp) in recount(tmp_path / "p.jsonl").items():
        cell = next(c for c in m.cells if c.key == key)
        assert (cell.n, cell.accuracy, cell.format_rate, cell.in_prompt_rate) == (n, acc, fmt, inp)


def test_fixed_class_baseline_is_one_tenth(vocab, unseen):
    m, _ = evaluate(None, vocab, unseen.eval_sets[:1], ("train10",), responder=_responder(vocab, lambda *a: "memo"))
    assert m.cell("train10", "train10").accuracy == pytest.approx(0.10, abs=1e-12)


def test_reasoning_off_prefills_every_response(vocab, unseen):
    seen = []

    def respond(prompts, prefill):
        seen.append(tuple(prefill))
        return _follower(vocab)(prompts, prefill)

    m, preds = evaluate(None, vocab, unseen.eval_sets, ("train10",), ("on", "off"), responder=respond)
    assert set(seen) == {(), (R_OPEN, R_CLOSE)}
    off = [p for p in preds if p.reasoning_mode == "off"]
    assert off and all(p.response[:2] == [R_OPEN, R_CLOSE] for p in off)


def test_real_model_greedy_is_deterministic(vocab, unseen):
    store = init_base(tiny_config(len(vocab), context_length=96, dtype="float32"), 0)
    sets = [unseen.eval_sets[1]]
    a, pa = evaluate(store, vocab, sets, ("heldout6",), ("on", "off"), max_new=6)
    b, pb = evaluate(store, vocab, sets, ("heldout6",), ("on", "off"), max_new=6)
    assert to_csv(a) == to_csv(b) and a.checkpoint_hash == store.content_hash()
    assert all(p.response[:2] == [R_OPEN, R_CLOSE] for p in pa if p.reasoning_mode == "off")


def test_vocab_mismatch_rejected(vocab, unseen):
    store = init_base(tiny_config(len(vocab) + 1), 0)
    with pytest.raises(IntegrityError):
        evaluate(store, vocab, unseen.eval_sets, ("train10",))


def _matrix(values, model_id="m"):
    cells = [
        EvalCell(pv, sp, "image", "on", 10, acc, 1.0, 1.0)
        for (pv, sp), acc in zip([(p, s) for p in ("train10", "heldout6", "all16") for s in ("train10", "heldout6", "all16")], values)
    ]
    return EvalMatrix(model_id, "h", cells, {"scenario": "unseen-classes", "train_modality": "image"})


def test_csv_roundtrip_and_markdown():
    m = _matrix(np.linspace(0, 1, 9) / 3)
    back = parse_csv(to_csv(m), "m", "h")
    assert back.cells == m.cells
    md = to_markdown(m)
    body = [line for line in md.splitlines() if line.startswith("| on")]
    assert len(body) == 3 and all(line.count("|") == 6 for line in body)
    assert md.count("[") == 6 + 1  # six mismatch cells plus the legend
    assert to_markdown(EvalMatrix("e", "", [])).splitlines()[0].startswith("| Reasoning | Prompt |")
    assert EvalMatrix.from_dict(__import__("json").loads(to_json(m))).cells == m.cells


def test_compare_and_gap():
    m = _matrix([0.9, 0.1, 0.5, 0.0, 0.6, 0.3, 0.8, 0.4, 0.7])
    same = compare(m, m)
    assert all(d["accuracy"] == 0 for d in same.cells)
    assert same.summary["a"]["gap"] == pytest.approx(0.3)
    assert generalization_gap(0.9, 0.6) == pytest.approx(0.3)
    other = _matrix([0.5] * 9, "n")
    d = compare(m, other)
    assert d.summary["delta_ood"] == pytest.approx(-0.1)
    with pytest.raises(UsageError):
        compare(m, EvalMatrix("x", "", m.cells[:3]))
    avg = mean_matrix([m, other])
    assert avg.cell("train10", "train10").accuracy == pytest.approx(0.7)


def test_mismatch_flags():
    flags = {(pv, sp): EvalCell(pv, sp, "ocr", "on", 1, 0, 0, 0).mismatch for pv in PROMPT_VARIANTS for sp in PROMPT_VARIANTS}
    assert [k for k, v in flags.items() if not v] == [("all16", "all16"), ("train10", "train10"), ("heldout6", "heldout6")]


def test_grids():
    assert len(scenario_grid("unseen-classes")) == 9
    assert len(scenario_grid("reasoning-ablation")) == 18
    assert scenario_grid("modality", "ocr") == [("all16", "all16", "ocr", "on"), ("all16", "all16", "image", "on")]
    with pytest.raises(UsageError):
        scenario_grid("nope")


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from(sorted(PROMPT_VARIANTS)),
    st.sampled_from(sorted(PROMPT_VARIANTS)),
    st.lists(st.tuples(st.integers(0, 15), st.integers(0, 15)), min_size=1, max_size=40),
)
def test_in_prompt_bound(prompt, split, picks):
    """With every prediction inside the prompt, accuracy cannot exceed the share of
    samples whose gold class is offered in the prompt."""
    pc, sc = PROMPT_VARIANTS[prompt], PROMPT_VARIANTS[split]
    preds = []
    for g, p in picks:
        gold, label = sc[g % len(sc)], pc[p % len(pc)]
        preds.append(Prediction("x", prompt, split, "ocr", "on", [], "", label, gold, label == gold, True, label in pc))
    n, acc, _, inp = score_cell(preds)
    assert inp == 1.0
    assert acc <= sum(p.gold in pc for p in preds) / n
