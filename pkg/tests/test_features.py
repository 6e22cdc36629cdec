import random

import numpy as np
import pytest
from helpers import buses_schema, dialogue, rental_cars_schema, state, system, offer_copy_dialogue, car_then_bus_dialogue, user

from schema_dst.data import Action, SlotDef
from schema_dst.features import (
    CONTEXT_SCHEMES,
    NULL_CANDIDATE,
    AttentionPattern,
    EncodedExample,
    Featurizer,
    FeaturizerConfig,
    SequenceTooLong,
    Task,
    Token,
    align_char_span,
    build_attention_mask,
    gold_turn_contexts,
    read_shards,
    resolve_most_recent,
    ValueMention,
    write_shards,
)
from schema_dst.tokenization import WordTokenizer

SCHEMAS = {s.service_name: s for s in (buses_schema(), rental_cars_schema())}


@pytest.fixture(scope="module")
def featurizer():
    tok = WordTokenizer.from_corpus(SCHEMAS.values(), [offer_copy_dialogue(), car_then_bus_dialogue()])
    return Featurizer(tok)


def contexts(d):
    return list(gold_turn_contexts(d))


def only(examples, name):
    (ex,) = [e for e in examples if e.provenance[3] == name]
    return ex


def region_text(ex, featurizer, span):
    itos = featurizer.tokenizer.itos
    return [itos[i] for i in ex.token_ids[span[0] : span[1]]]


def test_scheme_cardinalities():
    assert [CONTEXT_SCHEMES[t].cardinality for t in Task] == [2, 4, 4, 4, 16, 32]


def test_pack_unpack():
    scheme = CONTEXT_SCHEMES[Task.INDOMAIN]
    fid = scheme.pack({"optional_in_intent": True, "system_gave_value": True})
    assert fid == 0b0101
    assert scheme.unpack(fid) == {
        "optional_in_intent": True,
        "required_in_intent": False,
        "system_gave_value": True,
        "in_user_history": False,
    }
    with pytest.raises(ValueError, match="unknown"):
        scheme.pack({"nonsense": True})


def test_intent_example_layout(featurizer):
    ctx = contexts(offer_copy_dialogue())[0]
    ex = featurizer.build_intent_example(ctx, SCHEMAS["Buses_1"])
    ex.layout.validate()
    assert ex.layout.candidate_ids == ["FindBus", "BuyBusTicket", "NONE"]
    assert ex.target == 0
    assert ex.token_ids[0] == featurizer.tokenizer.token_id("[CLS]")
    # utterance has segment 0, candidates segment 1
    assert set(ex.segment_ids[slice(*ex.layout.utterance_span)]) == {0}
    for _, sp in ex.layout.candidate_spans:
        assert set(ex.segment_ids[slice(*sp)]) == {1}
        assert region_text(ex, featurizer, sp)[-1] == "[SEP]"
    assert ex.position_ids == tuple(range(len(ex)))


def test_none_intent_target():
    d = dialogue("g", [user("Buses_1", "Hello there.", state())])
    tok = WordTokenizer.from_corpus(SCHEMAS.values(), [d])
    ex = Featurizer(tok).build_intent_example(contexts(d)[0], SCHEMAS["Buses_1"])
    assert ex.layout.candidate_ids[ex.target] == "NONE"


def test_intent_context_marks_previous_intent(featurizer):
    ctx = contexts(car_then_bus_dialogue())[1]
    ex = featurizer.build_intent_example(ctx, SCHEMAS["RentalCars_1"])
    ids = np.array(ex.context_feature_ids)
    for cid, (s, e) in ex.layout.candidate_spans:
        assert set(ids[s:e]) == ({1} if cid == "ReserveCar" else {0})
    assert ids[: ex.layout.candidate_spans[0][1][0]].max() == 0
    # first turn has no previous intent
    ex0 = featurizer.build_intent_example(contexts(car_then_bus_dialogue())[0], SCHEMAS["RentalCars_1"])
    assert max(ex0.context_feature_ids) == 0


def test_categorical_candidates_and_target(featurizer):
    ctx = contexts(offer_copy_dialogue())[0]
    exs = featurizer.turn_examples(Task.CATEGORICAL, ctx, SCHEMAS)
    ex = only(exs, "travelers")
    assert ex.layout.candidate_ids == ["1", "2", "3", "4", NULL_CANDIDATE]
    assert ex.layout.candidate_ids[ex.target] == "4"
    assert region_text(ex, featurizer, ex.layout.description_span)[:1] == ["travelers"]
    # unchanged on the next turn -> null
    later = only(featurizer.turn_examples(Task.CATEGORICAL, contexts(offer_copy_dialogue())[1], SCHEMAS), "travelers")
    assert later.layout.candidate_ids[later.target] == NULL_CANDIDATE


def test_freeform_span_target(featurizer):
    ctx = contexts(offer_copy_dialogue())[0]
    exs = featurizer.turn_examples(Task.FREEFORM, ctx, SCHEMAS)
    assert [e.provenance[3] for e in exs] == ["from_location", "to_location", "leaving_date", "leaving_time"]
    a, b = only(exs, "to_location").target
    assert ctx.user_utterance[ex_char(only(exs, "to_location"), a)[0] : ex_char(only(exs, "to_location"), b)[1]] == "San Diego"
    null = only(exs, "leaving_time")
    assert null.target == (null.layout.null_position, null.layout.null_position)


def ex_char(ex, i):
    return ex.char_offsets[i]


def test_span_region_excludes_markers_and_separators(featurizer):
    ex = featurizer.turn_examples(Task.FREEFORM, contexts(offer_copy_dialogue())[1], SCHEMAS)[0]
    words = [featurizer.tokenizer.itos[ex.token_ids[i]] for i in ex.layout.span_region()]
    assert words[-1] == "[NULL]"
    assert not {"sys:", "usr:", "[SEP]", "[CLS]"} & set(words)


def test_requested_count_matches_slots(featurizer):
    # one requested example per (user frame, schema slot)
    d = car_then_bus_dialogue()
    exs = featurizer.corpus_examples(Task.REQUESTED, [d], SCHEMAS)
    expected = sum(len(SCHEMAS[f.service].slots) for t in d.turns if t.speaker == "USER" for f in t.frames)
    assert len(exs) == expected


def test_requested_target():
    d = dialogue(
        "r",
        [user("Buses_1", "What time does it leave?", state("FindBus", ["leaving_time"]))],
    )
    f = Featurizer(WordTokenizer.from_corpus(SCHEMAS.values(), [d]))
    exs = f.turn_examples(Task.REQUESTED, contexts(d)[0], SCHEMAS)
    assert {e.provenance[3]: e.target for e in exs} == {
        "from_location": 0,
        "to_location": 0,
        "leaving_date": 0,
        "leaving_time": 1,
        "travelers": 0,
    }


def test_slot_context_features():
    bus = "Buses_1"
    d = dialogue(
        "c",
        [
            user(bus, "I need a bus to Fresno.", state("FindBus", to_location="Fresno"), {"to_location": "Fresno"}),
            system(bus, "Leaving when? There is one at 9 am.", [Action("REQUEST", "leaving_date"), Action("OFFER", "leaving_time", ("9 am",))]),
            user(bus, "Tomorrow.", state("FindBus", to_location="Fresno")),
        ],
    )
    f = Featurizer(WordTokenizer.from_corpus(SCHEMAS.values(), [d]))
    exs = f.turn_examples(Task.FREEFORM, contexts(d)[1], SCHEMAS)
    fid = {e.provenance[3]: set(e.context_feature_ids) for e in exs}
    assert fid == {"from_location": {0}, "to_location": {0}, "leaving_date": {1}, "leaving_time": {2}}


def test_indomain_context_ids(featurizer):
    ctx = contexts(offer_copy_dialogue())[2]
    exs = featurizer.turn_examples(Task.INDOMAIN, ctx, SCHEMAS)
    by = {e.provenance[3]: e for e in exs}
    assert set(by) == {"leaving_time", "to_location"}
    # BuyBusTicket: both required; both offered by the system; only to_location in user history
    assert set(by["leaving_time"].context_feature_ids) == {0b0110}
    assert set(by["to_location"].context_feature_ids) == {0b1110}
    assert by["leaving_time"].target == 1
    assert by["to_location"].target == 0
    # service description prefix comes first
    assert by["leaving_time"].layout.prefix_span[0] == 1


def test_indomain_needs_a_system_value(featurizer):
    ctx = contexts(offer_copy_dialogue())[0]
    with pytest.raises(ValueError, match="no system value"):
        featurizer.build_indomain_transfer_example(ctx, SCHEMAS["Buses_1"], SCHEMAS["Buses_1"].slot("leaving_time"))


def test_crossdomain_candidates_and_ids(featurizer):
    ctx = contexts(car_then_bus_dialogue())[2]
    exs = featurizer.turn_examples(Task.CROSSDOMAIN, ctx, SCHEMAS)
    names = {e.provenance[3] for e in exs}
    # the OFFER_INTENT pseudo-slot is not a source
    assert not any(n.endswith(":intent") for n in names)
    assert len(exs) == len(SCHEMAS["Buses_1"].slots) * 2
    ex = only(exs, "to_location<-RentalCars_1:pickup_city")
    assert ex.target == 1
    assert set(ex.context_feature_ids) == {0b10100}
    tr = only(exs, "travelers<-RentalCars_1:pickup_date")
    assert set(tr.context_feature_ids) == {0b10010}
    assert tr.target == 0
    assert ex.layout.candidate_ids == ["RentalCars_1:pickup_city"]


def test_no_crossdomain_without_other_services(featurizer):
    assert featurizer.turn_examples(Task.CROSSDOMAIN, contexts(offer_copy_dialogue())[2], SCHEMAS) == []


def test_utterance_sourced_value_is_not_a_transfer():
    bus = "Buses_1"
    d = dialogue(
        "u",
        [
            user(bus, "A bus to Fresno please.", state("FindBus", to_location="Fresno"), {"to_location": "Fresno"}),
            system(bus, "One leaves at 9 am.", [Action("OFFER", "leaving_time", ("9 am",))]),
            user(bus, "Book the 9 am one.", state("BuyBusTicket", to_location="Fresno", leaving_time="9 am"), {"leaving_time": "9 am"}),
        ],
    )
    f = Featurizer(WordTokenizer.from_corpus(SCHEMAS.values(), [d]))
    (ex,) = f.turn_examples(Task.INDOMAIN, contexts(d)[1], SCHEMAS)
    assert ex.target == 0


def test_resolve_most_recent():
    ms = [ValueMention(1, 0, "a"), ValueMention(3, 1, "b"), ValueMention(3, 0, "c"), ValueMention(3, 1, "d")]
    assert resolve_most_recent(ms).value == "d"
    with pytest.raises(ValueError):
        resolve_most_recent([])


def _mask_oracle(layout, pattern):
    L = layout.seq_len
    cand = {}
    for cid, (s, e) in layout.candidate_spans:
        for i in range(s, e):
            cand[i] = cid
    out = np.zeros((L, L), dtype=bool)
    for q in range(L):
        for k in range(L):
            if pattern == AttentionPattern.FULL or q not in cand or k not in cand:
                out[q, k] = True
            else:
                out[q, k] = cand[q] == cand[k]
    return out


@pytest.mark.parametrize("task", list(Task))
def test_real_examples_match_mask_oracle(featurizer, task):
    n = 0
    for d in (offer_copy_dialogue(), car_then_bus_dialogue()):
        for ex in featurizer.corpus_examples(task, [d], SCHEMAS):
            ex.layout.validate()
            assert np.array_equal(ex.attention_mask, _mask_oracle(ex.layout, ex.pattern))
            n += 1
    assert n > 0


def test_padding_rows_and_columns_are_blocked(featurizer):
    ex = featurizer.build_intent_example(contexts(offer_copy_dialogue())[0], SCHEMAS["Buses_1"])
    m = build_attention_mask(ex.layout, ex.pattern, len(ex) + 5)
    assert not m[len(ex) :].any() and not m[:, len(ex) :].any()
    with pytest.raises(ValueError):
        build_attention_mask(ex.layout, ex.pattern, len(ex) - 1)


def test_system_side_truncated_from_left():
    long_sys = " ".join(f"w{i}" for i in range(300))
    d = dialogue(
        "t",
        [
            user("Buses_1", "Hello.", state()),
            system("Buses_1", long_sys, [Action("REQ_MORE")]),
            user("Buses_1", "A bus please.", state("FindBus")),
        ],
    )
    f = Featurizer(WordTokenizer.from_corpus(SCHEMAS.values(), [d]), FeaturizerConfig(max_seq_len=64))
    ex = f.build_intent_example(contexts(d)[1], SCHEMAS["Buses_1"])
    assert len(ex) <= 64
    ex.layout.validate()
    kept = [f.tokenizer.itos[i] for i in ex.token_ids[slice(*ex.layout.sys_span)]]
    assert kept and kept[-1] == "w299"
    usr = [f.tokenizer.itos[i] for i in ex.token_ids[slice(*ex.layout.usr_span)]]
    assert usr == ["a", "bus", "please", "."]


def test_user_utterance_never_truncated():
    d = dialogue("t", [user("Buses_1", " ".join(["bus"] * 100), state("FindBus"))])
    f = Featurizer(WordTokenizer.from_corpus(SCHEMAS.values(), [d]), FeaturizerConfig(max_seq_len=40))
    with pytest.raises(SequenceTooLong, match="never truncated"):
        f.build_intent_example(contexts(d)[0], SCHEMAS["Buses_1"])


def test_descriptions_trimmed_before_failing():
    slot = SlotDef("to_location", " ".join(["very"] * 80) + " long", False)
    d = offer_copy_dialogue()
    f = Featurizer(WordTokenizer.from_corpus(SCHEMAS.values(), [d]), FeaturizerConfig(max_seq_len=48))
    ex = f.build_freeform_example(contexts(d)[0], SCHEMAS["Buses_1"], slot)
    assert len(ex) == 48
    ex.layout.validate()


def _align_oracle(tokens, start, end, source):
    best = None
    idx = [i for i, t in enumerate(tokens) if t.source == source]
    for a in idx:
        for b in idx:
            if b < a:
                continue
            if tokens[a].start <= start < tokens[a].end and tokens[b].end >= end:
                if all(tokens[i].source == source for i in range(a, b + 1)):
                    if best is None or b - a < best[1] - best[0] or (b - a == best[1] - best[0] and a < best[0]):
                        best = (a, b)
    return best


def test_align_char_span_matches_brute_force():
    rng = random.Random(0)
    words = ["bus", "to", "San", "Diego", "7", "am", ",", "please", "x"]
    for _ in range(300):
        text = " ".join(rng.choice(words) for _ in range(rng.randint(1, 10)))
        toks = [Token(t.text, t.start, t.end, "usr") for t in WordTokenizer.split(text)]
        toks = [Token("sys:")] + toks
        a = rng.randrange(len(text))
        b = rng.randint(a + 1, len(text))
        if text[a].isspace():
            continue
        assert align_char_span(toks, a, b) == _align_oracle(toks, a, b, "usr")


def test_shards_round_trip_and_deterministic(tmp_path, featurizer):
    exs = featurizer.corpus_examples(Task.CATEGORICAL, [offer_copy_dialogue()], SCHEMAS)
    again = featurizer.corpus_examples(Task.CATEGORICAL, [offer_copy_dialogue()], SCHEMAS)
    assert [e.to_bytes() for e in exs] == [e.to_bytes() for e in again]
    paths = write_shards(exs, tmp_path, Task.CATEGORICAL, shard_size=2)
    assert len(paths) == 2
    assert read_shards(tmp_path, Task.CATEGORICAL) == exs


def test_shard_with_wrong_mask_rejected(featurizer):
    ex = featurizer.build_intent_example(contexts(offer_copy_dialogue())[0], SCHEMAS["Buses_1"])
    rec = ex.to_json()
    full = np.ones(len(ex) * len(ex), dtype=bool)
    rec["attention_mask"] = np.packbits(full).tobytes().hex()
    with pytest.raises(ValueError, match="disagrees"):
        EncodedExample.from_json(rec)


def test_missing_shards(tmp_path):
    with pytest.raises(FileNotFoundError, match="build"):
        read_shards(tmp_path, Task.INTENT)
