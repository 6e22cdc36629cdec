import json
from dataclasses import replace

import pytest
from helpers import banks_schema, dialogue, state, system, offer_copy_dialogue, car_then_bus_dialogue, user
from hypothesis import given, settings
from hypothesis import strategies as st

from schema_dst.data import (
    Action,
    DataFormatError,
    ValidationError,
    corpus_stats,
    dialogue_to_json,
    domain_of,
    dump_dialogues,
    dump_schemas,
    dump_split,
    iter_user_frames,
    load_dialogues,
    load_schemas,
    load_split,
    parse_dialogue,
    parse_service,
    service_to_json,
    split_seen_unseen,
)


def test_schema_round_trip(tmp_path, banks, buses, rental_cars):
    dump_schemas([banks, buses, rental_cars], tmp_path / "schema.json")
    assert load_schemas(tmp_path / "schema.json") == [banks, buses, rental_cars]


def test_dialogue_round_trip(tmp_path, buses, rental_cars):
    dialogues = [offer_copy_dialogue(), car_then_bus_dialogue()]
    dump_split([buses, rental_cars], dialogues, tmp_path, per_file=1)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["dialogues_001.json", "dialogues_002.json", "schema.json"]
    schemas, loaded = load_split(tmp_path)
    assert loaded == dialogues
    assert schemas == [buses, rental_cars]


def test_optional_slot_defaults_survive(banks):
    rec = service_to_json(banks)
    rec["intents"][0]["optional_slots"] = {"account_type": "checking"}
    rec["intents"][0]["required_slots"] = []
    s = parse_service(rec)
    assert s.intent("CheckBalance").optional_slots == ("account_type",)
    assert service_to_json(s)["intents"][0]["optional_slots"] == {"account_type": "checking"}
    assert s.intent("CheckBalance").allowed_slots == frozenset({"account_type"})


def test_unknown_field_rejected_unless_lenient(banks):
    rec = service_to_json(banks)
    rec["colour"] = "blue"
    with pytest.raises(DataFormatError, match="unknown field"):
        parse_service(rec)
    assert parse_service(rec, strict=False) == banks


def test_categorical_without_values_rejected(banks):
    rec = service_to_json(banks)
    rec["slots"][0]["possible_values"] = []
    with pytest.raises(ValidationError, match="account_type"):
        parse_service(rec)


def test_intent_with_unknown_slot_rejected(banks):
    rec = service_to_json(banks)
    rec["intents"][0]["required_slots"] = ["pin"]
    with pytest.raises(ValidationError, match="unknown slot 'pin'"):
        parse_service(rec)


def test_schema_error_names_file(tmp_path, banks):
    rec = service_to_json(banks)
    del rec["description"]
    path = tmp_path / "schema.json"
    path.write_text(json.dumps([rec]))
    with pytest.raises(DataFormatError) as err:
        load_schemas(path)
    assert str(path) in str(err.value) and "description" in str(err.value)


def test_bad_json_names_file(tmp_path):
    path = tmp_path / "dialogues_001.json"
    path.write_text("[{")
    with pytest.raises(DataFormatError, match="dialogues_001.json: invalid JSON"):
        load_dialogues(path)


def test_speakers_must_alternate(buses):
    d = dialogue_to_json(offer_copy_dialogue())
    d["turns"][1]["speaker"] = "USER"
    with pytest.raises(ValidationError, match="turn 1"):
        parse_dialogue(d, {"Buses_1": buses})


def test_span_outside_utterance(buses):
    d = dialogue_to_json(offer_copy_dialogue())
    d["turns"][0]["frames"][0]["slots"][0]["exclusive_end"] = 999
    with pytest.raises(ValidationError, match="outside utterance"):
        parse_dialogue(d, {"Buses_1": buses})


def test_unknown_intent_in_state(buses):
    d = dialogue_to_json(offer_copy_dialogue())
    d["turns"][0]["frames"][0]["state"]["active_intent"] = "FlyAway"
    with pytest.raises(ValidationError, match="FlyAway"):
        parse_dialogue(d, {"Buses_1": buses})


def test_service_missing_from_schema_set(buses):
    with pytest.raises(ValidationError, match="RentalCars_1"):
        parse_dialogue(dialogue_to_json(car_then_bus_dialogue()), {"Buses_1": buses})


def test_empty_dialogue_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dialogues(tmp_path)


def test_iter_user_frames_order():
    frames = [(i, f.service) for i, _, f in iter_user_frames(car_then_bus_dialogue())]
    assert frames == [(0, "RentalCars_1"), (2, "RentalCars_1"), (4, "Buses_1")]


def test_domain_of():
    assert domain_of("Banks_1") == "Banks"
    assert domain_of("RideSharing_2") == "RideSharing"


def test_stats_empty_corpus():
    s = corpus_stats([])
    assert s.n_dialogues == 0 and s.avg_tokens_per_turn == 0.0


def test_stats_hand_computed(buses, rental_cars):
    d4, d5 = offer_copy_dialogue(), car_then_bus_dialogue()
    s = corpus_stats([d4, d5], [buses, rental_cars], reference_train_schemas=[buses])
    turns = list(d4.turns) + list(d5.turns)
    assert s.n_dialogues == 2
    assert s.n_services == 2 and s.n_domains == 2
    assert s.avg_turns_per_dialogue == 5.0
    assert s.avg_tokens_per_turn == pytest.approx(sum(len(t.utterance.split()) for t in turns) / 10)
    assert s.pct_dialogues_with_unseen_apis == 50.0


def test_stats_reject_unknown_services(buses):
    with pytest.raises(ValidationError, match="RentalCars_1"):
        corpus_stats([car_then_bus_dialogue()], [buses])


def _toy_dialogue(did, services):
    turns = []
    for svc in services:
        turns.append(user(svc, "hello", state()))
        turns.append(system(svc, "hi", [Action("REQ_MORE")]))
    return dialogue(did, turns)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.sets(st.sampled_from(["A_1", "B_1", "C_1", "D_1"]), min_size=1), max_size=12),
    st.sets(st.sampled_from(["A_1", "B_1", "C_1", "D_1"])),
)
def test_seen_unseen_partition(service_sets, train_names):
    train = [replace(banks_schema(), service_name=n) for n in train_names]
    dialogues = [_toy_dialogue(f"d{k}", sorted(s)) for k, s in enumerate(service_sets)]
    seen, unseen = split_seen_unseen(dialogues, train)
    assert len(seen) + len(unseen) == len(dialogues)
    assert {d.dialogue_id for d in seen}.isdisjoint(d.dialogue_id for d in unseen)
    assert all(set(d.services) <= train_names for d in seen)
    assert all(not set(d.services) <= train_names for d in unseen)


def test_dump_dialogues_is_plain_json(tmp_path):
    dump_dialogues([offer_copy_dialogue()], tmp_path / "d.json")
    rec = json.loads((tmp_path / "d.json").read_text())
    assert rec[0]["turns"][4]["frames"][0]["state"]["slot_values"]["leaving_time"] == ["7 am"]
